import numpy as np
import pytest

from splatflow import field as field_mod
from splatflow.core import GaussianSet
from splatflow.errors import InvalidParameterError, MissingTapeError
from splatflow.field import (
    DeformationField,
    FieldConfig,
    PlaneGradAccumulator,
    bbox_from_points,
    deform,
    encode,
    field_backward,
)

from ._gradcheck import assert_grads_close, central_difference
from ._oracles import bilinear_scalar

TINY = FieldConfig(base_resolution=(4, 4), levels=(1, 2), feature_size=4, hidden_width=8)
BBOX = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def tiny_field(rng=None, randomize=False):
    rng = rng or np.random.default_rng(0)
    fld = DeformationField(BBOX, TINY, rng)
    if randomize:
        fld.plane_store[:] = rng.uniform(0.5, 1.5, size=fld.plane_store.shape)
        for name in ("w_pos", "b_pos", "w_rot", "b_rot", "w_shadow"):
            fld.mlp[name] = rng.normal(scale=0.1, size=fld.mlp[name].shape)
        fld.mlp["b_shadow"] = np.array([0.3])
    return fld


def gaussian_set(positions, rng=None):
    rng = rng or np.random.default_rng(1)
    n = positions.shape[0]
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet(
        positions=np.asarray(positions, dtype=np.float64),
        rot_quats=quats,
        log_scales=rng.normal(scale=0.1, size=(n, 3)),
        opacity_logits=rng.normal(size=n),
        colors=rng.uniform(0, 1, size=(n, 3)),
        mask_logits=rng.normal(size=n),
    )


class TestEncode:
    def test_all_ones_planes_give_all_ones_feature(self):
        fld = tiny_field()
        out = encode(np.array([0.3, 0.6, 0.2]), 0.7, fld)
        np.testing.assert_allclose(out, np.ones(TINY.encoding_size), atol=1e-15)

    def test_query_at_grid_node_returns_node_product(self):
        rng = np.random.default_rng(5)
        fld = tiny_field(rng, randomize=True)
        # node (1, 2, 3) of the level-0 4^3 spatial lattice, t at node 2
        coords = np.array([1 / 3, 2 / 3, 1.0])
        t = 2 / 3
        out = encode(coords, t, fld)
        grid = {0: 1, 1: 2, 2: 3, 3: 2}  # axis -> node index at level 1
        expected = np.ones(4)
        for pair_idx, (ai, aj) in enumerate(field_mod.PLANE_AXES):
            plane = fld.plane(0, pair_idx)
            expected *= plane[grid[ai], grid[aj]]
        np.testing.assert_allclose(out[:4], expected, atol=1e-12)

    def test_matches_independent_scalar_oracle(self):
        rng = np.random.default_rng(9)
        fld = tiny_field(rng, randomize=True)
        for _ in range(20):
            xyz = rng.uniform(-0.2, 1.2, size=3)  # includes out-of-bbox (clamped)
            t = rng.uniform(0, 1)
            got = encode(xyz, t, fld)
            coords = np.clip(np.append(xyz, t), 0.0, 1.0)
            expected = []
            for li in range(len(TINY.levels)):
                prod = np.ones(TINY.feature_size)
                for pair_idx, (ai, aj) in enumerate(field_mod.PLANE_AXES):
                    # oracle wants (h, ri, rj)
                    plane = np.moveaxis(fld.plane(li, pair_idx), -1, 0)
                    prod *= bilinear_scalar(plane, coords[ai], coords[aj])
                expected.append(prod)
            np.testing.assert_allclose(got, np.concatenate(expected), atol=1e-12)

    def test_continuity_under_small_perturbation(self):
        rng = np.random.default_rng(13)
        fld = tiny_field(rng, randomize=True)
        eps = 1e-6
        for _ in range(100):
            xyz = rng.uniform(0.05, 0.95, size=3)
            t = rng.uniform(0.05, 0.95)
            base = encode(xyz, t, fld)
            shifted = encode(xyz + eps * rng.normal(size=3), t, fld)
            assert np.max(np.abs(shifted - base)) < 1e-3

    def test_plane_shapes(self):
        fld = tiny_field()
        for li, level in enumerate(TINY.levels):
            for pair_idx in range(6):
                assert fld.plane(li, pair_idx).shape == (4 * level, 4 * level, 4)


class TestDeform:
    def test_identity_at_initialization(self):
        fld = tiny_field()  # zero heads, large positive shadow bias
        gs = gaussian_set(np.random.default_rng(3).uniform(0.1, 0.9, size=(5, 3)))
        state, _ = deform(gs, 0.5, fld)
        np.testing.assert_allclose(state.positions, gs.positions, atol=1e-15)
        np.testing.assert_allclose(state.rot_quats, gs.rot_quats, atol=1e-12)
        assert np.all(state.shadows > 0.99)

    def test_constant_position_head_shifts_exactly(self):
        fld = tiny_field()
        fld.mlp["b_pos"] = np.array([0.1, 0.0, 0.0])
        gs = gaussian_set(np.random.default_rng(4).uniform(0.1, 0.9, size=(6, 3)))
        state, _ = deform(gs, 0.2, fld)
        np.testing.assert_allclose(state.positions - gs.positions,
                                   np.tile([0.1, 0, 0], (6, 1)), atol=1e-12)

    def test_static_gaussians_pass_through(self):
        rng = np.random.default_rng(6)
        fld = tiny_field(rng, randomize=True)
        gs = gaussian_set(rng.uniform(0.1, 0.9, size=(4, 3)))
        dynamic = np.array([True, False, True, False])
        state, _ = deform(gs, 0.7, fld, dynamic=dynamic)
        np.testing.assert_array_equal(state.positions[~dynamic], gs.positions[~dynamic])
        np.testing.assert_array_equal(state.rot_quats[~dynamic], gs.rot_quats[~dynamic])
        np.testing.assert_array_equal(state.shadows[~dynamic], [1.0, 1.0])
        assert not np.array_equal(state.positions[dynamic], gs.positions[dynamic])

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(8)
        fld = tiny_field(rng, randomize=True)
        gs = gaussian_set(rng.uniform(0.1, 0.9, size=(5, 3)))
        s1, _ = deform(gs, 0.31, fld)
        s2, _ = deform(gs, 0.31, fld)
        assert np.array_equal(s1.positions, s2.positions)
        assert np.array_equal(s1.rot_quats, s2.rot_quats)
        assert np.array_equal(s1.shadows, s2.shadows)

    def test_shadows_in_unit_interval(self):
        rng = np.random.default_rng(10)
        fld = tiny_field(rng, randomize=True)
        gs = gaussian_set(rng.uniform(0.1, 0.9, size=(32, 3)))
        state, _ = deform(gs, 0.9, fld)
        assert np.all(state.shadows > 0) and np.all(state.shadows < 1)
        np.testing.assert_allclose(np.linalg.norm(state.rot_quats, axis=1), 1.0, atol=1e-9)


class TestFieldBackward:
    def _objective_weights(self, rng, n):
        return (
            rng.normal(size=(n, 3)),
            rng.normal(size=(n, 4)),
            rng.normal(size=n),
        )

    def _objective(self, gs, t, fld, wp, wr, ws, dynamic=None):
        state, _ = deform(gs, t, fld, dynamic=dynamic)
        return float(
            np.sum(wp * state.positions) + np.sum(wr * state.rot_quats)
            + np.sum(ws * state.shadows)
        )

    def test_zero_upstream_gives_zero(self):
        rng = np.random.default_rng(12)
        fld = tiny_field(rng, randomize=True)
        gs = gaussian_set(rng.uniform(0.1, 0.9, size=(3, 3)))
        _, tape = deform(gs, 0.4, fld)
        g = field_backward(tape, np.zeros((3, 3)), np.zeros((3, 4)), np.zeros(3))
        assert np.all(g.positions == 0) and np.all(g.rot_quats == 0)
        assert all(np.all(v == 0) for v in g.mlp.values())
        assert np.all(g.planes.dense() == 0)

    def test_shadow_only_gradient_dataflow(self):
        rng = np.random.default_rng(14)
        fld = tiny_field(rng, randomize=True)
        gs = gaussian_set(rng.uniform(0.1, 0.9, size=(3, 3)))
        _, tape = deform(gs, 0.4, fld)
        g = field_backward(tape, np.zeros((3, 3)), np.zeros((3, 4)), np.ones(3))
        for name in ("w_pos", "b_pos", "w_rot", "b_rot"):
            assert np.all(g.mlp[name] == 0), name
        assert np.any(g.mlp["w_shadow"] != 0)
        assert np.any(g.mlp["w1"] != 0)
        assert np.any(g.planes.dense() != 0)
        assert np.any(g.positions != 0)  # via the encoding query

    def test_missing_tape_raises(self):
        with pytest.raises(MissingTapeError):
            field_backward(None, np.zeros((1, 3)), np.zeros((1, 4)), np.zeros(1))

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(15)
        fld = tiny_field(rng, randomize=True)
        gs = gaussian_set(rng.uniform(0.1, 0.9, size=(3, 3)))
        _, tape = deform(gs, 0.4, fld)
        with pytest.raises(InvalidParameterError):
            field_backward(tape, np.zeros((2, 3)), np.zeros((3, 4)), np.zeros(3))

    def test_full_finite_difference_sweep(self):
        rng = np.random.default_rng(77)
        fld = tiny_field(rng, randomize=True)
        gs = gaussian_set(rng.uniform(0.15, 0.85, size=(2, 3)), rng)
        t = 0.37
        wp, wr, ws = self._objective_weights(rng, 2)

        state, tape = deform(gs, t, fld)
        g = field_backward(tape, wp.copy(), wr.copy(), ws.copy())

        def check(arr, analytic, label):
            def f(x, _arr=arr):
                old = _arr.copy()
                _arr[...] = x
                try:
                    return self._objective(gs, t, fld, wp, wr, ws)
                finally:
                    _arr[...] = old

            numeric = central_difference(f, arr.copy())
            assert_grads_close(analytic, numeric, label=label)

        check(gs.positions, g.positions, "canonical positions")
        check(gs.rot_quats, g.rot_quats, "canonical quats")
        check(fld.plane_store, g.planes.dense(), "plane entries")
        for name in field_mod.MLP_PARAM_NAMES:
            check(fld.mlp[name], g.mlp[name], f"mlp.{name}")

    def test_accumulator_reset(self):
        rng = np.random.default_rng(19)
        fld = tiny_field(rng, randomize=True)
        gs = gaussian_set(rng.uniform(0.1, 0.9, size=(3, 3)))
        accum = PlaneGradAccumulator(fld)
        _, tape = deform(gs, 0.5, fld)
        field_backward(tape, np.ones((3, 3)), np.zeros((3, 4)), np.zeros(3), plane_accum=accum)
        assert accum.n_touched > 0
        accum.reset()
        assert accum.n_touched == 0
        assert np.all(accum.grad == 0) and np.all(accum.dirty == 0)


def test_bbox_from_points_expands():
    pts = np.array([[0.0, 0, 0], [1.0, 2.0, 3.0]])
    bbox = bbox_from_points(pts, expand=0.1)
    np.testing.assert_allclose(bbox[0], [-0.1, -0.2, -0.3])
    np.testing.assert_allclose(bbox[1], [1.1, 2.2, 3.3])

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from splatflow import trackeval as tv
from splatflow.core import GaussianSet, TrajectorySet
from splatflow.errors import DegenerateModelError, ShapeMismatchError
from splatflow.field import DeformationField, FieldConfig


# -- independent metric oracles ------------------------------------------------


def sample_error(pred, gt, i, j):
    dx = pred.positions[i, j, 0] - gt.positions[i, j, 0]
    dy = pred.positions[i, j, 1] - gt.positions[i, j, 1]
    dz = pred.positions[i, j, 2] - gt.positions[i, j, 2]
    return float(np.sqrt(dx * dx + dy * dy + dz * dz))


def mte_oracle(pred, gt):
    p, t = pred.positions.shape[:2]
    errs = sorted(sample_error(pred, gt, i, j) for i in range(p) for j in range(t))
    n = len(errs)
    mid = n // 2
    return errs[mid] if n % 2 == 1 else 0.5 * (errs[mid - 1] + errs[mid])


def delta_oracle(pred, gt):
    p, t = pred.positions.shape[:2]
    total = p * t
    acc = 0.0
    for th in (0.01, 0.02, 0.04, 0.08, 0.16):
        count = sum(
            1 for i in range(p) for j in range(t) if sample_error(pred, gt, i, j) < th
        )
        acc += count / total
    return acc / 5.0


def survival_oracle(pred, gt, threshold=0.5):
    p, t = pred.positions.shape[:2]
    acc = 0.0
    for j in range(t):
        count = sum(1 for i in range(p) if sample_error(pred, gt, i, j) < threshold)
        acc += count / p
    return acc / t


def make_pair(rng, p=6, t=5, scale=0.2):
    times = np.linspace(0, 1, t)
    gt = TrajectorySet(positions=rng.normal(size=(p, t, 3)), times=times)
    pred = TrajectorySet(
        positions=gt.positions + rng.normal(scale=scale, size=(p, t, 3)), times=times
    )
    return pred, gt


def tiny_model(rng, n=12):
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    gs = GaussianSet(
        positions=rng.uniform(0.1, 0.9, size=(n, 3)),
        rot_quats=quats,
        log_scales=np.full((n, 3), -3.0),
        opacity_logits=np.full(n, 2.0),
        colors=rng.uniform(0, 1, size=(n, 3)),
        mask_logits=np.full(n, 3.0),
    )
    cfg = FieldConfig(base_resolution=(4, 4), levels=(1, 2), feature_size=4, hidden_width=8)
    fld = DeformationField(np.array([[0.0, 0, 0], [1, 1, 1.0]]), cfg, rng)
    return gs, fld


def randomize_field(fld, rng):
    fld.plane_store[:] = rng.uniform(0.8, 1.2, size=fld.plane_store.shape)
    fld.mlp["w_pos"] = rng.normal(scale=0.1, size=fld.mlp["w_pos"].shape)
    fld.mlp["b_pos"] = rng.normal(scale=0.05, size=3)


class TestMetrics:
    def test_identical_trajectories(self):
        pred, gt = make_pair(np.random.default_rng(0), scale=0.0)
        assert tv.compute_mte(pred, gt) == 0.0
        assert tv.compute_delta_avg(pred, gt) == 1.0
        assert tv.compute_survival(pred, gt) == 1.0

    def test_mte_median_of_three(self):
        times = np.linspace(0, 1, 3)
        gt = TrajectorySet(positions=np.zeros((1, 3, 3)), times=times)
        pred_pos = np.zeros((1, 3, 3))
        pred_pos[0, :, 0] = [0.001, 0.002, 0.003]  # 1, 2, 3 mm
        pred = TrajectorySet(positions=pred_pos, times=times)
        assert tv.compute_mte(pred, gt) == pytest.approx(0.002)

    def test_delta_avg_at_five_centimeters(self):
        times = np.linspace(0, 1, 4)
        gt = TrajectorySet(positions=np.zeros((3, 4, 3)), times=times)
        pred_pos = np.zeros((3, 4, 3))
        pred_pos[:, :, 1] = 0.05
        pred = TrajectorySet(positions=pred_pos, times=times)
        assert tv.compute_delta_avg(pred, gt) == pytest.approx(0.4)

    def test_delta_avg_all_errors_one_meter(self):
        times = np.linspace(0, 1, 2)
        gt = TrajectorySet(positions=np.zeros((2, 2, 3)), times=times)
        pred = TrajectorySet(positions=np.ones((2, 2, 3)), times=times)
        assert tv.compute_delta_avg(pred, gt) == 0.0

    def test_survival_half_points_offset(self):
        times = np.linspace(0, 1, 3)
        gt = TrajectorySet(positions=np.zeros((4, 3, 3)), times=times)
        pred_pos = np.zeros((4, 3, 3))
        pred_pos[:2, :, 0] = 1.0
        pred = TrajectorySet(positions=pred_pos, times=times)
        assert tv.compute_survival(pred, gt) == pytest.approx(0.5)

    def test_survival_strictly_below_threshold(self):
        times = np.linspace(0, 1, 2)
        gt = TrajectorySet(positions=np.zeros((2, 2, 3)), times=times)
        pred_pos = np.zeros((2, 2, 3))
        pred_pos[:, :, 2] = 0.49
        pred = TrajectorySet(positions=pred_pos, times=times)
        assert tv.compute_survival(pred, gt) == 1.0
        pred_pos[:, :, 2] = 0.5
        assert tv.compute_survival(
            TrajectorySet(positions=pred_pos, times=times), gt
        ) == 0.0

    def test_match_oracles_on_random_pairs(self):
        rng = np.random.default_rng(42)
        for i in range(100):
            pred, gt = make_pair(rng, p=int(rng.integers(2, 7)),
                                 t=int(rng.integers(2, 6)),
                                 scale=float(rng.uniform(0.001, 0.3)))
            assert tv.compute_mte(pred, gt) == mte_oracle(pred, gt)
            assert tv.compute_delta_avg(pred, gt) == delta_oracle(pred, gt)
            assert tv.compute_survival(pred, gt) == survival_oracle(pred, gt)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(7)
        pred, gt = make_pair(rng)
        r = Rotation.random(random_state=1).as_matrix()
        t = rng.normal(size=3)
        pred2 = TrajectorySet(positions=pred.positions @ r.T + t, times=pred.times)
        gt2 = TrajectorySet(positions=gt.positions @ r.T + t, times=gt.times)
        assert tv.compute_mte(pred2, gt2) == pytest.approx(tv.compute_mte(pred, gt), abs=1e-12)
        assert tv.compute_delta_avg(pred2, gt2) == pytest.approx(
            tv.compute_delta_avg(pred, gt), abs=1e-12
        )
        assert tv.compute_survival(pred2, gt2) == pytest.approx(
            tv.compute_survival(pred, gt), abs=1e-12
        )

    def test_shape_mismatch(self):
        times = np.linspace(0, 1, 2)
        a = TrajectorySet(positions=np.zeros((2, 2, 3)), times=times)
        b = TrajectorySet(positions=np.zeros((3, 2, 3)), times=times)
        with pytest.raises(ShapeMismatchError):
            tv.compute_mte(a, b)


class TestTrackPoint:
    def test_query_on_center_follows_gaussian(self):
        rng = np.random.default_rng(3)
        gs, fld = tiny_model(rng)
        randomize_field(fld, rng)
        dynamic = np.ones(gs.count, dtype=bool)
        from splatflow.field import deform

        state0, _ = deform(gs, 0.0, fld, dynamic=dynamic)
        target = 4
        times = np.linspace(0, 1, 5)
        query = tv.TrackQuery(points=state0.positions[target : target + 1],
                              t0=0.0, eval_times=times)
        traj = tv.track_point(query, gs, fld, dynamic)
        for j, t in enumerate(times):
            st, _ = deform(gs, float(t), fld, dynamic=dynamic)
            np.testing.assert_allclose(traj.positions[0, j], st.positions[target],
                                       atol=1e-9)

    def test_eval_at_t0_returns_inputs_exactly(self):
        rng = np.random.default_rng(4)
        gs, fld = tiny_model(rng)
        randomize_field(fld, rng)
        dynamic = np.ones(gs.count, dtype=bool)
        pts = rng.uniform(0.2, 0.8, size=(5, 3))
        query = tv.TrackQuery(points=pts, t0=0.5, eval_times=np.array([0.5]))
        traj = tv.track_point(query, gs, fld, dynamic)
        np.testing.assert_array_equal(traj.positions[:, 0], pts)

    def test_identity_field_gives_constant_trajectories(self):
        rng = np.random.default_rng(5)
        gs, fld = tiny_model(rng)  # zero heads: identity deformation
        dynamic = np.ones(gs.count, dtype=bool)
        pts = rng.uniform(0.2, 0.8, size=(4, 3))
        traj = tv.track_point(
            tv.TrackQuery(points=pts, t0=0.0, eval_times=np.linspace(0, 1, 6)),
            gs, fld, dynamic,
        )
        assert np.all(traj.positions == traj.positions[:, :1])

    def test_translation_linearity(self):
        rng = np.random.default_rng(6)
        gs, fld = tiny_model(rng)
        randomize_field(fld, rng)
        dynamic = np.ones(gs.count, dtype=bool)
        pts = rng.uniform(0.2, 0.8, size=(5, 3))
        times = np.linspace(0, 1, 4)
        base = tv.track_point(tv.TrackQuery(pts, 0.0, times), gs, fld, dynamic)
        # translate every Gaussian trajectory by a constant: shift the
        # canonical positions and the field domain together
        shift = np.array([0.05, -0.02, 0.03])
        gs2 = gs.copy()
        gs2.positions += shift
        fld.bbox = fld.bbox + shift
        moved = tv.track_point(tv.TrackQuery(pts + shift, 0.0, times), gs2, fld, dynamic)
        np.testing.assert_allclose(
            moved.positions, base.positions + shift, atol=1e-9
        )

    def test_no_dynamic_gaussians_raises(self):
        rng = np.random.default_rng(7)
        gs, fld = tiny_model(rng)
        with pytest.raises(DegenerateModelError):
            tv.track_point(
                tv.TrackQuery(np.zeros((1, 3)), 0.0, np.array([0.0, 1.0])),
                gs, fld, np.zeros(gs.count, dtype=bool),
            )

    def test_self_report_is_perfect(self):
        rng = np.random.default_rng(8)
        pred, _ = make_pair(rng)
        rep = tv.make_report(pred, pred)
        assert rep.mte_m == 0.0 and rep.delta_avg == 1.0 and rep.survival == 1.0


class TestReportIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        pred, gt = make_pair(rng)
        rep = tv.make_report(pred, gt)
        p = tmp_path / "report.json"
        tv.save_report(p, rep)
        loaded = tv.load_report(p)
        assert loaded.to_dict() == rep.to_dict()
        keys = set(rep.to_dict())
        assert keys == {"mte_m", "delta_avg", "survival", "n_points", "n_steps"}


class TestSampling:
    def test_seeded_sampler_deterministic(self):
        a = tv.sample_point_indices(100, 10, seed=3)
        b = tv.sample_point_indices(100, 10, seed=3)
        np.testing.assert_array_equal(a, b)
        assert len(set(a.tolist())) == 10

    def test_sample_larger_than_population(self):
        np.testing.assert_array_equal(tv.sample_point_indices(5, 10, 0), np.arange(5))


def test_psnr_basics():
    img = np.zeros((4, 4, 3))
    ref = np.zeros((4, 4, 3))
    assert tv.psnr(img, ref) == float("inf")
    ref2 = ref.copy()
    ref2[:] = 0.1
    assert tv.psnr(img, ref2) == pytest.approx(20.0, abs=1e-9)

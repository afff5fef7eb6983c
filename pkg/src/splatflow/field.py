"""Spatio-temporal deformation field: six multi-resolution feature planes
fused by elementwise product per level, feeding an MLP with position,
rotation, and shadow heads. Forward passes record a tape; the backward pass
replays it for exact reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _field_kernels
from .core import GaussianSet, normalize_quats, normalize_quats_grad, sigmoid
from .errors import InvalidParameterError, MissingTapeError

# axis pairs over (x, y, z, t), fixed plane order within each level
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))

MLP_PARAM_NAMES = (
    "w1", "b1", "w2", "b2",
    "w_pos", "b_pos", "w_rot", "b_rot", "w_shadow", "b_shadow",
)


@dataclass(frozen=True)
class FieldConfig:
    base_resolution: tuple = (64, 64)
    levels: tuple = (1, 2, 4, 8)
    feature_size: int = 32          # h, per-plane feature length
    hidden_width: int = 128
    # positive so fine training starts from (nearly) unshadowed colors
    shadow_logit_init: float = 6.0

    @property
    def encoding_size(self) -> int:
        return self.feature_size * len(self.levels)


class DeformationField:
    """Plane store + MLP weights + scene bounding box."""

    def __init__(self, bbox: np.ndarray, config: FieldConfig, rng: np.random.Generator):
        self.config = config
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        if np.any(self.bbox[1] <= self.bbox[0]):
            raise InvalidParameterError("bbox max must exceed bbox min on every axis")

        h = config.feature_size
        ni, nj = config.base_resolution
        if ni < 2 or nj < 2:
            raise InvalidParameterError("base resolution must be at least 2")
        offsets, ris, rjs, axis_i, axis_j = [], [], [], [], []
        cursor = 0
        for level in config.levels:
            for (ai, aj) in PLANE_AXES:
                ri, rj = level * ni, level * nj
                offsets.append(cursor)
                ris.append(ri)
                rjs.append(rj)
                axis_i.append(ai)
                axis_j.append(aj)
                cursor += ri * rj * h
        self._p_off = np.array(offsets, dtype=np.int64)
        self._p_ri = np.array(ris, dtype=np.int64)
        self._p_rj = np.array(rjs, dtype=np.int64)
        self._p_axi = np.array(axis_i, dtype=np.int64)
        self._p_axj = np.array(axis_j, dtype=np.int64)
        self.plane_store = np.ones(cursor, dtype=np.float64)  # product fusion stays non-degenerate

        enc = config.encoding_size
        w = config.hidden_width
        self.mlp = {
            "w1": rng.normal(0.0, 1.0 / np.sqrt(enc), size=(enc, w)),
            "b1": np.zeros(w),
            "w2": rng.normal(0.0, 1.0 / np.sqrt(w), size=(w, w)),
            "b2": np.zeros(w),
            "w_pos": np.zeros((w, 3)),
            "b_pos": np.zeros(3),
            "w_rot": np.zeros((w, 4)),
            "b_rot": np.zeros(4),
            "w_shadow": np.zeros((w, 1)),
            "b_shadow": np.full(1, config.shadow_logit_init),
        }

    # -- plane bookkeeping ---------------------------------------------------

    @property
    def num_planes(self) -> int:
        return len(self._p_off)

    @property
    def num_nodes(self) -> int:
        return self.plane_store.size // self.config.feature_size

    def plane(self, level_idx: int, pair_idx: int) -> np.ndarray:
        """View of one feature plane, shaped (ri, rj, h)."""
        pl = level_idx * 6 + pair_idx
        h = self.config.feature_size
        ri, rj = self._p_ri[pl], self._p_rj[pl]
        off = self._p_off[pl]
        return self.plane_store[off : off + ri * rj * h].reshape(ri, rj, h)

    def parameters(self):
        """(name, array) pairs in checkpoint order."""
        yield "planes", self.plane_store
        for name in MLP_PARAM_NAMES:
            yield f"mlp.{name}", self.mlp[name]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.plane_store)):
            raise InvalidParameterError("plane store contains non-finite values")
        for name in MLP_PARAM_NAMES:
            if not np.all(np.isfinite(self.mlp[name])):
                raise InvalidParameterError(f"mlp weight {name} contains non-finite values")

    # -- queries ---------------------------------------------------------------

    def normalized_coords(self, xyz: np.ndarray, t: float):
        """Map world positions + time into [0,1]^4, clamping out-of-range axes."""
        xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        raw = np.empty((xyz.shape[0], 4), dtype=np.float64)
        extent = self.bbox[1] - self.bbox[0]
        raw[:, :3] = (xyz - self.bbox[0]) / extent
        raw[:, 3] = t
        clamped = ((raw < 0.0) | (raw > 1.0)).astype(np.uint8)
        return np.clip(raw, 0.0, 1.0), clamped, extent

    def encode_batch(self, xyz: np.ndarray, t: float):
        coords, clamped, extent = self.normalized_coords(xyz, t)
        feat, vecs, i0s, j0s, fis, fjs = _field_kernels.encode_forward(
            coords, self.plane_store, self._p_off, self._p_ri, self._p_rj,
            self._p_axi, self._p_axj, len(self.config.levels), self.config.feature_size,
        )
        tape = {
            "coords": coords, "clamped": clamped, "extent": extent,
            "vecs": vecs, "i0s": i0s, "j0s": j0s, "fis": fis, "fjs": fjs,
        }
        return feat, tape


def encode(xyz: np.ndarray, t: float, field: DeformationField) -> np.ndarray:
    """Feature vector of length h * |levels| for one (x, y, z, t) query."""
    feat, _ = field.encode_batch(np.asarray(xyz, dtype=np.float64).reshape(1, 3), float(t))
    return feat[0]


# ---------------------------------------------------------------------------
# deformation forward / backward
# ---------------------------------------------------------------------------


@dataclass
class DeformedState:
    positions: np.ndarray  # (N, 3)
    rot_quats: np.ndarray  # (N, 4) unit
    shadows: np.ndarray    # (N,) in [0, 1]


@dataclass
class FieldTape:
    field: DeformationField
    gaussians: GaussianSet
    t: float
    dyn_idx: np.ndarray          # indices of deformed Gaussians
    enc_tape: dict
    feat: np.ndarray             # (n_dyn, enc)
    a1: np.ndarray
    a2: np.ndarray
    raw_rot: np.ndarray          # canonical + delta, before normalization
    shadows: np.ndarray          # (n_dyn,)


@dataclass
class FieldGradients:
    positions: np.ndarray        # (N, 3) canonical position grads
    rot_quats: np.ndarray        # (N, 4) canonical quaternion grads
    mlp: dict                    # name -> grad array
    planes: "PlaneGradAccumulator"


class PlaneGradAccumulator:
    """Dense plane-gradient buffer with dirty-node tracking.

    Reused across backward calls within one training step; `consume_*`
    helpers hand the touched rows to the optimizer and reset the state.
    """

    def __init__(self, field: DeformationField):
        self.field = field
        self.grad = np.zeros_like(field.plane_store)
        self.dirty = np.zeros(field.num_nodes, dtype=np.uint8)
        self.touched = np.zeros(field.num_nodes, dtype=np.int64)
        self.n_touched = 0

    def dense(self) -> np.ndarray:
        """Copy of the full gradient buffer (tests / small fields only)."""
        return self.grad.copy()

    def reset(self) -> None:
        h = self.field.config.feature_size
        for k in range(self.n_touched):
            node = self.touched[k]
            self.grad[node * h : (node + 1) * h] = 0.0
        self.dirty[self.touched[: self.n_touched]] = 0
        self.n_touched = 0


def _mlp_forward(field: DeformationField, feat: np.ndarray):
    m = field.mlp
    a1 = np.tanh(feat @ m["w1"] + m["b1"])
    a2 = np.tanh(a1 @ m["w2"] + m["b2"])
    d_pos = a2 @ m["w_pos"] + m["b_pos"]
    d_rot = a2 @ m["w_rot"] + m["b_rot"]
    s_logit = a2 @ m["w_shadow"] + m["b_shadow"]
    return a1, a2, d_pos, d_rot, s_logit[:, 0]


def deform(
    gaussians: GaussianSet,
    t: float,
    field: DeformationField,
    dynamic: np.ndarray | None = None,
) -> tuple[DeformedState, FieldTape]:
    """Deform dynamic Gaussians to time t; static ones pass through with shadow 1.

    position' = position + MLP position head; rotation' = normalize(quat +
    MLP rotation head); shadow = sigmoid(shadow head). Opacity, scale, and
    color are untouched here.
    """
    n = gaussians.count
    if dynamic is None:
        dynamic = np.ones(n, dtype=bool)
    dyn_idx = np.flatnonzero(dynamic)

    positions = gaussians.positions.copy()
    rot_quats = gaussians.rot_quats.copy()
    shadows = np.ones(n, dtype=np.float64)

    if dyn_idx.size:
        feat, enc_tape = field.encode_batch(gaussians.positions[dyn_idx], float(t))
        a1, a2, d_pos, d_rot, s_logit = _mlp_forward(field, feat)
        if not (np.all(np.isfinite(d_pos)) and np.all(np.isfinite(d_rot))
                and np.all(np.isfinite(s_logit))):
            raise InvalidParameterError("deformation produced non-finite outputs")
        positions[dyn_idx] += d_pos
        raw_rot = gaussians.rot_quats[dyn_idx] + d_rot
        rot_quats[dyn_idx] = normalize_quats(raw_rot)
        sh = sigmoid(s_logit)
        shadows[dyn_idx] = sh
    else:
        feat = np.zeros((0, field.config.encoding_size))
        enc_tape = None
        a1 = a2 = np.zeros((0, field.config.hidden_width))
        raw_rot = np.zeros((0, 4))
        sh = np.zeros(0)

    tape = FieldTape(
        field=field, gaussians=gaussians, t=float(t), dyn_idx=dyn_idx,
        enc_tape=enc_tape, feat=feat, a1=a1, a2=a2, raw_rot=raw_rot, shadows=sh,
    )
    return DeformedState(positions=positions, rot_quats=rot_quats, shadows=shadows), tape


def field_backward(
    tape: FieldTape,
    d_positions: np.ndarray,
    d_rot_quats: np.ndarray,
    d_shadows: np.ndarray,
    plane_accum: PlaneGradAccumulator | None = None,
) -> FieldGradients:
    """Exact gradients of deform() w.r.t. planes, MLP weights, and canonical state."""
    if tape is None or tape.enc_tape is None and tape.dyn_idx.size:
        raise MissingTapeError("no recorded forward pass for this backward call")
    fld = tape.field
    n = tape.gaussians.count
    if d_positions.shape != (n, 3) or d_rot_quats.shape != (n, 4) or d_shadows.shape != (n,):
        raise InvalidParameterError("upstream gradient shapes do not match the Gaussian set")
    if plane_accum is None:
        plane_accum = PlaneGradAccumulator(fld)

    # identity paths (both static pass-through and the additive residual)
    d_pos_c = d_positions.copy()
    d_rot_c = d_rot_quats.copy()
    mlp_grads = {name: np.zeros_like(arr) for name, arr in fld.mlp.items()}

    dyn = tape.dyn_idx
    if dyn.size:
        m = fld.mlp
        # rotation: through normalize(raw)
        d_raw = normalize_quats_grad(tape.raw_rot, d_rot_quats[dyn])
        d_rot_c[dyn] = d_raw
        # shadow: through sigmoid
        d_slogit = d_shadows[dyn] * tape.shadows * (1.0 - tape.shadows)
        d_dpos = d_positions[dyn]

        # heads
        d_a2 = d_dpos @ m["w_pos"].T + d_raw @ m["w_rot"].T + d_slogit[:, None] @ m["w_shadow"].T
        mlp_grads["w_pos"] = tape.a2.T @ d_dpos
        mlp_grads["b_pos"] = d_dpos.sum(axis=0)
        mlp_grads["w_rot"] = tape.a2.T @ d_raw
        mlp_grads["b_rot"] = d_raw.sum(axis=0)
        mlp_grads["w_shadow"] = tape.a2.T @ d_slogit[:, None]
        mlp_grads["b_shadow"] = np.array([d_slogit.sum()])

        # trunk
        d_z2 = d_a2 * (1.0 - tape.a2 * tape.a2)
        mlp_grads["w2"] = tape.a1.T @ d_z2
        mlp_grads["b2"] = d_z2.sum(axis=0)
        d_a1 = d_z2 @ m["w2"].T
        d_z1 = d_a1 * (1.0 - tape.a1 * tape.a1)
        mlp_grads["w1"] = tape.feat.T @ d_z1
        mlp_grads["b1"] = d_z1.sum(axis=0)
        d_feat = d_z1 @ m["w1"].T

        # encoding: plane entries + query coordinates
        et = tape.enc_tape
        d_coords, plane_accum.n_touched = _field_kernels.encode_backward(
            np.ascontiguousarray(d_feat),
            et["clamped"],
            fld.plane_store,
            et["vecs"], et["i0s"], et["j0s"], et["fis"], et["fjs"],
            fld._p_off, fld._p_ri, fld._p_rj, fld._p_axi, fld._p_axj,
            len(fld.config.levels), fld.config.feature_size,
            plane_accum.grad, plane_accum.dirty, plane_accum.touched,
            plane_accum.n_touched,
        )
        d_pos_c[dyn] += d_coords[:, :3] / et["extent"]

    return FieldGradients(
        positions=d_pos_c, rot_quats=d_rot_c, mlp=mlp_grads, planes=plane_accum
    )


def bbox_from_points(points: np.ndarray, expand: float = 0.10) -> np.ndarray:
    """Axis-aligned bounds of a point set, expanded by a fraction per side."""
    points = np.asarray(points, dtype=np.float64)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    return np.stack([lo - expand * span, hi + expand * span])

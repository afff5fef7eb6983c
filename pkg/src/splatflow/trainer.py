"""End-to-end optimization: photometric, mask, isometry, and momentum losses,
coarse/fine schedule, pruning, dynamic-Gaussian selection, optimizer state.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import _field_kernels
from .core import (
    GaussianSet,
    covariance_from_rs,
    covariance_from_rs_backward,
    inverse_sigmoid,
    normalize_quats,
    project_gaussians,
    project_gaussians_backward,
    sigmoid,
)
from .errors import (
    DegenerateSceneError,
    DivergenceError,
    InvalidConfigError,
    InvalidParameterError,
    ShapeMismatchError,
)
from .field import (
    DeformationField,
    FieldConfig,
    PlaneGradAccumulator,
    bbox_from_points,
    deform,
    field_backward,
)
from .rasterizer import SplatInputs, rasterize, rasterize_backward

LOGIT_CLAMP = 15.0        # keeps sigmoid outputs strictly inside (0, 1) in f64
LOG_SCALE_MIN = -12.0
LOG_SCALE_MAX = 1.0


@dataclass
class TrainConfig:
    iterations: int = 30_000
    coarse_iterations: int = 3_000
    prune_interval: int = 100
    lambda_w: float = 2000.0          # inverse square meters
    lambda_momentum: float = 0.03
    lambda_iso: float = 0.3
    knn_k: int = 20
    mask_loss_weight: float = 0.1
    dynamic_threshold: float = 0.5
    prune_opacity_threshold: float = 0.005
    seed: int = 0
    init_points: int = 8000
    lr_positions: float = 1.6e-4
    lr_rotations: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacities: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_masks: float = 2.5e-3
    lr_planes: float = 1.6e-3
    lr_mlp: float = 1.6e-4
    dssim_weight: float = 0.0         # stub; L1 is the photometric term
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def validate(self) -> None:
        if min(self.lambda_w, self.lambda_momentum, self.lambda_iso) < 0:
            raise InvalidConfigError("loss weights must be non-negative")
        if self.knn_k < 1:
            raise InvalidConfigError("knn_k must be >= 1")
        for name in ("dynamic_threshold", "prune_opacity_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise InvalidConfigError(f"{name} must lie in (0, 1)")
        if self.iterations < 1 or self.coarse_iterations < 0:
            raise InvalidConfigError("iteration counts must be positive")
        if self.dssim_weight != 0.0:
            raise InvalidConfigError("D-SSIM is a stub; only dssim_weight=0 is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field"]["base_resolution"] = list(d["field"]["base_resolution"])
        d["field"]["levels"] = list(d["field"]["levels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        fc = d.pop("field", {})
        fc = dict(fc)
        for key in ("base_resolution", "levels"):
            if key in fc:
                fc[key] = tuple(fc[key])
        return cls(field=FieldConfig(**fc), **d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def iso_loss(positions_t0, positions_t, knn, lambda_w, k) -> float:
    """Local isometry penalty against the t=0 configuration.

    (1 / (k |P|)) * sum_i sum_{j in knn_i} w_ij * | |d0_ij| - |dt_ij| |
    with w_ij = exp(-lambda_w |d0_ij|^2).
    """
    val, _, _ = _iso_loss_impl(positions_t0, positions_t, knn, lambda_w, k, want_grads=False)
    return val


def iso_loss_backward(positions_t0, positions_t, knn, lambda_w, k):
    """(loss, d_positions_t0, d_positions_t); exact, including through w."""
    return _iso_loss_impl(positions_t0, positions_t, knn, lambda_w, k, want_grads=True)


def _iso_loss_impl(positions_t0, positions_t, knn, lambda_w, k, want_grads):
    p0 = np.asarray(positions_t0, dtype=np.float64)
    pt = np.asarray(positions_t, dtype=np.float64)
    n = p0.shape[0]
    if k >= n:
        raise InvalidConfigError(f"knn size k={k} must be smaller than the point count {n}")
    if pt.shape != p0.shape or knn.shape != (n, k):
        raise ShapeMismatchError("iso_loss inputs have inconsistent shapes")

    diff0 = p0[knn] - p0[:, None, :]          # (n, k, 3)
    difft = pt[knn] - pt[:, None, :]
    d0 = np.linalg.norm(diff0, axis=2)
    dt = np.linalg.norm(difft, axis=2)
    w = np.exp(-lambda_w * d0 * d0)
    r = d0 - dt
    scale = 1.0 / (k * n)
    loss = float(scale * np.sum(w * np.abs(r)))
    if not want_grads:
        return loss, None, None

    sgn = np.sign(r)
    dl_d0 = scale * (w * sgn + np.abs(r) * w * (-2.0 * lambda_w * d0))
    dl_dt = scale * (-w * sgn)

    u0 = diff0 / np.maximum(d0, 1e-12)[:, :, None]
    ut = difft / np.maximum(dt, 1e-12)[:, :, None]
    g0 = np.zeros_like(p0)
    gt = np.zeros_like(pt)
    contrib0 = dl_d0[:, :, None] * u0
    contribt = dl_dt[:, :, None] * ut
    np.add.at(g0, knn.reshape(-1), contrib0.reshape(-1, 3))
    g0 -= contrib0.sum(axis=1)
    np.add.at(gt, knn.reshape(-1), contribt.reshape(-1, 3))
    gt -= contribt.sum(axis=1)
    return loss, g0, gt


def momentum_loss(prev, cur, nxt) -> float:
    """Mean L1 norm of the discrete second difference over Gaussians."""
    val, _ = _momentum_impl(prev, cur, nxt, want_grads=False)
    return val


def momentum_loss_backward(prev, cur, nxt):
    """(loss, d_prev, d_cur, d_next)."""
    val, grads = _momentum_impl(prev, cur, nxt, want_grads=True)
    return (val, *grads)


def _momentum_impl(prev, cur, nxt, want_grads):
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != cur.shape or cur.shape != nxt.shape:
        raise ShapeMismatchError("momentum_loss requires three equally shaped states")
    sd = nxt + prev - 2.0 * cur
    n = max(prev.shape[0], 1)
    loss = float(np.sum(np.abs(sd)) / n)
    if not want_grads:
        return loss, None
    g = np.sign(sd) / n
    return loss, (g.copy(), -2.0 * g, g.copy())


def mask_loss(rendered, target) -> float:
    """Mean absolute error between rendered and target masks."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatchError("mask shapes differ")
    return float(np.mean(np.abs(rendered - target)))


def photometric_l1(rendered, target) -> float:
    if rendered.shape != target.shape:
        raise ShapeMismatchError("image shapes differ")
    return float(np.mean(np.abs(rendered - target)))


def select_dynamic(gaussians: GaussianSet, threshold: float) -> np.ndarray:
    """Dynamic flags: sigmoid(mask_logit) strictly above threshold."""
    return gaussians.mask_values() > threshold


# ---------------------------------------------------------------------------
# k-nearest neighbors (exact, chunked)
# ---------------------------------------------------------------------------


def knn_indices(points: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Indices of the k nearest neighbors (self excluded) for each point."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k >= n:
        raise InvalidConfigError(f"knn size k={k} must be smaller than the point count {n}")
    out = np.empty((n, k), dtype=np.int64)
    sq = np.sum(pts * pts, axis=1)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (pts[start:stop] @ pts.T)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        part = np.argpartition(d2, k, axis=1)[:, :k]
        rows = np.arange(stop - start)[:, None]
        ordering = np.argsort(d2[rows, part], axis=1, kind="stable")
        out[start:stop] = part[rows, ordering]
    return out


def mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Per-point mean distance to the k nearest neighbors."""
    idx = knn_indices(points, k)
    d = np.linalg.norm(points[idx] - points[:, None, :], axis=2)
    return d.mean(axis=1)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive moment estimation with one state slot per named parameter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        if self.m[name].shape != param.shape:
            raise ShapeMismatchError(f"optimizer state for {name} does not match parameter")
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mh = m / (1 - self.beta1**t)
        vh = v / (1 - self.beta2**t)
        param -= lr * mh / (np.sqrt(vh) + self.eps)

    def prune(self, name: str, keep: np.ndarray) -> None:
        if name in self.m:
            self.m[name] = self.m[name][keep].copy()
            self.v[name] = self.v[name][keep].copy()


class PlaneAdam:
    """Lazy Adam over plane nodes: moments advance only on touched rows."""

    def __init__(self, field: DeformationField, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros_like(field.plane_store)
        self.v = np.zeros_like(field.plane_store)
        self.steps = np.zeros(field.num_nodes, dtype=np.int64)

    def step(self, field: DeformationField, accum: PlaneGradAccumulator) -> None:
        _field_kernels.lazy_adam_update(
            field.plane_store, accum.grad, self.m, self.v,
            accum.touched, accum.n_touched, self.steps,
            self.lr, self.beta1, self.beta2, self.eps,
            field.config.feature_size,
        )
        accum.dirty[accum.touched[: accum.n_touched]] = 0
        accum.n_touched = 0


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_gaussians(bbox: np.ndarray, n_points: int, rng: np.random.Generator) -> GaussianSet:
    """Random point cloud inside the scene bbox; scales from mean 3-NN distance."""
    bbox = np.asarray(bbox, dtype=np.float64)
    positions = rng.uniform(bbox[0], bbox[1], size=(n_points, 3))
    dists = mean_knn_distance(positions, k=3)
    quats = np.zeros((n_points, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        positions=positions,
        rot_quats=quats,
        log_scales=np.log(np.maximum(dists, 1e-6))[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n_points, inverse_sigmoid(0.1)),
        colors=np.full((n_points, 3), 0.5),
        mask_logits=np.zeros(n_points),
    )


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def render_view(gaussians: GaussianSet, camera, field=None, dynamic=None, t=None,
                background=None):
    """Render a model from one camera.

    With `t`/`field` omitted the canonical set is rendered directly (the
    coarse-phase bypass); otherwise dynamic Gaussians are deformed to time t
    and their colors are scaled by the inferred shadow.
    """
    background = np.zeros(3) if background is None else background
    if field is not None and t is not None:
        state, _ = deform(gaussians, float(t), field, dynamic=dynamic)
        positions, rot_quats = state.positions, state.rot_quats
        colors = gaussians.colors * state.shadows[:, None]
    else:
        positions, rot_quats = gaussians.positions, gaussians.rot_quats
        colors = gaussians.colors
    sigma = covariance_from_rs(rot_quats, gaussians.log_scales)
    proj = project_gaussians(positions, sigma, camera)
    v = proj.valid
    inputs = SplatInputs(
        means2d=proj.mean2d[v], cov2d=proj.cov2d[v], depths=proj.depth[v],
        colors=colors[v], opacities=gaussians.opacities()[v],
        mask_values=gaussians.mask_values()[v],
        width=camera.width, height=camera.height, background=background,
    )
    return rasterize(inputs)


@dataclass
class StepGradients:
    """Gradients for one training step, in canonical parameter space."""

    positions: np.ndarray
    rot_quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mask_logits: np.ndarray
    mlp: dict | None            # None during the coarse phase
    planes: PlaneGradAccumulator | None


class Trainer:
    """Owns all mutable training state; one instance per run."""

    def __init__(self, dataset, config: TrainConfig, log_path=None):
        config.validate()
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self._start_time = time.perf_counter()

        self.gaussians = init_gaussians(dataset.bbox, config.init_points, self.rng)
        self.field = DeformationField(
            bbox_from_points(self.gaussians.positions), config.field, self.rng
        )
        self.optimizer = Adam()
        self.plane_optimizer = PlaneAdam(self.field, config.lr_planes)
        self.plane_accum = PlaneGradAccumulator(self.field)

        self.dynamic = np.zeros(self.gaussians.count, dtype=bool)
        self.knn = None  # (n_dyn, k), indices into the dynamic subset
        self._fine_started = False

        self.train_frames = list(dataset.train_frames())
        if not self.train_frames:
            raise DegenerateSceneError("dataset has no training frames")
        self.coarse_frames = [
            i for i, f in enumerate(self.train_frames) if f.time_index == 0
        ]
        if not self.coarse_frames:
            raise DegenerateSceneError("dataset has no frames at the first timestep")
        self._targets = {}
        self._log_file = open(log_path, "w") if log_path else None

    def close(self) -> None:
        if self._log_file:
            self._log_file.close()
            self._log_file = None

    # -- data access ---------------------------------------------------------

    def _target(self, frame_idx: int):
        if frame_idx not in self._targets:
            frame = self.train_frames[frame_idx]
            image = self.dataset.load_image(frame)
            mask = self.dataset.load_mask(frame)
            self._targets[frame_idx] = (image, mask)
        return self._targets[frame_idx]

    # -- shared forward helpers -----------------------------------------------

    def _splat(self, camera, positions, rot_quats, colors, opacities, mask_values):
        """Project + rasterize; returns (inputs, output, valid, sigma, proj)."""
        sigma = covariance_from_rs(rot_quats, self.gaussians.log_scales)
        proj = project_gaussians(positions, sigma, camera)
        valid = proj.valid
        inputs = SplatInputs(
            means2d=proj.mean2d[valid],
            cov2d=proj.cov2d[valid],
            depths=proj.depth[valid],
            colors=colors[valid],
            opacities=opacities[valid],
            mask_values=mask_values[valid],
            width=camera.width,
            height=camera.height,
            background=np.zeros(3),
        )
        return inputs, rasterize(inputs), valid, sigma, proj

    def _render_losses_and_grads(self, camera, image_t, mask_t,
                                 positions, rot_quats, colors, opacities, mask_values):
        """Photometric + mask losses with gradients back to the splat inputs."""
        inputs, out, valid, sigma, proj = self._splat(
            camera, positions, rot_quats, colors, opacities, mask_values
        )
        l_photo = photometric_l1(out.rgb, image_t)
        l_mask = mask_loss(out.mask, mask_t)

        npix = image_t.size
        d_rgb = np.sign(out.rgb - image_t) / npix
        d_mask = (
            self.config.mask_loss_weight * np.sign(out.mask - mask_t) / mask_t.size
        )
        g = rasterize_backward(inputs, out, d_rgb, d_mask)

        n = positions.shape[0]
        d_mean2d = np.zeros((n, 2))
        d_cov2d = np.zeros((n, 2, 2))
        d_colors = np.zeros((n, 3))
        d_opac = np.zeros(n)
        d_maskv = np.zeros(n)
        d_mean2d[valid] = g.means2d
        d_cov2d[valid] = g.cov2d
        d_colors[valid] = g.colors
        d_opac[valid] = g.opacities
        d_maskv[valid] = g.mask_values

        d_pos_w, d_sigma = project_gaussians_backward(proj, sigma, camera, d_mean2d, d_cov2d)
        d_quat_w, d_log_scales = covariance_from_rs_backward(
            rot_quats, self.gaussians.log_scales, d_sigma
        )
        return {
            "photo": l_photo,
            "mask": l_mask,
            "d_pos_w": d_pos_w,
            "d_quat_w": d_quat_w,
            "d_log_scales": d_log_scales,
            "d_colors": d_colors,
            "d_opacity": d_opac,
            "d_maskv": d_maskv,
        }

    # -- coarse phase ----------------------------------------------------------

    def _coarse_step_grads(self, frame_idx: int):
        frame = self.train_frames[frame_idx]
        camera = self.dataset.cameras[frame.camera_id]
        image_t, mask_t = self._target(frame_idx)
        gs = self.gaussians
        r = self._render_losses_and_grads(
            camera, image_t, mask_t,
            gs.positions, gs.rot_quats, gs.colors,
            gs.opacities(), gs.mask_values(),
        )
        opac = gs.opacities()
        maskv = gs.mask_values()
        grads = StepGradients(
            positions=r["d_pos_w"],
            rot_quats=r["d_quat_w"],
            log_scales=r["d_log_scales"],
            opacity_logits=r["d_opacity"] * opac * (1 - opac),
            colors=r["d_colors"],
            mask_logits=r["d_maskv"] * maskv * (1 - maskv),
            mlp=None,
            planes=None,
        )
        losses = {
            "photo": r["photo"], "mask": r["mask"], "iso": 0.0, "momentum": 0.0
        }
        losses["total"] = r["photo"] + self.config.mask_loss_weight * r["mask"]
        return losses, grads

    # -- fine phase -------------------------------------------------------------

    def _momentum_triple(self, ti: int):
        t_count = self.dataset.num_timesteps
        if t_count < 3:
            return None
        if ti == 0:
            return (0, 1, 2)
        if ti == t_count - 1:
            return (t_count - 3, t_count - 2, t_count - 1)
        return (ti - 1, ti, ti + 1)

    def _fine_step_grads(self, frame_idx: int):
        cfg = self.config
        frame = self.train_frames[frame_idx]
        camera = self.dataset.cameras[frame.camera_id]
        image_t, mask_t = self._target(frame_idx)
        gs = self.gaussians
        times = self.dataset.times
        ti = frame.time_index
        t_render = float(times[ti])
        triple = self._momentum_triple(ti)

        needed = {0.0, t_render}
        if triple is not None:
            needed.update(float(times[j]) for j in triple)
        states = {}
        for t in sorted(needed):
            states[t] = deform(gs, t, self.field, dynamic=self.dynamic)

        dyn_idx = np.flatnonzero(self.dynamic)
        state_r, _ = states[t_render]

        shadows = state_r.shadows
        colors_eff = gs.colors * shadows[:, None]
        r = self._render_losses_and_grads(
            camera, image_t, mask_t,
            state_r.positions, state_r.rot_quats, colors_eff,
            gs.opacities(), gs.mask_values(),
        )

        # upstream grads per deformation time
        ups = {
            t: [np.zeros((gs.count, 3)), np.zeros((gs.count, 4)), np.zeros(gs.count)]
            for t in states
        }
        ups[t_render][0] += r["d_pos_w"]
        ups[t_render][1] += r["d_quat_w"]
        # color path: c_eff = shadow * c
        d_colors = r["d_colors"] * shadows[:, None]
        ups[t_render][2] += np.sum(r["d_colors"] * gs.colors, axis=1) * self.dynamic

        # isometry between t=0 and the render time, dynamic subset only
        l_iso = 0.0
        if cfg.lambda_iso > 0 and self.knn is not None and dyn_idx.size:
            p0 = states[0.0][0].positions[dyn_idx]
            pt = states[t_render][0].positions[dyn_idx]
            l_iso, g0, gt = iso_loss_backward(p0, pt, self.knn, cfg.lambda_w, cfg.knn_k)
            ups[0.0][0][dyn_idx] += cfg.lambda_iso * g0
            ups[t_render][0][dyn_idx] += cfg.lambda_iso * gt

        # momentum over the adjacent-timestep triple
        l_mom = 0.0
        if cfg.lambda_momentum > 0 and triple is not None and dyn_idx.size:
            t3 = [float(times[j]) for j in triple]
            p3 = [states[t][0].positions[dyn_idx] for t in t3]
            l_mom, gp, gc, gn = momentum_loss_backward(*p3)
            for t, g in zip(t3, (gp, gc, gn)):
                ups[t][0][dyn_idx] += cfg.lambda_momentum * g

        # backprop through the field at every touched time
        total_pos = np.zeros((gs.count, 3))
        total_quat = np.zeros((gs.count, 4))
        mlp_total = {name: np.zeros_like(arr) for name, arr in self.field.mlp.items()}
        for t, (state, tape) in states.items():
            d_pos, d_quat, d_shadow = ups[t]
            fg = field_backward(tape, d_pos, d_quat, d_shadow, plane_accum=self.plane_accum)
            total_pos += fg.positions
            total_quat += fg.rot_quats
            for name in mlp_total:
                mlp_total[name] += fg.mlp[name]

        opac = gs.opacities()
        maskv = gs.mask_values()
        grads = StepGradients(
            positions=total_pos,
            rot_quats=total_quat,
            log_scales=r["d_log_scales"],
            opacity_logits=r["d_opacity"] * opac * (1 - opac),
            colors=d_colors,
            mask_logits=r["d_maskv"] * maskv * (1 - maskv),
            mlp=mlp_total,
            planes=self.plane_accum,
        )
        losses = {"photo": r["photo"], "mask": r["mask"], "iso": l_iso, "momentum": l_mom}
        losses["total"] = (
            r["photo"]
            + cfg.mask_loss_weight * r["mask"]
            + cfg.lambda_iso * l_iso
            + cfg.lambda_momentum * l_mom
        )
        return losses, grads

    # -- dynamic set / pruning ---------------------------------------------------

    def _refresh_dynamic(self) -> None:
        self.dynamic = select_dynamic(self.gaussians, self.config.dynamic_threshold)
        n_dyn = int(np.count_nonzero(self.dynamic))
        if n_dyn == 0:
            raise DegenerateSceneError("no dynamic Gaussians after mask thresholding")
        if n_dyn <= self.config.knn_k:
            raise InvalidConfigError(
                f"knn size {self.config.knn_k} must be smaller than the dynamic count {n_dyn}"
            )
        self.knn = knn_indices(self.gaussians.positions[self.dynamic], self.config.knn_k)

    def prune(self) -> int:
        """Remove Gaussians whose opacity fell below the prune threshold."""
        keep = self.gaussians.opacities() >= self.config.prune_opacity_threshold
        removed = int(np.count_nonzero(~keep))
        if removed:
            self.gaussians = self.gaussians.select(keep)
            for name in ("positions", "rot_quats", "log_scales",
                         "opacity_logits", "colors", "mask_logits"):
                self.optimizer.prune(name, keep)
            if self.gaussians.count == 0:
                raise DegenerateSceneError("pruning removed every Gaussian")
        self._refresh_dynamic()
        return removed

    # -- optimizer application ------------------------------------------------

    def _apply(self, grads: StepGradients) -> None:
        cfg = self.config
        gs = self.gaussians
        opt = self.optimizer
        opt.step("positions", gs.positions, grads.positions, cfg.lr_positions)
        opt.step("rot_quats", gs.rot_quats, grads.rot_quats, cfg.lr_rotations)
        opt.step("log_scales", gs.log_scales, grads.log_scales, cfg.lr_scales)
        opt.step("opacity_logits", gs.opacity_logits, grads.opacity_logits, cfg.lr_opacities)
        opt.step("colors", gs.colors, grads.colors, cfg.lr_colors)
        opt.step("mask_logits", gs.mask_logits, grads.mask_logits, cfg.lr_masks)
        if grads.mlp is not None:
            for name, arr in self.field.mlp.items():
                opt.step(f"mlp.{name}", arr, grads.mlp[name], cfg.lr_mlp)
        if grads.planes is not None:
            self.plane_optimizer.step(self.field, grads.planes)

        # projections back onto the valid parameter domain
        gs.rot_quats[:] = normalize_quats(gs.rot_quats)
        np.clip(gs.colors, 0.0, 1.0, out=gs.colors)
        np.clip(gs.opacity_logits, -LOGIT_CLAMP, LOGIT_CLAMP, out=gs.opacity_logits)
        np.clip(gs.mask_logits, -LOGIT_CLAMP, LOGIT_CLAMP, out=gs.mask_logits)
        np.clip(gs.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX, out=gs.log_scales)

    # -- the step -----------------------------------------------------------------

    def train_step(self) -> dict:
        cfg = self.config
        i = self.iteration
        if i >= cfg.iterations:
            raise InvalidConfigError("training already finished")
        coarse = i < cfg.coarse_iterations

        if coarse:
            frame_idx = self.coarse_frames[int(self.rng.integers(len(self.coarse_frames)))]
            losses, grads = self._coarse_step_grads(frame_idx)
        else:
            if not self._fine_started:
                self._refresh_dynamic()
                self._fine_started = True
            frame_idx = int(self.rng.integers(len(self.train_frames)))
            losses, grads = self._fine_step_grads(frame_idx)

        for term, value in losses.items():
            if not np.isfinite(value):
                raise DivergenceError(i, term, value)

        self._apply(grads)
        if not coarse and cfg.prune_interval > 0 and i % cfg.prune_interval == 0:
            self.prune()

        self.iteration += 1
        record = {
            "iteration": i,
            "phase": "coarse" if coarse else "fine",
            "total": losses["total"],
            "photo": losses["photo"],
            "mask": losses["mask"],
            "iso": losses["iso"],
            "momentum": losses["momentum"],
            "n_gaussians": self.gaussians.count,
            "wall_time": time.perf_counter() - self._start_time,
        }
        if self._log_file:
            self._log_file.write(json.dumps(record) + "\n")
        return record

    def train(self, progress_every: int = 0) -> dict:
        """Run all remaining iterations; returns the last step record."""
        record = {}
        while self.iteration < self.config.iterations:
            record = self.train_step()
            if progress_every and record["iteration"] % progress_every == 0:
                print(
                    f"iter {record['iteration']:6d} [{record['phase']}] "
                    f"total={record['total']:.5f} photo={record['photo']:.5f} "
                    f"n={record['n_gaussians']}",
                    flush=True,
                )
        self.close()
        return record

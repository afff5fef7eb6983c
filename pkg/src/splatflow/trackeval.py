"""Point tracking through the deformation field and the tracking metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import GaussianSet, TrajectorySet
from .errors import DegenerateModelError, InvalidParameterError, ShapeMismatchError
from .field import DeformationField, deform

DELTA_THRESHOLDS = (0.01, 0.02, 0.04, 0.08, 0.16)  # meters
SURVIVAL_THRESHOLD = 0.5  # meters
DEFAULT_TRACK_KNN = 5


@dataclass
class TrackQuery:
    points: np.ndarray        # (P, 3) world positions at t0
    t0: float
    eval_times: np.ndarray    # strictly increasing, in [0, 1]

    def validate(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
            raise InvalidParameterError("query points must be a finite (P, 3) array")
        times = np.asarray(self.eval_times, dtype=np.float64)
        if times.size == 0 or np.any(times < 0) or np.any(times > 1):
            raise InvalidParameterError("eval_times must lie in [0, 1]")
        if np.any(np.diff(times) <= 0):
            raise InvalidParameterError("eval_times must be strictly increasing")
        if not 0.0 <= self.t0 <= 1.0:
            raise InvalidParameterError("t0 must lie in [0, 1]")


@dataclass
class TrackReport:
    mte_m: float
    delta_avg: float
    survival: float
    n_points: int
    n_steps: int
    per_point_errors: np.ndarray | None = None  # (P, T), not serialized

    def to_dict(self) -> dict:
        return {
            "mte_m": self.mte_m,
            "delta_avg": self.delta_avg,
            "survival": self.survival,
            "n_points": self.n_points,
            "n_steps": self.n_steps,
        }


def track_point(
    query: TrackQuery,
    gaussians: GaussianSet,
    field: DeformationField,
    dynamic: np.ndarray,
    knn_size: int = DEFAULT_TRACK_KNN,
) -> TrajectorySet:
    """Trajectories of arbitrary query points carried by nearby Gaussians.

    Each query is bound at t0 to its knn_size nearest dynamic Gaussian
    centers with normalized inverse-distance weights; its position at time t
    is the t0 position plus the weighted mean of the neighbors'
    displacements. A query exactly on a center follows that Gaussian.
    """
    query.validate()
    dyn_idx = np.flatnonzero(dynamic)
    if dyn_idx.size == 0:
        raise DegenerateModelError("model has no dynamic Gaussians to track")
    k = min(knn_size, dyn_idx.size)

    points = np.asarray(query.points, dtype=np.float64)
    state0, _ = deform(gaussians, query.t0, field, dynamic=dynamic)
    centers0 = state0.positions[dyn_idx]

    d2 = (
        np.sum(points * points, axis=1)[:, None]
        + np.sum(centers0 * centers0, axis=1)[None, :]
        - 2.0 * points @ centers0.T
    )
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    rows = np.arange(points.shape[0])[:, None]
    order = np.argsort(d2[rows, part], axis=1, kind="stable")
    nbr = part[rows, order]                                 # (P, k)
    dist = np.sqrt(np.maximum(d2[rows, nbr], 0.0))

    weights = 1.0 / (dist + 1e-8)
    exact = dist[:, 0] == 0.0   # queries sitting on a Gaussian center
    weights[exact] = 0.0
    weights[exact, 0] = 1.0
    weights /= weights.sum(axis=1, keepdims=True)

    times = np.asarray(query.eval_times, dtype=np.float64)
    out = np.empty((points.shape[0], times.size, 3))
    for j, t in enumerate(times):
        state_t, _ = deform(gaussians, float(t), field, dynamic=dynamic)
        disp = state_t.positions[dyn_idx] - centers0        # (n_dyn, 3)
        out[:, j] = points + np.einsum("pk,pkc->pc", weights, disp[nbr])
    return TrajectorySet(positions=out, times=times)


def track_all_dynamic(
    gaussians: GaussianSet,
    field: DeformationField,
    dynamic: np.ndarray,
    eval_times: np.ndarray,
) -> TrajectorySet:
    """Trajectories of every dynamic Gaussian center."""
    dyn_idx = np.flatnonzero(dynamic)
    if dyn_idx.size == 0:
        raise DegenerateModelError("model has no dynamic Gaussians to track")
    times = np.asarray(eval_times, dtype=np.float64)
    out = np.empty((dyn_idx.size, times.size, 3))
    for j, t in enumerate(times):
        state, _ = deform(gaussians, float(t), field, dynamic=dynamic)
        out[:, j] = state.positions[dyn_idx]
    return TrajectorySet(positions=out, times=times)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _errors(pred: TrajectorySet, gt: TrajectorySet) -> np.ndarray:
    if pred.positions.shape != gt.positions.shape:
        raise ShapeMismatchError(
            f"trajectory shapes differ: {pred.positions.shape} vs {gt.positions.shape}"
        )
    return np.linalg.norm(pred.positions - gt.positions, axis=2)  # (P, T)


def compute_mte(pred: TrajectorySet, gt: TrajectorySet) -> float:
    """Median Euclidean error over all (point, time) samples, meters."""
    return float(np.median(_errors(pred, gt)))


def compute_delta_avg(pred: TrajectorySet, gt: TrajectorySet) -> float:
    """Fraction of samples within each threshold, averaged over thresholds."""
    err = _errors(pred, gt)
    fracs = [float(np.mean(err < th)) for th in DELTA_THRESHOLDS]
    return float(np.mean(fracs))


def compute_survival(pred: TrajectorySet, gt: TrajectorySet,
                     threshold: float = SURVIVAL_THRESHOLD) -> float:
    """Per-timestep fraction of points within threshold, averaged over time."""
    err = _errors(pred, gt)
    return float(np.mean(np.mean(err < threshold, axis=0)))


def make_report(pred: TrajectorySet, gt: TrajectorySet) -> TrackReport:
    err = _errors(pred, gt)
    return TrackReport(
        mte_m=compute_mte(pred, gt),
        delta_avg=compute_delta_avg(pred, gt),
        survival=compute_survival(pred, gt),
        n_points=pred.num_points,
        n_steps=pred.num_steps,
        per_point_errors=err,
    )


def save_report(path, report: TrackReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_report(path) -> TrackReport:
    with open(path) as fh:
        d = json.load(fh)
    return TrackReport(
        mte_m=d["mte_m"], delta_avg=d["delta_avg"], survival=d["survival"],
        n_points=d["n_points"], n_steps=d["n_steps"],
    )


def sample_point_indices(n_points: int, n_samples: int, seed: int) -> np.ndarray:
    """Seeded point subsample shared between predicted and ground-truth sets."""
    if n_samples >= n_points:
        return np.arange(n_points)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_points, size=n_samples, replace=False))


def subsample(trajectories: TrajectorySet, indices: np.ndarray) -> TrajectorySet:
    return TrajectorySet(
        positions=trajectories.positions[indices].copy(), times=trajectories.times.copy()
    )


# ---------------------------------------------------------------------------
# image quality
# ---------------------------------------------------------------------------


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]."""
    if image.shape != reference.shape:
        raise ShapeMismatchError("image shapes differ")
    mse = float(np.mean((np.asarray(image, np.float64) - reference) ** 2))
    if mse == 0:
        return float("inf")
    return float(-10.0 * np.log10(mse))

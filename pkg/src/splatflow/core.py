"""Domain types and deterministic geometry kernels.

Conventions used throughout the package:
  * quaternions are scalar-first (w, x, y, z) and act as active rotations
    of column vectors;
  * cameras store a world-to-camera [R|T] transform;
  * all kernels run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateRotationError, InvalidParameterError

NEAR_PLANE = 0.01  # meters; points at or behind are culled


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class GaussianSet:
    """Canonical per-Gaussian parameters.

    Raw (unactivated) storage: opacity and mask are logits, scales are
    log-meters. Activations are exposed as methods so optimizers can act on
    the unconstrained values.
    """

    positions: np.ndarray      # (N, 3) meters, world frame
    rot_quats: np.ndarray      # (N, 4) unit quaternions (w, x, y, z)
    log_scales: np.ndarray     # (N, 3) log-meters
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3) RGB in [0, 1]
    mask_logits: np.ndarray    # (N,)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        n = self.count
        shapes = {
            "positions": (self.positions, (n, 3)),
            "rot_quats": (self.rot_quats, (n, 4)),
            "log_scales": (self.log_scales, (n, 3)),
            "opacity_logits": (self.opacity_logits, (n,)),
            "colors": (self.colors, (n, 3)),
            "mask_logits": (self.mask_logits, (n,)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contains non-finite values")

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def mask_values(self) -> np.ndarray:
        return sigmoid(self.mask_logits)

    def select(self, keep: np.ndarray) -> "GaussianSet":
        """New set restricted to `keep` (bool mask or index array)."""
        return GaussianSet(
            positions=self.positions[keep].copy(),
            rot_quats=self.rot_quats[keep].copy(),
            log_scales=self.log_scales[keep].copy(),
            opacity_logits=self.opacity_logits[keep].copy(),
            colors=self.colors[keep].copy(),
            mask_logits=self.mask_logits[keep].copy(),
        )

    def copy(self) -> "GaussianSet":
        return self.select(np.arange(self.count))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera [R|T]."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray  # (3, 4)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image dimensions must be >= 1")
        w2c = np.asarray(self.world_to_cam, dtype=np.float64)
        if w2c.shape != (3, 4) or not np.all(np.isfinite(w2c)):
            raise InvalidParameterError("world_to_cam must be a finite 3x4 matrix")
        r = w2c[:, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-6
        ):
            raise InvalidParameterError("rotation block must be orthonormal with det +1")

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.world_to_cam, dtype=np.float64)[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return np.asarray(self.world_to_cam, dtype=np.float64)[:, 3]


@dataclass
class TrajectorySet:
    """Dense 3D point trajectories: positions (P, T, 3) over normalized times."""

    positions: np.ndarray  # (P, T, 3) meters
    times: np.ndarray      # (T,) strictly increasing, in [0, 1]

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    @property
    def num_steps(self) -> int:
        return self.positions.shape[1]

    def validate(self) -> None:
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise InvalidParameterError(f"positions must be (P, T, 3), got {self.positions.shape}")
        if self.times.shape != (self.positions.shape[1],):
            raise InvalidParameterError("times length must match the time axis of positions")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidParameterError("positions contain non-finite values")
        if self.times.size and (self.times[0] < -1e-12 or self.times[-1] > 1 + 1e-12):
            raise InvalidParameterError("times must lie in [0, 1]")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidParameterError("times must be strictly increasing")


# ---------------------------------------------------------------------------
# scalar helpers
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def quat_to_rotmat(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions, (N, 4) -> (N, 3, 3)."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotmat_grad(quats: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. rotation matrices back to quaternion components.

    `d_rot` is (N, 3, 3); returns (N, 4). Uses the literal matrix formula
    above, i.e. no implicit renormalization.
    """
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = d_rot
    dw = 2 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2]
        + z * g[..., 1, 0] - x * g[..., 1, 2]
        - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    dx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2]
        + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
        + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
        + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
        + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_quats(quats: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions; raises on near-zero norm."""
    q = np.asarray(quats, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    if np.any(norms < 1e-12):
        raise DegenerateRotationError("quaternion norm below 1e-12")
    return q / norms[..., None]


def normalize_quats_grad(raw: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Gradient of q/|q| w.r.t. raw q: (I - uu^T)/|q| applied to d_unit."""
    q = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    unit = q / norms
    proj = np.sum(unit * d_unit, axis=-1, keepdims=True)
    return (d_unit - unit * proj) / norms


def normalize_rotations(gaussians: GaussianSet) -> GaussianSet:
    """Return a copy of the set with every quaternion unit-normalized."""
    return replace(gaussians, rot_quats=normalize_quats(gaussians.rot_quats))


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------


def covariance_from_rs(rot_quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance from rotation + log-scale: R S S^T R^T.

    Accepts a single (4,)/(3,) pair or batched (N, 4)/(N, 3) arrays.
    """
    q = np.asarray(rot_quat, dtype=np.float64)
    ls = np.asarray(log_scale, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(ls))):
        raise InvalidParameterError("non-finite rotation or scale")
    single = q.ndim == 1
    q = np.atleast_2d(q)
    ls = np.atleast_2d(ls)
    r = quat_to_rotmat(q)
    a = np.exp(2.0 * ls)  # (N, 3) eigenvalues
    cov = (r * a[:, None, :]) @ np.swapaxes(r, 1, 2)
    return cov[0] if single else cov


def covariance_from_rs_backward(
    rot_quat: np.ndarray, log_scale: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of covariance_from_rs: d_cov (N,3,3) -> (d_quat, d_log_scale)."""
    q = np.atleast_2d(np.asarray(rot_quat, dtype=np.float64))
    ls = np.atleast_2d(np.asarray(log_scale, dtype=np.float64))
    g = d_cov.reshape(-1, 3, 3)
    r = quat_to_rotmat(q)
    a = np.exp(2.0 * ls)
    # dL/dA_kk = (R^T G R)_kk ; dA/d log s = 2 * A
    gr = g @ r
    rtgr_diag = np.sum(r * gr, axis=1)
    d_ls = rtgr_diag * 2.0 * a
    # dL/dR = (G + G^T) R A
    d_r = (gr + np.swapaxes(g, 1, 2) @ r) * a[:, None, :]
    d_q = quat_to_rotmat_grad(q, d_r)
    return d_q, d_ls


# ---------------------------------------------------------------------------
# perspective projection
# ---------------------------------------------------------------------------


@dataclass
class ProjectedGaussians:
    """Batched projection results; `valid` marks Gaussians in front of the near plane.

    Entries of invalid Gaussians are left at zero and must be ignored.
    """

    mean2d: np.ndarray   # (N, 2) pixels
    cov2d: np.ndarray    # (N, 2, 2)
    depth: np.ndarray    # (N,) camera-frame z
    valid: np.ndarray    # (N,) bool
    cam_points: np.ndarray  # (N, 3) camera-frame positions (saved for backward)


def project_gaussians(mu: np.ndarray, sigma: np.ndarray, cam: Camera) -> ProjectedGaussians:
    """Project world-space Gaussians to image space (EWA first-order splat).

    cov2d = J W Sigma W^T J^T with J the perspective Jacobian at each mean.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise InvalidParameterError("non-finite projection inputs")
    w = cam.rotation
    t = cam.translation
    p = mu @ w.T + t
    depth = p[:, 2]
    valid = depth > NEAR_PLANE

    n = mu.shape[0]
    mean2d = np.zeros((n, 2), dtype=np.float64)
    cov2d = np.zeros((n, 2, 2), dtype=np.float64)
    if np.any(valid):
        pv = p[valid]
        inv_z = 1.0 / pv[:, 2]
        mean2d[valid, 0] = cam.fx * pv[:, 0] * inv_z + cam.cx
        mean2d[valid, 1] = cam.fy * pv[:, 1] * inv_z + cam.cy
        j = _perspective_jacobian(pv, cam.fx, cam.fy)
        m3 = np.einsum("ik,nkl,jl->nij", w, sigma[valid], w)
        cov2d[valid] = np.einsum("nik,nkl,njl->nij", j, m3, j)
    return ProjectedGaussians(mean2d=mean2d, cov2d=cov2d, depth=depth, valid=valid, cam_points=p)


def _perspective_jacobian(p: np.ndarray, fx: float, fy: float) -> np.ndarray:
    inv_z = 1.0 / p[:, 2]
    inv_z2 = inv_z * inv_z
    j = np.zeros((p.shape[0], 2, 3), dtype=np.float64)
    j[:, 0, 0] = fx * inv_z
    j[:, 0, 2] = -fx * p[:, 0] * inv_z2
    j[:, 1, 1] = fy * inv_z
    j[:, 1, 2] = -fy * p[:, 1] * inv_z2
    return j


def project_gaussians_backward(
    proj: ProjectedGaussians,
    sigma: np.ndarray,
    cam: Camera,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of project_gaussians w.r.t. world means and covariances.

    Culled Gaussians receive zero gradient. Depth gradients are defined as
    zero (sort order is piecewise constant).
    """
    n = proj.mean2d.shape[0]
    d_mu = np.zeros((n, 3), dtype=np.float64)
    d_sigma = np.zeros((n, 3, 3), dtype=np.float64)
    v = proj.valid
    if not np.any(v):
        return d_mu, d_sigma

    w = cam.rotation
    pv = proj.cam_points[v]
    fx, fy = cam.fx, cam.fy
    inv_z = 1.0 / pv[:, 2]
    inv_z2 = inv_z * inv_z
    j = _perspective_jacobian(pv, fx, fy)
    g2 = d_cov2d[v]

    # through Sigma: B = J W, dSigma = B^T G B
    b = np.einsum("nik,kl->nil", j, w)
    d_sigma[v] = np.einsum("nia,nij,njb->nab", b, g2, b)

    # through J (J depends on the camera point p)
    m3 = np.einsum("ik,nkl,jl->nij", w, sigma[v], w)
    d_j = np.einsum("nij,njk,nlk->nil", g2, j, m3) + np.einsum(
        "nji,njk,nkl->nil", g2, j, m3
    )

    d_p = np.einsum("nki,nk->ni", j, d_mean2d[v])  # J^T d_mean2d
    d_p[:, 0] += d_j[:, 0, 2] * (-fx * inv_z2)
    d_p[:, 1] += d_j[:, 1, 2] * (-fy * inv_z2)
    d_p[:, 2] += (
        d_j[:, 0, 0] * (-fx * inv_z2)
        + d_j[:, 1, 1] * (-fy * inv_z2)
        + d_j[:, 0, 2] * (2 * fx * pv[:, 0] * inv_z2 * inv_z)
        + d_j[:, 1, 2] * (2 * fy * pv[:, 1] * inv_z2 * inv_z)
    )
    d_mu[v] = d_p @ w
    return d_mu, d_sigma


def project_gaussian(mu: np.ndarray, sigma: np.ndarray, cam: Camera):
    """Single-Gaussian projection; returns None when culled by the near plane."""
    proj = project_gaussians(np.asarray(mu, dtype=np.float64)[None, :],
                             np.asarray(sigma, dtype=np.float64)[None, :, :], cam)
    if not proj.valid[0]:
        return None
    return {"mean2d": proj.mean2d[0], "cov2d": proj.cov2d[0], "depth": float(proj.depth[0])}

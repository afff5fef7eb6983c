"""Independent reference implementations used as test oracles.

Deliberately written without sharing code with the package: plain loops,
numpy.linalg for inverses/eigenvalues, scipy for rotations.
"""

import numpy as np

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
FLOOR = 0.3
CUTOFF = 3.0


def brute_force_rasterize(
    means2d, cov2d, depths, colors, opacities, mask_values, width, height, background
):
    """Per-pixel compositor evaluating every Gaussian at every pixel.

    Applies the same alpha floor, 3-sigma cutoff, and transmittance stop as
    the production rasterizer, but with no tiling and independent linear
    algebra. Also returns per-pixel transmittance traces.
    """
    n = len(depths)
    order = np.lexsort((np.arange(n), depths))  # depth asc, ties by index
    eye = np.eye(2)
    ms = [cov2d[g] + FLOOR * eye for g in range(n)]
    qs = [np.linalg.inv(m) for m in ms]
    radii = []
    for m in ms:
        sym = 0.5 * (m + m.T)
        lam = np.linalg.eigvalsh(sym)[-1]
        radii.append(CUTOFF * np.sqrt(max(lam, 0.0)))

    rgb = np.zeros((height, width, 3))
    mask = np.zeros((height, width))
    alpha = np.zeros((height, width))
    traces = []
    for py in range(height):
        for px in range(width):
            t = 1.0
            trace = [t]
            acc = np.zeros(3)
            m_acc = 0.0
            for g in order:
                if t < T_MIN:
                    break
                d = np.array([px - means2d[g, 0], py - means2d[g, 1]])
                if d @ d > radii[g] ** 2:
                    continue
                qf = d @ qs[g] @ d
                if qf < 0.0:
                    continue
                a = opacities[g] * np.exp(-0.5 * qf)
                if a < ALPHA_MIN:
                    continue
                acc += colors[g] * a * t
                m_acc += mask_values[g] * a * t
                t *= 1.0 - a
                trace.append(t)
            rgb[py, px] = acc + background * t
            mask[py, px] = m_acc
            alpha[py, px] = 1.0 - t
            traces.append(trace)
    return rgb, mask, alpha, traces


def project_oracle(mu, sigma, cam):
    """Explicitly form J and W and multiply: mean, J W Sigma W^T J^T, depth."""
    w2c = np.asarray(cam.world_to_cam, dtype=np.float64)
    w = w2c[:, :3]
    p = w @ np.asarray(mu, dtype=np.float64) + w2c[:, 3]
    if p[2] <= 0.01:
        return None
    j = np.array(
        [
            [cam.fx / p[2], 0.0, -cam.fx * p[0] / p[2] ** 2],
            [0.0, cam.fy / p[2], -cam.fy * p[1] / p[2] ** 2],
        ]
    )
    mean2d = np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
    cov2d = j @ w @ sigma @ w.T @ j.T
    return mean2d, cov2d, p[2]


def bilinear_scalar(plane, u, v):
    """Scalar bilinear lookup on one (h, ri, rj) plane; u, v in [0, 1]."""
    h, ri, rj = plane.shape
    pu = min(max(u, 0.0), 1.0) * (ri - 1)
    pv = min(max(v, 0.0), 1.0) * (rj - 1)
    i0 = min(int(np.floor(pu)), ri - 2) if ri > 1 else 0
    j0 = min(int(np.floor(pv)), rj - 2) if rj > 1 else 0
    fu = pu - i0
    fv = pv - j0
    out = np.zeros(h)
    for c in range(h):
        out[c] = (
            plane[c, i0, j0] * (1 - fu) * (1 - fv)
            + plane[c, i0 + 1, j0] * fu * (1 - fv)
            + plane[c, i0, j0 + 1] * (1 - fu) * fv
            + plane[c, i0 + 1, j0 + 1] * fu * fv
        )
    return out

"""Differentiable forward splatting and its analytic backward pass.

The observable contract is the untiled per-pixel formula; 16x16 tiling is
an internal optimization. See `_kernels` for the exact per-pixel procedure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InvalidParameterError, MissingTapeError

COV2D_FLOOR = 0.3       # pixel^2, added to the cov2d diagonal before inversion
ALPHA_MIN = _kernels.ALPHA_MIN
TRANSMITTANCE_MIN = _kernels.TRANSMITTANCE_MIN
CUTOFF_SIGMA = 3.0


@dataclass
class SplatInputs:
    """Posed Gaussians ready for compositing (already projected and shadow-scaled)."""

    means2d: np.ndarray      # (N, 2) pixels
    cov2d: np.ndarray        # (N, 2, 2)
    depths: np.ndarray       # (N,) meters, > 0
    colors: np.ndarray       # (N, 3) RGB in [0, 1]
    opacities: np.ndarray    # (N,) in (0, 1)
    mask_values: np.ndarray  # (N,) in (0, 1)
    width: int
    height: int
    background: np.ndarray  # (3,)

    @property
    def count(self) -> int:
        return self.means2d.shape[0]

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be positive")
        n = self.count
        shapes = [
            ("means2d", self.means2d, (n, 2)),
            ("cov2d", self.cov2d, (n, 2, 2)),
            ("depths", self.depths, (n,)),
            ("colors", self.colors, (n, 3)),
            ("opacities", self.opacities, (n,)),
            ("mask_values", self.mask_values, (n,)),
            ("background", self.background, (3,)),
        ]
        for name, arr, want in shapes:
            if arr.shape != want:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contains non-finite values")
        if n and np.any(self.depths <= 0):
            raise InvalidParameterError("depths must be positive (cull before rasterizing)")
        if n:
            m = self.cov2d + COV2D_FLOOR * np.eye(2)
            det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
            if np.any(det <= 0):
                raise InvalidParameterError("cov2d not invertible after the diagonal floor")


@dataclass
class _Tape:
    inputs: SplatInputs
    order: np.ndarray
    conics: np.ndarray
    radii: np.ndarray
    offsets: np.ndarray
    entries: np.ndarray
    final_t: np.ndarray
    n_contrib: np.ndarray


@dataclass
class RenderOutput:
    """Composited images plus the contributor metadata the backward pass needs."""

    rgb: np.ndarray    # (H, W, 3)
    mask: np.ndarray   # (H, W)
    alpha: np.ndarray  # (H, W), 1 - final transmittance
    tape: _Tape | None = field(default=None, repr=False)


@dataclass
class SplatGradients:
    means2d: np.ndarray
    cov2d: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    mask_values: np.ndarray


def _prepare(inputs: SplatInputs):
    """Depth order (stable: ties broken by index), conics and 3-sigma radii."""
    order = np.argsort(inputs.depths, kind="stable")
    m = inputs.cov2d + COV2D_FLOOR * np.eye(2)
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    conics = np.empty_like(m)
    conics[:, 0, 0] = m[:, 1, 1] / det
    conics[:, 0, 1] = -m[:, 0, 1] / det
    conics[:, 1, 0] = -m[:, 1, 0] / det
    conics[:, 1, 1] = m[:, 0, 0] / det
    # 3-sigma radius from the symmetric part's largest eigenvalue
    b = 0.5 * (m[:, 0, 1] + m[:, 1, 0])
    mid = 0.5 * (m[:, 0, 0] + m[:, 1, 1])
    disc = np.sqrt(np.maximum(0.25 * (m[:, 0, 0] - m[:, 1, 1]) ** 2 + b * b, 0.0))
    lam_max = np.maximum(mid + disc, 0.0)
    radii = CUTOFF_SIGMA * np.sqrt(lam_max)
    return order, conics, radii


def rasterize(inputs: SplatInputs) -> RenderOutput:
    """Composite Gaussians front-to-back into RGB, mask, and alpha images."""
    inputs.validate()
    order, conics, radii = _prepare(inputs)
    offsets, entries = _kernels.build_tile_lists(
        order, inputs.means2d, radii, inputs.width, inputs.height
    )
    rgb, mask, alpha, final_t, n_contrib = _kernels.rasterize_forward(
        order,
        inputs.means2d,
        conics,
        radii,
        inputs.colors,
        inputs.opacities,
        inputs.mask_values,
        inputs.background,
        inputs.width,
        inputs.height,
        offsets,
        entries,
    )
    tape = _Tape(inputs, order, conics, radii, offsets, entries, final_t, n_contrib)
    return RenderOutput(rgb=rgb, mask=mask, alpha=alpha, tape=tape)


def rasterize_backward(
    inputs: SplatInputs,
    output: RenderOutput,
    grad_rgb: np.ndarray,
    grad_mask: np.ndarray,
) -> SplatGradients:
    """Exact gradients of sum(grad_rgb * rgb) + sum(grad_mask * mask).

    `output` must come from `rasterize` on the same `inputs`; depth (sort
    order) gradients are defined as zero.
    """
    if output.tape is None or output.tape.inputs is not inputs:
        raise MissingTapeError("output was not produced by rasterize() on these inputs")
    h, w = inputs.height, inputs.width
    if grad_rgb.shape != (h, w, 3):
        raise InvalidParameterError(f"grad_rgb has shape {grad_rgb.shape}, expected {(h, w, 3)}")
    if grad_mask.shape != (h, w):
        raise InvalidParameterError(f"grad_mask has shape {grad_mask.shape}, expected {(h, w)}")
    t = output.tape
    d_means2d, d_cov2d, d_colors, d_opac, d_mask = _kernels.rasterize_backward_kernel(
        t.order,
        inputs.means2d,
        t.conics,
        t.radii,
        inputs.colors,
        inputs.opacities,
        inputs.mask_values,
        inputs.background,
        w,
        h,
        t.offsets,
        t.entries,
        t.final_t,
        t.n_contrib,
        np.ascontiguousarray(grad_rgb, dtype=np.float64),
        np.ascontiguousarray(grad_mask, dtype=np.float64),
    )
    return SplatGradients(
        means2d=d_means2d,
        cov2d=d_cov2d,
        colors=d_colors,
        opacities=d_opac,
        mask_values=d_mask,
    )

"""Numba-compiled inner loops for the rasterizer.

All kernels are serial or write disjoint outputs, so results are
bit-reproducible across runs regardless of threading.
"""

import numba
import numpy as np

TILE = 16
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4


@numba.njit(cache=True)
def build_tile_lists(order, means2d, radii, width, height):
    """CSR-style per-tile lists of Gaussian slots, in front-to-back order.

    `order` maps sorted slot -> gaussian index; the returned lists store
    sorted-slot positions so per-pixel traversal stays depth ordered.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)

    n = order.shape[0]
    for s in range(n):
        g = order[s]
        r = radii[g]
        if r <= 0.0:
            continue
        x0 = int(np.floor((means2d[g, 0] - r) / TILE))
        x1 = int(np.floor((means2d[g, 0] + r) / TILE))
        y0 = int(np.floor((means2d[g, 1] - r) / TILE))
        y1 = int(np.floor((means2d[g, 1] + r) / TILE))
        if x1 < 0 or y1 < 0 or x0 >= tiles_x or y0 >= tiles_y:
            continue
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, tiles_x - 1)
        y1 = min(y1, tiles_y - 1)
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tiles_x + tx + 1] += 1

    offsets = np.cumsum(counts)
    entries = np.empty(offsets[-1], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for s in range(n):
        g = order[s]
        r = radii[g]
        if r <= 0.0:
            continue
        x0 = int(np.floor((means2d[g, 0] - r) / TILE))
        x1 = int(np.floor((means2d[g, 0] + r) / TILE))
        y0 = int(np.floor((means2d[g, 1] - r) / TILE))
        y1 = int(np.floor((means2d[g, 1] + r) / TILE))
        if x1 < 0 or y1 < 0 or x0 >= tiles_x or y0 >= tiles_y:
            continue
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, tiles_x - 1)
        y1 = min(y1, tiles_y - 1)
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                t = ty * tiles_x + tx
                entries[cursor[t]] = s
                cursor[t] += 1
    return offsets, entries


@numba.njit(cache=True)
def rasterize_forward(
    order,
    means2d,
    conics,
    radii,
    colors,
    opacities,
    mask_values,
    background,
    width,
    height,
    offsets,
    entries,
):
    """Front-to-back alpha compositing of RGB and mask channels.

    Per pixel: C = sum_i c_i * a_i * T_i with T the running transmittance,
    a_i = opacity_i * exp(-0.5 d^T Q d). Gaussians outside their 3-sigma
    radius or with a_i < 1/255 are skipped; compositing stops once T drops
    below 1e-4. Background goes behind RGB only; mask composites over zero.
    """
    tiles_x = (width + TILE - 1) // TILE
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    mask = np.zeros((height, width), dtype=np.float64)
    alpha = np.zeros((height, width), dtype=np.float64)
    final_t = np.ones((height, width), dtype=np.float64)
    n_contrib = np.zeros((height, width), dtype=np.int32)

    for py in range(height):
        ty = py // TILE
        for px in range(width):
            tile = ty * tiles_x + px // TILE
            t_cur = 1.0
            r_acc = 0.0
            g_acc = 0.0
            b_acc = 0.0
            m_acc = 0.0
            count = 0
            for e in range(offsets[tile], offsets[tile + 1]):
                if t_cur < TRANSMITTANCE_MIN:
                    break
                g = order[entries[e]]
                dx = px - means2d[g, 0]
                dy = py - means2d[g, 1]
                if dx * dx + dy * dy > radii[g] * radii[g]:
                    continue
                qf = (
                    conics[g, 0, 0] * dx * dx
                    + (conics[g, 0, 1] + conics[g, 1, 0]) * dx * dy
                    + conics[g, 1, 1] * dy * dy
                )
                if qf < 0.0:
                    continue
                a = opacities[g] * np.exp(-0.5 * qf)
                if a < ALPHA_MIN:
                    continue
                w = a * t_cur
                r_acc += colors[g, 0] * w
                g_acc += colors[g, 1] * w
                b_acc += colors[g, 2] * w
                m_acc += mask_values[g] * w
                t_cur *= 1.0 - a
                count += 1
            rgb[py, px, 0] = r_acc + background[0] * t_cur
            rgb[py, px, 1] = g_acc + background[1] * t_cur
            rgb[py, px, 2] = b_acc + background[2] * t_cur
            mask[py, px] = m_acc
            alpha[py, px] = 1.0 - t_cur
            final_t[py, px] = t_cur
            n_contrib[py, px] = count
    return rgb, mask, alpha, final_t, n_contrib


@numba.njit(cache=True)
def rasterize_backward_kernel(
    order,
    means2d,
    conics,
    radii,
    colors,
    opacities,
    mask_values,
    background,
    width,
    height,
    offsets,
    entries,
    final_t,
    n_contrib,
    grad_rgb,
    grad_mask,
):
    """Analytic gradients of the forward compositing.

    Re-walks each pixel's contributor list front-to-back (recomputing the
    alphas bit-identically), then traverses it back-to-front reconstructing
    intermediate transmittances from the stored final transmittance.
    Accumulation is serial in raster order, hence deterministic.
    """
    tiles_x = (width + TILE - 1) // TILE
    n = means2d.shape[0]
    d_means2d = np.zeros((n, 2), dtype=np.float64)
    d_conic_m = np.zeros((n, 2, 2), dtype=np.float64)  # grads w.r.t. floored cov2d
    d_colors = np.zeros((n, 3), dtype=np.float64)
    d_opacities = np.zeros(n, dtype=np.float64)
    d_masks = np.zeros(n, dtype=np.float64)

    max_len = 0
    for t in range(offsets.shape[0] - 1):
        seg = offsets[t + 1] - offsets[t]
        if seg > max_len:
            max_len = seg
    idx_buf = np.empty(max_len, dtype=np.int64)
    a_buf = np.empty(max_len, dtype=np.float64)
    dx_buf = np.empty(max_len, dtype=np.float64)
    dy_buf = np.empty(max_len, dtype=np.float64)

    for py in range(height):
        ty = py // TILE
        for px in range(width):
            cnt = n_contrib[py, px]
            if cnt == 0:
                continue
            tile = ty * tiles_x + px // TILE

            # re-collect the counted contributors, front to back
            k = 0
            for e in range(offsets[tile], offsets[tile + 1]):
                if k == cnt:
                    break
                g = order[entries[e]]
                dx = px - means2d[g, 0]
                dy = py - means2d[g, 1]
                if dx * dx + dy * dy > radii[g] * radii[g]:
                    continue
                qf = (
                    conics[g, 0, 0] * dx * dx
                    + (conics[g, 0, 1] + conics[g, 1, 0]) * dx * dy
                    + conics[g, 1, 1] * dy * dy
                )
                if qf < 0.0:
                    continue
                a = opacities[g] * np.exp(-0.5 * qf)
                if a < ALPHA_MIN:
                    continue
                idx_buf[k] = g
                a_buf[k] = a
                dx_buf[k] = dx
                dy_buf[k] = dy
                k += 1

            gr0 = grad_rgb[py, px, 0]
            gr1 = grad_rgb[py, px, 1]
            gr2 = grad_rgb[py, px, 2]
            gm = grad_mask[py, px]

            t_next = final_t[py, px]
            # suffix sums include the background composited behind everything
            s0 = background[0] * t_next
            s1 = background[1] * t_next
            s2 = background[2] * t_next
            sm = 0.0
            for i in range(cnt - 1, -1, -1):
                g = idx_buf[i]
                a = a_buf[i]
                one_m = 1.0 - a
                t_i = t_next / one_m
                w = a * t_i

                d_colors[g, 0] += gr0 * w
                d_colors[g, 1] += gr1 * w
                d_colors[g, 2] += gr2 * w
                d_masks[g] += gm * w

                d_alpha = (
                    gr0 * (colors[g, 0] * t_i - s0 / one_m)
                    + gr1 * (colors[g, 1] * t_i - s1 / one_m)
                    + gr2 * (colors[g, 2] * t_i - s2 / one_m)
                    + gm * (mask_values[g] * t_i - sm / one_m)
                )

                gval = a / opacities[g]  # exp(-0.5 qf)
                d_opacities[g] += d_alpha * gval
                d_g = d_alpha * opacities[g]

                dx = dx_buf[i]
                dy = dy_buf[i]
                # Qd and Q^T d for the general (possibly asymmetric) conic
                qd0 = conics[g, 0, 0] * dx + conics[g, 0, 1] * dy
                qd1 = conics[g, 1, 0] * dx + conics[g, 1, 1] * dy
                qtd0 = conics[g, 0, 0] * dx + conics[g, 1, 0] * dy
                qtd1 = conics[g, 0, 1] * dx + conics[g, 1, 1] * dy

                # dG/d mean2d = G * 0.5 * (Q + Q^T) d
                coeff = d_g * gval
                d_means2d[g, 0] += coeff * 0.5 * (qd0 + qtd0)
                d_means2d[g, 1] += coeff * 0.5 * (qd1 + qtd1)

                # dG/dM = 0.5 * G * (Q^T d)(Q d)^T, M = cov2d + floor
                half = 0.5 * coeff
                d_conic_m[g, 0, 0] += half * qtd0 * qd0
                d_conic_m[g, 0, 1] += half * qtd0 * qd1
                d_conic_m[g, 1, 0] += half * qtd1 * qd0
                d_conic_m[g, 1, 1] += half * qtd1 * qd1

                s0 += colors[g, 0] * w
                s1 += colors[g, 1] * w
                s2 += colors[g, 2] * w
                sm += mask_values[g] * w
                t_next = t_i

    return d_means2d, d_conic_m, d_colors, d_opacities, d_masks

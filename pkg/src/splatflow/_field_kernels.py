"""Numba inner loops for the multi-resolution plane encoding.

Planes live in one flat float64 store; per-plane metadata arrays describe
offsets, resolutions, and which two of the (x, y, z, t) axes each plane
spans. Gradient accumulation is serial, in point order, into a dense
gradient buffer with dirty-node tracking so the optimizer only visits
touched rows.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def encode_forward(coords, store, p_off, p_ri, p_rj, p_axi, p_axj, n_levels, h):
    """Bilinear lookup on every plane, product fusion per level, level concat.

    Returns (features, per-plane vectors, corner indices, fractions) — the
    latter three are the interpolation tape for the backward pass.
    """
    n = coords.shape[0]
    npl = p_off.shape[0]
    feat = np.empty((n, n_levels * h), dtype=np.float64)
    vecs = np.empty((n, npl, h), dtype=np.float64)
    i0s = np.empty((n, npl), dtype=np.int64)
    j0s = np.empty((n, npl), dtype=np.int64)
    fis = np.empty((n, npl), dtype=np.float64)
    fjs = np.empty((n, npl), dtype=np.float64)

    for p in range(n):
        for pl in range(npl):
            ri = p_ri[pl]
            rj = p_rj[pl]
            u = coords[p, p_axi[pl]]
            v = coords[p, p_axj[pl]]
            pu = u * (ri - 1)
            pv = v * (rj - 1)
            i0 = int(pu)
            if i0 > ri - 2:
                i0 = ri - 2
            j0 = int(pv)
            if j0 > rj - 2:
                j0 = rj - 2
            fi = pu - i0
            fj = pv - j0
            base = p_off[pl] + (i0 * rj + j0) * h
            w00 = (1.0 - fi) * (1.0 - fj)
            w10 = fi * (1.0 - fj)
            w01 = (1.0 - fi) * fj
            w11 = fi * fj
            row = rj * h
            for c in range(h):
                vecs[p, pl, c] = (
                    store[base + c] * w00
                    + store[base + row + c] * w10
                    + store[base + h + c] * w01
                    + store[base + row + h + c] * w11
                )
            i0s[p, pl] = i0
            j0s[p, pl] = j0
            fis[p, pl] = fi
            fjs[p, pl] = fj

        for l in range(n_levels):
            for c in range(h):
                prod = 1.0
                for q in range(6):
                    prod *= vecs[p, l * 6 + q, c]
                feat[p, l * h + c] = prod
    return feat, vecs, i0s, j0s, fis, fjs


@numba.njit(cache=True)
def encode_backward(
    d_feat,
    clamped,
    store,
    vecs,
    i0s,
    j0s,
    fis,
    fjs,
    p_off,
    p_ri,
    p_rj,
    p_axi,
    p_axj,
    n_levels,
    h,
    grad_store,
    dirty,
    touched,
    n_touched,
):
    """Backward of encode_forward.

    Accumulates plane-entry gradients into `grad_store` (marking dirty nodes
    in `touched`) and returns coordinate gradients plus the updated touched
    count. `clamped` zeroes coordinate gradients where the query was clamped
    to the domain boundary.
    """
    n = d_feat.shape[0]
    npl = p_off.shape[0]
    d_coords = np.zeros((n, 4), dtype=np.float64)
    pre = np.empty(6, dtype=np.float64)
    suf = np.empty(6, dtype=np.float64)
    d_vec = np.empty((npl, h), dtype=np.float64)

    for p in range(n):
        # leave-one-out products route d_feat into each plane vector
        for l in range(n_levels):
            for c in range(h):
                pre[0] = 1.0
                for q in range(1, 6):
                    pre[q] = pre[q - 1] * vecs[p, l * 6 + q - 1, c]
                suf[5] = 1.0
                for q in range(4, -1, -1):
                    suf[q] = suf[q + 1] * vecs[p, l * 6 + q + 1, c]
                g = d_feat[p, l * h + c]
                for q in range(6):
                    d_vec[l * 6 + q, c] = g * pre[q] * suf[q]

        for pl in range(npl):
            ri = p_ri[pl]
            rj = p_rj[pl]
            i0 = i0s[p, pl]
            j0 = j0s[p, pl]
            fi = fis[p, pl]
            fj = fjs[p, pl]
            base = p_off[pl] + (i0 * rj + j0) * h
            row = rj * h
            node = p_off[pl] // h + i0 * rj + j0

            w00 = (1.0 - fi) * (1.0 - fj)
            w10 = fi * (1.0 - fj)
            w01 = (1.0 - fi) * fj
            w11 = fi * fj

            ids0 = node
            ids1 = node + rj
            ids2 = node + 1
            ids3 = node + rj + 1
            if dirty[ids0] == 0:
                dirty[ids0] = 1
                touched[n_touched] = ids0
                n_touched += 1
            if dirty[ids1] == 0:
                dirty[ids1] = 1
                touched[n_touched] = ids1
                n_touched += 1
            if dirty[ids2] == 0:
                dirty[ids2] = 1
                touched[n_touched] = ids2
                n_touched += 1
            if dirty[ids3] == 0:
                dirty[ids3] = 1
                touched[n_touched] = ids3
                n_touched += 1

            d_fi = 0.0
            d_fj = 0.0
            for c in range(h):
                g = d_vec[pl, c]
                p00 = store[base + c]
                p10 = store[base + row + c]
                p01 = store[base + h + c]
                p11 = store[base + row + h + c]
                grad_store[base + c] += g * w00
                grad_store[base + row + c] += g * w10
                grad_store[base + h + c] += g * w01
                grad_store[base + row + h + c] += g * w11
                d_fi += g * ((1.0 - fj) * (p10 - p00) + fj * (p11 - p01))
                d_fj += g * ((1.0 - fi) * (p01 - p00) + fi * (p11 - p10))

            ai = p_axi[pl]
            aj = p_axj[pl]
            if clamped[p, ai] == 0:
                d_coords[p, ai] += d_fi * (ri - 1)
            if clamped[p, aj] == 0:
                d_coords[p, aj] += d_fj * (rj - 1)

    return d_coords, n_touched


@numba.njit(cache=True)
def lazy_adam_update(
    params, grads, m, v, touched, n_touched, steps, lr, beta1, beta2, eps, h
):
    """Adam step applied only to touched node rows; per-node step counters.

    Clears the consumed gradient rows afterwards so the buffer can be
    reused. Untouched rows keep their moments unchanged (lazy semantics).
    """
    for k in range(n_touched):
        node = touched[k]
        steps[node] += 1
        t = steps[node]
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        base = node * h
        for c in range(h):
            g = grads[base + c]
            m[base + c] = beta1 * m[base + c] + (1.0 - beta1) * g
            v[base + c] = beta2 * v[base + c] + (1.0 - beta2) * g * g
            mh = m[base + c] / bc1
            vh = v[base + c] / bc2
            params[base + c] -= lr * mh / (np.sqrt(vh) + eps)
            grads[base + c] = 0.0

"""Central finite-difference harness for checking analytic gradients."""

import numpy as np


def central_difference(f, x, step=1e-5):
    """Gradient of scalar f at x by central differences, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-8):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def assert_grads_close(analytic, numeric, tol=1e-4, floor=1e-8, label=""):
    err = max_rel_error(analytic, numeric, floor=floor)
    assert err < tol, f"{label} gradient mismatch: max rel err {err:.3e} >= {tol}"

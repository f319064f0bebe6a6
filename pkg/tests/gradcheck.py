"""Central finite differences, independent of any backward pass."""
import numpy as np

STEP = 1e-5
# near-zero gradients are compared absolutely: relative error is measured
# against max(|analytic|, |numeric|, FLOOR)
FLOOR = 1e-6


def numerical_grad(f, array, step=STEP, indices=None):
    """d f() / d array, perturbing ``array`` in place (restored afterwards)."""
    flat = array.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(array.shape)


def rel_error(analytic, numeric, floor=FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def max_rel_error(analytic, numeric, floor=FLOOR):
    return float(np.max(rel_error(analytic, numeric, floor)))

"""Central finite differences, kept independent of the analytic code paths."""

import numpy as np

STEP = 1e-5


def central_diff(fn, x, step=STEP):
    """Gradient of scalar ``fn`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = fn()
        x[i] = old - step
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    """Largest relative error over coordinates whose magnitude exceeds ``floor``."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    mask = np.maximum(np.abs(a), np.abs(n)) > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - n[mask]) / np.maximum(np.abs(a[mask]), np.abs(n[mask]))))

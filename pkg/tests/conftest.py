"""Shared test utilities: finite-difference gradient oracle and error metrics.

The oracle perturbs raw numpy buffers and re-runs the forward function, so it
is independent of every backward pass it checks.
"""

import numpy as np


def fd_grad(f, arrays, h=1e-3):
    """Central finite differences of the scalar f() wrt each buffer in `arrays`.

    Each array is perturbed in place one coordinate at a time; f must read the
    buffers fresh on every call.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f())
            flat[i] = old - h
            fm = float(f())
            flat[i] = old
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-6):
    """Per-coordinate relative error, maxed; `floor` guards near-zero pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))

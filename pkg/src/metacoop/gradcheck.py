"""Central finite-difference oracles used to verify analytic gradients.

Deliberately independent of the autodiff machinery: everything here works on
plain numpy arrays and a black-box scalar function.
"""

from __future__ import annotations

import numpy as np


def finite_difference(f, arrays, step=1e-5):
    """Central-difference gradient of ``f`` w.r.t. each array in ``arrays``.

    ``f`` takes the list of arrays and returns a float. Arrays are perturbed
    one component at a time, so this is O(total size) evaluations of ``f``.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in base:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = f(base)
            flat[j] = orig - step
            fm = f(base)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-8):
    """Worst-case elementwise relative error, |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))

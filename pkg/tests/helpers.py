"""Shared numeric helpers for the test suite."""

import numpy as np

def fd_grad(f, arrays, eps=1e-5):
    """Central finite differences of scalar f() w.r.t. every entry of every array (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            up = f()
            a[i] = old - eps
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_rel_err(analytic, numeric, floor=1e-5):
    """Entrywise |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dividing by ~0."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst

"""Finite-difference gradient checks (fourth-order central stencil)."""

from __future__ import annotations

import numpy as np


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor absorbs roundoff on near-zero entries."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(loss_fn, params: dict, grads: dict, names=None, n_probe=6, eps=1e-4, seed=0):
    """Max relative error between ``grads`` and finite differences of ``loss_fn()``.

    ``loss_fn`` takes no arguments and reads ``params`` in place. Up to
    ``n_probe`` entries per tensor are probed, always including the entry
    with the largest analytic gradient. Returns ``(max_error, per_tensor)``.
    """
    rng = np.random.default_rng(seed)
    names = sorted(params) if names is None else names
    per = {}
    for name in names:
        P, G = params[name], grads[name]
        flat = P.reshape(-1)
        gflat = G.reshape(-1)
        idx = set(rng.choice(flat.size, size=min(n_probe, flat.size), replace=False).tolist())
        idx.add(int(np.argmax(np.abs(gflat))))
        errs = []
        for i in sorted(idx):
            old = flat[i]
            f = []
            for step in (2, 1, -1, -2):
                flat[i] = old + step * eps
                f.append(loss_fn())
            flat[i] = old
            num = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * eps)
            errs.append(float(relative_error(gflat[i], num)))
        per[name] = max(errs)
    return (max(per.values()) if per else 0.0), per

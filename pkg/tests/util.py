"""Shared test helpers: finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from mrpdiff.numerics.tensor import backward, zero_grads


def fd_gradient(loss_fn, t, index: int, h: float = 1e-6) -> float:
    """Central finite difference of loss_fn() w.r.t. t.data.flat[index]."""
    orig = t.data.flat[index]
    t.data.flat[index] = orig + h
    plus = float(loss_fn().data)
    t.data.flat[index] = orig - h
    minus = float(loss_fn().data)
    t.data.flat[index] = orig
    return (plus - minus) / (2.0 * h)


def check_grads(loss_fn, params, rtol: float = 1e-4, h: float = 1e-6,
                max_coords: int = 25, seed: int = 0) -> float:
    """Compare analytic gradients of loss_fn's params against central
    finite differences at (up to) max_coords sampled coordinates per
    parameter. Returns the worst relative error seen."""
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in params:
        n = t.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        grad = np.zeros(n) if t.grad is None else t.grad.ravel()
        for i in coords:
            num = fd_gradient(loss_fn, t, int(i), h=h)
            ana = grad[int(i)]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-3)
            worst = max(worst, err)
            assert err < rtol, f"grad mismatch at flat[{i}]: fd={num} analytic={ana}"
    return worst

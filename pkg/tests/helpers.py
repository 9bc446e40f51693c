"""Shared test utilities: finite-difference gradient oracle and small builders."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from gikt.tensor import Tape, Tensor

FD_STEP = 1e-5
REL_TOL = 1e-4


def finite_difference(f: Callable[[], float], arrays: Sequence[np.ndarray], step: float = FD_STEP):
    """Central finite differences of scalar f() w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = f()
            flat[i] = keep - step
            down = f()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def check_gradients(
    forward: Callable[[], Tensor],
    params: Sequence[Tensor],
    rel_tol: float = REL_TOL,
    step: float = FD_STEP,
) -> float:
    """Compare taped gradients of forward() against central differences.

    ``forward`` must rebuild the computation from the current parameter data
    each call and return the scalar loss tensor. Returns the worst relative
    error seen, and asserts it is within tolerance.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = forward()
        tape.backward(loss)
    autodiff = []
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        assert p.grad.shape == p.data.shape
        autodiff.append(p.grad.copy())

    numeric = finite_difference(lambda: forward().item(), [p.data for p in params], step=step)
    worst = 0.0
    for ad, fd in zip(autodiff, numeric):
        worst = max(worst, max_relative_error(ad, fd))
    assert worst < rel_tol, f"gradient mismatch: relative error {worst:.3e} >= {rel_tol}"
    return worst

"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

REL_FLOOR = 1e-10


def relative_error(a: float, b: float) -> float:
    """|a-b| / max(|a|, |b|, 1e-10); 0 when both magnitudes are < 1e-10."""
    if abs(a) < REL_FLOOR and abs(b) < REL_FLOOR:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def select_coords(flat_grad: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest-|gradient| coordinates (all when the
    tensor has at most k entries), deterministic under ties."""
    n = flat_grad.size
    if n <= k:
        return np.arange(n)
    return np.argsort(-np.abs(flat_grad), kind="stable")[:k]


def finite_diff_check(loss_fn, params, h: float = 1e-5, coords_per_param: int = 64) -> float:
    """Compare backward gradients of a scalar loss against central finite
    differences and return the max relative error over probed coordinates.

    loss_fn rebuilds the graph from the parameters' current values and
    returns the scalar loss node. Per parameter tensor the coordinates with
    the largest |gradient| are probed (all of them when the tensor has at
    most coords_per_param entries): central differences at step h cannot
    resolve coordinates whose derivative is far below |loss|*eps/h, so the
    check concentrates where it has signal.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    grads = {p.name: p.grad.copy() for p in params}

    def eval_loss() -> float:
        with ad.no_grad():
            return float(loss_fn().value)

    worst = 0.0
    for p in params:
        flat_grad = grads[p.name].ravel()
        flat_val = p.value.reshape(-1)
        for i in select_coords(flat_grad, coords_per_param):
            orig = flat_val[i]
            flat_val[i] = orig + h
            f_plus = eval_loss()
            flat_val[i] = orig - h
            f_minus = eval_loss()
            flat_val[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = relative_error(float(flat_grad[i]), fd)
            if err > worst:
                worst = err
    return worst

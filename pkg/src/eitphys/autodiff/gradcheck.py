"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from eitphys.autodiff.tensor import Tensor, backward, default_tape, no_grad


def numerical_grad(
    fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-4, indices: Sequence[tuple] | None = None
) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``param``.

    ``param.data`` is perturbed in place and restored. When ``indices`` is given only
    those entries are filled; the rest stay NaN.
    """
    grad = np.full(param.shape, np.nan) if indices is not None else np.zeros(param.shape)
    flat = param.data.reshape(-1)
    positions = (
        range(flat.size) if indices is None else [np.ravel_multi_index(ix, param.shape) for ix in indices]
    )
    with no_grad():
        for p in positions:
            orig = flat[p]
            flat[p] = orig + eps
            up = float(fn().data.sum())
            flat[p] = orig - eps
            down = float(fn().data.sum())
            flat[p] = orig
            grad.reshape(-1)[p] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||) over the finite entries of ``numeric``."""
    mask = np.isfinite(numeric)
    a, n = analytic[mask], numeric[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    Returns the relative error per parameter (keyed by name or position). With
    ``max_entries`` only a random subset of each parameter's entries is probed.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    default_tape().clear()
    loss = fn()
    backward(loss)
    errors = {}
    for k, p in enumerate(params):
        indices = None
        if max_entries is not None and p.size > max_entries:
            flat = rng.choice(p.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, p.shape) for i in flat]
        numeric = numerical_grad(fn, p, eps=eps, indices=indices)
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        errors[p.name or str(k)] = relative_error(analytic, numeric)
    return errors

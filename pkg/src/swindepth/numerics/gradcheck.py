"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                   indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to entries of ``x``.

    Only flat ``indices`` are perturbed when given; other entries stay zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 0.0) -> float:
    """Max elementwise relative error.

    ``floor_frac`` raises every denominator to at least that fraction of the
    largest gradient magnitude, so entries near zero, whose central
    differences are dominated by cancellation, cannot dominate.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = max(1e-12, floor_frac * float(np.max(np.abs(n))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor],
                      eps: float = 1e-5, floor_frac: float = 0.0,
                      max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated from scratch for every perturbation and must close
    over the tensor(s) in ``x``, which are perturbed in place.  With
    ``max_entries`` each tensor is checked on a seeded random subset of entries.
    """
    pick = np.random.default_rng(seed)
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.zero_grad()
    backward(f())
    worst = 0.0
    for t in xs:
        analytic = np.array(t.grad, dtype=np.float64, copy=True).ravel()
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(pick.choice(t.size, max_entries, replace=False))
        numeric = numerical_grad(f, t, eps, idx).ravel()
        if idx is not None:
            analytic, numeric = analytic[idx], numeric[idx]
        worst = max(worst, rel_error(analytic, numeric, floor_frac))
    return worst

"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

SKIP_BELOW = 1e-12


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                   coords: Optional[Sequence[tuple[int, ...]]] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data`` (perturbed in place).

    Only ``coords`` are evaluated when given; other entries stay zero.
    """
    grad = np.zeros_like(x.data)
    it = coords if coords is not None else list(np.ndindex(*x.shape))
    for idx in it:
        orig = x.data[idx]
        x.data[idx] = orig + h
        fp = f().item()
        x.data[idx] = orig - h
        fm = f().item()
        x.data[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    keep = ~((np.abs(a) < SKIP_BELOW) & (np.abs(n) < SKIP_BELOW))
    if not keep.any():
        return 0.0
    err = np.abs(a - n)[keep] / np.maximum(1.0, np.abs(a)[keep])
    return float(err.max())


def grad_check(f: Callable[[], Tensor], wrt: Tensor | Sequence[Tensor], h: float = 1e-5,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated from scratch for every perturbation, so it must read
    the current contents of the tensors in ``wrt``. With ``max_coords``, each
    tensor is probed at that many randomly drawn coordinates instead of all.
    """
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    f().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for t, a in zip(tensors, analytic):
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            flat = rng.choice(t.data.size, size=max_coords, replace=False)
            coords = [np.unravel_index(i, t.shape) for i in sorted(flat)]
        num = numerical_grad(f, t, h, coords)
        if coords is None:
            worst = max(worst, relative_error(a, num))
        else:
            sel = tuple(np.array(c) for c in zip(*coords))
            worst = max(worst, relative_error(a[sel], num[sel]))
    return worst

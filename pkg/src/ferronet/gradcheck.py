"""Central-difference gradient checking against the autodiff tape."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def finite_difference_check(
    builder: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    ``builder`` must recompute the scalar loss from the current contents of
    ``params`` each time it is called; coordinates are perturbed in place and
    restored. The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``max_coords`` caps the number of coordinates probed per tensor (picked
    with a seeded generator); ``None`` probes all of them.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.grad = None
    loss = builder()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ValueError("parameter data must be contiguous")
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            gflat = grad.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = builder().item()
                flat[i] = orig - h
                f_minus = builder().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * h)
                a = gflat[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst

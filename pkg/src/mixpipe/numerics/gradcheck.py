from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad, zero_grads


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative gap between backprop and central differences.

    ``x`` may be one Tensor or a list of them; ``f`` receives it unchanged.
    Every coordinate of every tensor is probed, so keep inputs small.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        zero_grads(xs)
        loss = f(x)
        if loss.size != 1 or not np.isfinite(loss.data).all():
            raise NonFiniteError("grad_check: f must return a finite scalar")
        loss.backward()
        analytic = [t.grad.copy() for t in xs]

        worst = 0.0
        with no_grad():
            for t, ga in zip(xs, analytic):
                flat = t.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(f(x).data)
                    flat[i] = orig - eps
                    fm = float(f(x).data)
                    flat[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NonFiniteError("grad_check: f produced a non-finite value")
                    fd = (fp - fm) / (2 * eps)
                    a = gflat[i]
                    err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                    worst = max(worst, err)
        return worst
    finally:
        for t, s in zip(xs, saved):
            t.requires_grad = s

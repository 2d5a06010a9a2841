"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..errors import NumericError, UsageError
from .tensor import Tensor, backward, no_grad


def grad_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-3,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: Optional[float] = 1e-8,
) -> float:
    """Return the max relative error between autodiff and central differences.

    ``f`` is called as ``f(x)`` for a single tensor or ``f(*x)`` for a
    sequence and must return a scalar. Every checked tensor must be float64.
    ``samples`` limits the check to that many random coordinates per tensor.
    The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. With ``floor=None`` the floor is the
    larger of 1e-8 and 1000 times the resolution of the difference
    quotient, ``machine_eps * max(|f|, 1) / eps``: gradients below that
    level cannot be resolved by central differences at all (e.g. an
    exactly-zero gradient whose quotient is one rounding step of ``f``).
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise UsageError("grad_check requires float64 tensors")
        t.requires_grad = True
        t.grad = None

    def call():
        return f(xs[0]) if single else f(*xs)

    loss = call()
    if loss.size != 1:
        raise UsageError("grad_check needs a scalar-valued function")
    if not np.isfinite(loss.data).all():
        raise NumericError("function value is not finite")
    backward(loss)
    if floor is None:
        resolution = np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / eps
        floor = max(1e-8, 1e3 * resolution)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t, ana in zip(xs, analytic):
        flat = t.data.reshape(-1)
        if not flat.flags.writeable or not np.shares_memory(flat, t.data):
            t.data = t.data.copy()
            flat = t.data.reshape(-1)
        if samples is None or samples >= flat.size:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples, replace=False)
        ana_flat = ana.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = call().item()
                flat[i] = orig - eps
                fm = call().item()
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value at coordinate {i}")
            num = (fp - fm) / (2 * eps)
            a = float(ana_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst

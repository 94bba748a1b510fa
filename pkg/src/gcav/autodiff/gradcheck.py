"""Central finite-difference gradient checks.

Both the tape gradient and the finite differences are evaluated under
float64 (see :func:`precision`): at float32 the difference quotient's
round-off, about eps*|f|/h, is already ~1e-4 of the gradient, so a 1e-3
relative bound would measure rounding rather than the backward rules.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, precision

DENOM_EPS = 1e-8


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    err = np.abs(analytic - numeric) / (np.abs(numeric) + DENOM_EPS)
    return float(err.max()) if err.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               dtype=np.float64) -> float:
    """Max over coordinates of |autodiff - central FD| / (|FD| + 1e-8).

    Functions with hard thresholds (step, sign) are not differentiable and
    report a large error when a coordinate straddles the jump; that is the
    expected failure, not a bug.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step h={h} outside (0, 1e-2]")
    with precision(dtype):
        base = np.array(x.data, dtype=dtype)
        leaf = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            y = f(leaf)
        if y.data.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {y.shape}")
        (analytic,) = tape.backward(y, [leaf])

        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        out = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(Tensor(base.copy())).item()
            flat[i] = old - h
            fm = f(Tensor(base.copy())).item()
            flat[i] = old
            out[i] = (fp - fm) / (2 * h)
    return _relative_error(analytic, numeric)


def grad_check_param(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-3,
                     dtype=np.float64) -> float:
    """Like :func:`grad_check`, but perturbs a parameter used inside ``loss_fn``.

    ``param.data`` is swapped for a float64 copy for the duration of the check
    and restored afterwards.
    """
    saved, saved_grad = param.data, param.grad
    try:
        param.data = np.array(saved, dtype=dtype)
        param.grad = None

        def f(t: Tensor) -> Tensor:
            param.data = t.data
            return loss_fn()

        with precision(dtype):
            # route the tape through the real param object
            leaf = param
            base = np.array(saved, dtype=dtype)
            leaf.data = base.copy()
            with Tape() as tape:
                y = loss_fn()
            if y.data.size != 1:
                raise ValueError(f"loss must be scalar, got shape {y.shape}")
            (analytic,) = tape.backward(y, [leaf])
            numeric = np.zeros_like(base)
            flat = base.reshape(-1)
            out = numeric.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = f(Tensor(base.copy())).item()
                flat[i] = old - h
                fm = f(Tensor(base.copy())).item()
                flat[i] = old
                out[i] = (fp - fm) / (2 * h)
        return _relative_error(analytic, numeric)
    finally:
        param.data, param.grad = saved, saved_grad

"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active append a node (output, inputs, backward rule) to that
tape; :meth:`Tape.backward` replays the nodes in reverse order.  Outside a tape
nothing is recorded, which is how inference and frozen stages run.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are stored in.

    Only the gradient checker uses this (float64 finite differences); all
    training runs at float32.
    """
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_array(data) -> np.ndarray:
    dtype = default_dtype()
    if isinstance(data, np.ndarray) and data.dtype == dtype:
        return data
    return np.asarray(data, dtype=dtype)


class Tensor:
    """n-dimensional float array that can take part in a gradient tape."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = _as_array(data)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"zero-sized tensor of shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._op: Optional[str] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap an op's forward value and, if a tape is recording, log the node."""
    out = Tensor(data, name=op)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        tape.nodes.append((out, tuple(parents), backward))
    return out


class Tape:
    """Ordered record of executed primitive ops.

    Use as a context manager; every op run inside the ``with`` block whose
    inputs require grad is appended in execution order.
    """

    def __init__(self):
        self.nodes: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> list:
        return backward(loss, self, params)


def backward(loss: Tensor, tape: Tape, params: Optional[Sequence[Tensor]] = None) -> list:
    """Reverse-mode sweep over ``tape`` seeded at scalar ``loss``.

    Leaf gradients are *accumulated* into ``leaf.grad`` (call ``zero_grad``
    between steps).  Returns the gradient contributed by this call for each
    tensor in ``params``; leaves the loss does not reach get zeros.  Without
    ``params`` the list covers every requires-grad leaf touched by the tape.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict = {id(loss): np.ones_like(loss.data)}
    leaves: dict = {}
    for out, parents, rule in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = rule(g)
        for p, pg in zip(parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise RuntimeError(f"grad shape {pg.shape} != input shape {p.shape} in {out._op}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.is_leaf:
                leaves[key] = p
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {leaf.name or 'leaf'}")
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    targets = list(params) if params is not None else list(leaves.values())
    out = []
    for p in targets:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
            if p.grad is None:
                p.grad = g.copy()
        out.append(np.asarray(g, dtype=p.data.dtype))
    return out

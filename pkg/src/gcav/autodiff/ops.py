"""Differentiable primitives.

Each function computes the forward value with numpy and hands
:func:`make_result` a closure returning one gradient per input.  Broadcasting
is limited to what the architectures need (bias rows, scalar factors,
keepdims reductions); :func:`_unbroadcast` folds gradients back.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result

COS_EPS = 1e-12
LN_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return make_result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)
    return make_result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise ValueError("log of non-positive value")
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# -- activations ------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make_result(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def rule(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return make_result(out, (a,), rule, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_result(
        s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax"
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    s = np.exp(out)
    return make_result(
        out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax"
    )


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(tot), axis=axis)
    s = e / tot
    return make_result(out, (a,), lambda g: (np.expand_dims(g, axis) * s,), "logsumexp")


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over zero-length axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def rule(g):
        gx = g * gamma.data if gamma is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return make_result(out, parents, rule, "layer_norm")


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout. Identity when ``train`` is false or ``p == 0``."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    return make_result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs at least 1-d operands")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        if a.ndim == 1:
            ga = _unbroadcast(ga, A.shape).reshape(a.shape)
        else:
            ga = _unbroadcast(ga, a.shape)
        if b.ndim == 1:
            gb = _unbroadcast(gb, B.shape).reshape(b.shape)
        else:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return make_result(out, (a, b), rule, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two flattened tensors of equal size."""
    if a.data.size != b.data.size:
        raise ValueError(f"dot: size mismatch {a.shape} vs {b.shape}")
    out = np.dot(a.data.ravel(), b.data.ravel())
    return make_result(
        np.asarray(out),
        (a, b),
        lambda g: (g * b.data.reshape(a.shape), g * a.data.reshape(b.shape)),
        "dot",
    )


def cosine_similarity(a: Tensor, b: Tensor, axis: Optional[int] = None) -> Tensor:
    """cos(a, b) with each norm guarded by ``COS_EPS``.

    ``axis=None`` flattens both inputs to vectors; otherwise the similarity is
    taken along ``axis`` and that axis is removed.
    """
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: shape mismatch {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    if axis is None:
        x, y = x.ravel(), y.ravel()
        ax = 0
    else:
        ax = axis
    if x.shape[ax] == 0:
        raise ValueError("cosine_similarity over zero-length axis")
    na = np.sqrt((x * x).sum(axis=ax, keepdims=True)) + COS_EPS
    nb = np.sqrt((y * y).sum(axis=ax, keepdims=True)) + COS_EPS
    xy = (x * y).sum(axis=ax, keepdims=True)
    cos = xy / (na * nb)
    true_na = na - COS_EPS
    true_nb = nb - COS_EPS

    def rule(g):
        gk = np.expand_dims(g, ax) if axis is not None else g
        # d/dx [x.y / ((|x|+e)(|y|+e))]
        da = gk * (y / (na * nb) - cos * x / (np.maximum(true_na, COS_EPS) * na))
        db = gk * (x / (na * nb) - cos * y / (np.maximum(true_nb, COS_EPS) * nb))
        return da.reshape(a.shape), db.reshape(b.shape)

    out = np.squeeze(cos, axis=ax)
    return make_result(out, (a, b), rule, "cosine_similarity")


def normalize(a: Tensor, axis: int = -1, eps: float = COS_EPS) -> Tensor:
    """Scale to unit L2 norm along ``axis``."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = x / denom

    def rule(g):
        safe = np.maximum(norm, eps)
        proj = (g * x).sum(axis=axis, keepdims=True)
        return (g / denom - x * proj / (safe * denom * denom),)

    return make_result(out, (a,), rule, "normalize")


# -- reductions --------------------------------------------------------------

def _axis_size(shape: tuple, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[x] for x in axes]))


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(x % len(shape) for x in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return make_result(
        out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),), "sum"
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = _axis_size(a.shape, axis)
    if n == 0:
        raise ValueError("mean over zero-length axis")
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    return make_result(
        out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,), "mean"
    )


def variance(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divide by n)."""
    n = _axis_size(a.shape, axis)
    if n == 0:
        raise ValueError("variance over zero-length axis")
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    out = np.asarray((xc * xc).mean(axis=axis, keepdims=keepdims))
    return make_result(
        out,
        (a,),
        lambda g: (2.0 * xc * _expand(g, a.shape, axis, keepdims) / n,),
        "variance",
    )


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return make_result(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, rule, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def rule(g):
        return tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis))

    return make_result(out, tensors, rule, "stack")


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with add.at."""
    out = np.array(a.data[idx])

    def rule(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return make_result(out, (a,), rule, "index")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise ValueError("take expects a 1-d index array")
    out = np.take(a.data, indices, axis=axis)

    def rule(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return make_result(out, (a,), rule, "take")

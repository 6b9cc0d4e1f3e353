"""Differentiable primitives.

Each function takes tensors (or array-likes, treated as constants) and
returns a new tensor whose backward closure maps the output gradient to one
gradient per parent.
"""

import numpy as np

from .tensor import Tensor, as_tensor, get_dtype, record


class DimensionError(ValueError):
    """Operand shapes do not conform."""


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return record(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return record(a.data @ b.data, (a, b), bw, "matmul")


def dense(x, weights, bias):
    """``x @ weights + bias`` for x[batch, in], weights[in, out], bias[out]."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.ndim != 2 or weights.ndim != 2 or bias.ndim != 1:
        raise DimensionError("dense: expected x[batch, in], weights[in, out], bias[out]")
    if x.shape[1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} do not conform")

    def bw(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return record(x.data @ weights.data + bias.data, (x, weights, bias), bw, "dense")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), bw, "concat")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                  lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a, low, high):
    """Clip into [low, high]; the gradient is zero where clipping was active."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return record(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clamp")


def softmax(logits, axis=-1):
    """Row-wise softmax, stabilised by subtracting the row max."""
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record(out, (logits,), bw, "softmax")


def log_softmax(logits, axis=-1):
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record(out, (logits,), bw, "log_softmax")


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=get_dtype())
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    target = Tensor(one_hot(labels, logits.shape[1]))
    return neg(mean(sum(mul(log_softmax(logits), target), axis=1)))


def dropout(x, rate, mode="infer", rng=None, mask=None):
    """Inverted dropout.

    In ``"train"`` or ``"mc"`` mode each unit is zeroed with probability
    ``rate`` and survivors are scaled by ``1 / (1 - rate)``; in ``"infer"``
    mode the input passes through untouched. A precomputed boolean ``mask``
    (True = keep) overrides sampling from ``rng``.
    """
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer", "mc"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train/mc mode needs an rng or a mask")
        mask = rng.random(x.shape) >= rate
    elif mask.shape != x.shape:
        raise DimensionError(f"dropout mask {mask.shape} does not match input {x.shape}")
    scale = mask.astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    return record(x.data * scale, (x,), lambda g: (g * scale,), "dropout")

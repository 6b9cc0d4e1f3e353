"""Dense tensors with reverse-mode gradient recording."""

import contextlib

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def get_dtype():
    return _DTYPE


def set_dtype(dtype):
    """Set the build-wide float width (``np.float32`` or ``np.float64``)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float width: {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording operations, e.g. for frozen-model inference."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """An n-dimensional float array that can take part in gradient computation.

    Operations on tensors that require gradients record themselves so that
    :func:`backward` can accumulate derivatives in reverse order.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar; the functions live in ops.py
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

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

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

    def backward(self):
        return backward(self)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record(out_data, parents, backward_fn, op):
    """Wrap ``out_data`` in a tensor, recording the op when any parent needs grad."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss, inputs=None):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that requires grad.

    ``loss`` must be a scalar. Gradients overwrite whatever ``grad`` held
    before, and the recorded graph is released afterwards. Tensors listed in
    ``inputs`` that the loss does not depend on receive zero gradients.

    Returns a dict mapping each participating tensor to its gradient array.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError("backward() needs a scalar (0-d) loss tensor")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        _check_finite(g, f"backward of {node._op or 'leaf'}")
        node.grad = g
        result[node] = g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        node._parents = ()
        node._backward = None
    for t in inputs or ():
        if t not in result:
            t.grad = np.zeros_like(t.data)
            result[t] = t.grad
    return result

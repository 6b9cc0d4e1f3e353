import numpy as np

from .tensor import backward


def default_step(dtype):
    return 1e-6 if np.dtype(dtype) == np.float64 else 5e-3


def numerical_grad(fn, tensor, h):
    """Central finite differences of scalar ``fn()`` w.r.t. ``tensor.data``."""
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """Max absolute deviation, normalised by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn, tensors, h=None):
    """Compare backward() against finite differences for every tensor in ``tensors``.

    ``fn`` must rebuild the scalar loss from the current tensor values on each
    call. Returns the worst relative error over all tensors.
    """
    tensors = list(tensors)
    if h is None:
        h = default_step(tensors[0].data.dtype)
    backward(fn(), tensors)
    analytic = [t.grad.astype(np.float64) for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, relative_error(a, numerical_grad(fn, t, h)))
    return worst

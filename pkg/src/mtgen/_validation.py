"""Input validation shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ParameterError


def check_images(X, dtype=np.float32):
    """Accept ``[n, D]``, ``[n, H, W]`` or ``[n, H, W, C]``; return ``(flat, image_shape)``."""
    X = np.asarray(X)
    if X.ndim == 1:
        raise ParameterError("expected a batch of images, got a 1-d array")
    image_shape = X.shape[1:]
    flat = check_array(X.reshape(X.shape[0], -1), dtype=dtype)
    return flat, image_shape


def check_labels(y, n, num_classes):
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(n, int(y))
    y = y.astype(np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ParameterError(f"{n} samples but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ParameterError(f"class id out of range [0, {num_classes})")
    return y


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

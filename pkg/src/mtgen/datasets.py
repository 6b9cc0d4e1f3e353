"""Labeled image datasets: IDX files, a synthetic glyph set, splits and batches."""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images in [0, 1], stored channel-last as float32 ``[n, H, W, 1]``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim == 3:
            images = images[..., None]
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ParameterError(f"images must be [n, H, W, C], got shape {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise ParameterError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if self.num_classes < 1:
            raise ParameterError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ParameterError("labels outside [0, num_classes)")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ParameterError("pixel values outside [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def input_dim(self):
        return int(np.prod(self.image_shape))

    def flat(self):
        return self.images.reshape(len(self), -1)

    def subset(self, index):
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def to_bytes(images):
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def from_bytes(raw):
    return raw.astype(np.float32) / np.float32(255.0)


# -- IDX -------------------------------------------------------------------

def _open(path, mode):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def _read_idx(path, expected_magic):
    with _open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise IdxTruncatedError(f"{path}: header truncated")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    size = int(np.prod(dims, dtype=np.int64))
    payload = blob[header_len:]
    if len(payload) < size:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {size}")
    return dims, np.frombuffer(payload[:size], dtype=np.uint8).reshape(dims)


def read_idx_header(path):
    """Return ``(magic, dims)`` without decoding the payload."""
    with _open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise IdxTruncatedError(f"{path}: header truncated")
        (magic,) = struct.unpack(">I", head)
        ndim = magic & 0xFF
        raw = fh.read(4 * ndim)
        if len(raw) < 4 * ndim:
            raise IdxTruncatedError(f"{path}: header truncated")
    return magic, struct.unpack(f">{ndim}I", raw)


def load_idx(image_path, label_path, num_classes=None):
    """Load an IDX image/label pair; pixels are scaled from bytes to [0, 1]."""
    _, images = _read_idx(image_path, IMAGE_MAGIC)
    _, labels = _read_idx(label_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images in {image_path} but {labels.shape[0]} labels in {label_path}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(from_bytes(images), labels.astype(np.int64), num_classes)


def write_idx(dataset, image_path, label_path):
    """Write ``dataset`` as IDX files; pixels are quantised to bytes."""
    raw = to_bytes(dataset.images[..., 0])
    n, rows, cols = raw.shape
    with _open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(raw.tobytes())
    with _open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# -- synthetic glyphs --------------------------------------------------------

def _stripes(t, count=3):
    # count bars across [-1, 1]
    return np.floor((t + 1.0) * count) % 2 == 0


GLYPHS = (
    ("disk", lambda u, v: u * u + v * v <= 1.0),
    ("ring", lambda u, v: (u * u + v * v <= 1.0) & (u * u + v * v >= 0.4)),
    ("cross", lambda u, v: ((np.abs(u) <= 0.28) & (np.abs(v) <= 1)) | ((np.abs(v) <= 0.28) & (np.abs(u) <= 1))),
    ("hbars", lambda u, v: (np.abs(u) <= 1) & (np.abs(v) <= 1) & _stripes(v, 2.5)),
    ("triangle", lambda u, v: (v >= -1) & (v <= 1) & (np.abs(u) <= (v + 1) / 2)),
    ("checker", lambda u, v: (np.abs(u) <= 1) & (np.abs(v) <= 1)
     & ((np.floor((u + 1) * 1.5) + np.floor((v + 1) * 1.5)) % 2 == 0)),
    ("vbars", lambda u, v: (np.abs(u) <= 1) & (np.abs(v) <= 1) & _stripes(u, 2.5)),
    ("frame", lambda u, v: (np.maximum(np.abs(u), np.abs(v)) <= 1) & (np.maximum(np.abs(u), np.abs(v)) >= 0.62)),
    ("saltire", lambda u, v: (np.abs(np.abs(u) - np.abs(v)) <= 0.3) & (np.abs(u) <= 1) & (np.abs(v) <= 1)),
    ("diamond", lambda u, v: np.abs(u) + np.abs(v) <= 1.0),
)

_SUPERSAMPLE = 3


def _render(glyph, side, cx, cy, sx, sy, angle, intensity):
    offsets = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE - 0.5
    coords = (np.arange(side)[:, None] + offsets[None, :]).reshape(-1)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cos, sin = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    mask = glyph((cos * dx + sin * dy) / sx, (cos * dy - sin * dx) / sy).astype(np.float64)
    cover = mask.reshape(side, _SUPERSAMPLE, side, _SUPERSAMPLE).mean(axis=(1, 3))
    return intensity * cover


def synth_shapes(num_classes=5, per_class=100, side=16, seed=0, noise=0.08, jitter=1.0):
    """Render a balanced dataset of jittered glyphs, deterministic per ``seed``.

    Class ``c`` uses glyph ``GLYPHS[c]``. Position, per-axis scale, rotation
    and intensity are jittered (``jitter`` scales the ranges), Gaussian pixel
    noise is added and the result is quantised to byte levels.
    """
    if not 4 <= num_classes <= len(GLYPHS):
        raise ParameterError(f"num_classes must be in [4, {len(GLYPHS)}], got {num_classes}")
    if side < 8:
        raise ParameterError(f"side must be >= 8, got {side}")
    if per_class < 1:
        raise ParameterError("per_class must be positive")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.empty((labels.size, side, side), dtype=np.float64)
    center = (side - 1) / 2.0
    for i, c in enumerate(labels):
        half = side / 2.0
        sx, sy = half * (0.7 + rng.uniform(-0.3, 0.2, size=2) * jitter)
        cx, cy = center + rng.uniform(-0.15, 0.15, size=2) * side * jitter
        angle = rng.uniform(-0.35, 0.35) * jitter
        intensity = 1.0 - rng.uniform(0.0, 0.6) * jitter
        img = _render(GLYPHS[c][1], side, cx, cy, sx, sy, angle, intensity)
        img += noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return LabeledDataset(from_bytes(to_bytes(images[order])), labels[order], num_classes)


# -- splitting and batching ---------------------------------------------------

def split(dataset, val_fraction, seed=0):
    """Stratified, seed-deterministic partition into ``(train, validation)``.

    The validation part holds ``round(val_fraction * n)`` examples, allotted
    to classes by largest remainder so class proportions are preserved.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ParameterError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    total_val = int(round(val_fraction * n))
    if total_val == 0 or total_val == n:
        raise ParameterError(f"val_fraction {val_fraction} leaves an empty split of {n} items")
    counts = dataset.class_counts()
    exact = counts * val_fraction
    quota = np.floor(exact).astype(np.int64)
    remainder = total_val - int(quota.sum())
    if remainder > 0:
        # stable sort keeps ties in class order
        order = np.argsort(-(exact - quota), kind="stable")
        quota[order[:remainder]] += 1
    elif remainder < 0:
        order = np.argsort(exact - quota, kind="stable")
        quota[order[:-remainder]] -= 1
    rng = np.random.default_rng(seed)
    val_idx = []
    train_idx = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        members = members[rng.permutation(members.size)]
        val_idx.append(members[:quota[c]])
        train_idx.append(members[quota[c]:])
    val_idx = np.sort(np.concatenate(val_idx))
    train_idx = np.sort(np.concatenate(train_idx))
    return dataset.subset(train_idx), dataset.subset(val_idx)


class BatchIterator:
    """Shuffled mini-batch indices; each epoch visits every example once."""

    def __init__(self, n, batch_size, seed=0):
        if n < 1 or batch_size < 1:
            raise ParameterError("n and batch_size must be positive")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return -(-self.n // self.batch_size)

    def epoch(self):
        order = self.rng.permutation(self.n)
        for start in range(0, self.n, self.batch_size):
            yield order[start:start + self.batch_size]

    __iter__ = epoch

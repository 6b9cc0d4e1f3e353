"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"MTG1"                     magic
    u32 version                 currently 1
    u32 tensor_count
    u32 meta_len, meta bytes    UTF-8 JSON object, keys sorted
    tensor_count x:
        u16 name_len, name      UTF-8
        u8  dtype tag           1=float32 2=float64 3=int64
        u8  ndim
        u32 x ndim              shape
        raw values              little-endian, C order
"""

import io
import json
import struct

import numpy as np

MAGIC = b"MTG1"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """A checkpoint file is malformed or from an unsupported version."""


def dumps(tensors, metadata=None):
    """Serialise a name -> array mapping (insertion order kept) to bytes."""
    buf = io.BytesIO()
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for name, value in tensors.items():
        arr = np.asarray(value)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(blob):
    """Inverse of :func:`dumps`; returns ``(tensors, metadata)``."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic: not an MTG1 checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dt = _TAG_DTYPES[tag]
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, metadata


def save(path, tensors, metadata=None):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, metadata))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())

"""Tensor storage, seeded initialization, digests and the DTB file format.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order. Random
streams come from NumPy's PCG64 bit generator (128-bit state, 64-bit output,
O'Neill 2014), seeded through ``SeedSequence`` so that a seed plus an optional
stream path always yields the same values.

DTB layout (little-endian throughout)::

    b"DTB1" | u8 dtype code (0=f32, 1=f64) | u8 rank R | R x u64 dims | payload
"""
from __future__ import annotations

import hashlib
import os
import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError, ShapeError

DTB_MAGIC = b"DTB1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

DEFAULT_DTYPE = np.float32


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; ``stream`` selects an independent substream."""
    if seed < 0 or seed >= 2**64:
        raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {list(shape)}: all dimensions must be >= 1")
    return shape


def alloc(shape: Sequence[int], fill: float = 0.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.full(_check_shape(shape), fill, dtype=dtype)


def he_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """He-normal weights: N(0, 2 / fan_in)."""
    if fan_in < 1:
        raise InvalidArgumentError(f"fan_in must be >= 1, got {fan_in}")
    shape = _check_shape(shape)
    std = np.sqrt(2.0 / fan_in)
    # draw in float64 so the stream does not depend on the target dtype
    return (rng.standard_normal(shape) * std).astype(dtype)


def checksum(t: np.ndarray) -> str:
    """64-bit hex digest over dtype, shape and the exact bytes of ``t``."""
    a = np.ascontiguousarray(t)
    h = hashlib.blake2b(digest_size=8)
    h.update(a.dtype.str.encode())
    h.update(struct.pack(f"<{a.ndim}Q", *a.shape))
    h.update(a.tobytes())
    return h.hexdigest()


def checksums(tensors: dict[str, np.ndarray]) -> dict[str, str]:
    return {k: checksum(v) for k, v in tensors.items()}


def all_finite(tensors: Iterable[np.ndarray]) -> bool:
    return all(np.isfinite(t).all() for t in tensors)


def dtb_bytes(t: np.ndarray) -> bytes:
    a = np.asarray(t)
    dt = a.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise FormatError(f"DTB supports float32/float64 only, got {a.dtype}")
    head = DTB_MAGIC + struct.pack("<BB", _DTYPE_CODES[dt], a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=dt).tobytes()


def dtb_from_bytes(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != DTB_MAGIC:
        raise FormatError(f"{name}: bad magic, not a DTB file")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"{name}: unknown dtype code {code}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise FormatError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    if rank == 0 or any(s < 1 for s in shape):
        raise FormatError(f"{name}: invalid shape {list(shape)}")
    dt = _CODE_DTYPES[code]
    expected = int(np.prod(shape)) * dt.itemsize
    if len(buf) - off != expected:
        raise FormatError(f"{name}: payload is {len(buf) - off} bytes, shape {list(shape)} needs {expected}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save_dtb(path: str | os.PathLike, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(dtb_bytes(t))


def load_dtb(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except FileNotFoundError:
        raise FormatError(f"missing DTB file: {path}") from None
    return dtb_from_bytes(buf, str(path))

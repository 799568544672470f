"""Dense tensor files and seeded random generation.

Tensors are plain C-ordered numpy arrays of dtype float32 or float64. On disk
they use the ``.tcpt`` format::

    b"TCPT" | u32 little-endian header_len | header_json (UTF-8) | payload

where ``header_json`` is ``{"dtype":..., "order":"C", "shape":[...]}`` written
with sorted keys and no whitespace, and the payload is ``prod(shape)``
little-endian IEEE-754 values.

Random numbers come from a counter-based SplitMix64 stream: the i-th 64-bit
word of seed ``s`` is ``mix64(s + (i + 1) * 0x9E3779B97F4A7C15)`` with::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

all mod 2**64. Uniforms are ``(word >> 11) * 2**-53``; normals use Box-Muller
on consecutive pairs ``(u1, u2)``: ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .errors import (
    BadMagic,
    DtypeUnsupported,
    IoFailure,
    TensorFormatError,
    TruncatedPayload,
)

logger = logging.getLogger(__name__)

Tensor = NDArray[np.floating[Any]]

MAGIC = b"TCPT"
TENSOR_SUFFIX = ".tcpt"
_DTYPES: dict[str, np.dtype[Any]] = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SPLIT_GAMMA = np.uint64(0xD1B54A32D192ED03)


def _header_bytes(dtype_name: str, shape: tuple[int, ...]) -> bytes:
    header = {"dtype": dtype_name, "order": "C", "shape": list(shape)}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_tensor(t: Tensor) -> bytes:
    """Serialise a tensor to .tcpt bytes.

    Raises:
        DtypeUnsupported: If the dtype is not float32/float64
        TensorFormatError: If the tensor holds NaN or Inf
    """
    arr = np.asarray(t)
    dtype_name = arr.dtype.name
    if dtype_name not in _DTYPES:
        raise DtypeUnsupported(f"Unsupported tensor dtype: {dtype_name}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise TensorFormatError("Refusing to write a tensor with NaN/Inf values")
    header = _header_bytes(dtype_name, tuple(int(d) for d in arr.shape))
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes(order="C")
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_tensor(blob: bytes) -> Tensor:
    """Parse .tcpt bytes into a read-only array.

    Raises:
        BadMagic: If the first four bytes are not ``TCPT``
        TruncatedPayload: If the header or payload is shorter than declared
        DtypeUnsupported: If the header names another dtype
        TensorFormatError: For malformed headers or trailing bytes
    """
    if blob[:4] != MAGIC:
        raise BadMagic(f"Bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise TruncatedPayload("File ends inside the header length field")
    (header_len,) = struct.unpack("<I", blob[4:8])
    header_end = 8 + header_len
    if len(blob) < header_end:
        raise TruncatedPayload("File ends inside the JSON header")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
        dtype_name = header["dtype"]
        shape = tuple(int(d) for d in header["shape"])
        order = header.get("order", "C")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise TensorFormatError(f"Malformed tensor header: {e}") from e
    if dtype_name not in _DTYPES:
        raise DtypeUnsupported(f"Unsupported tensor dtype: {dtype_name}")
    if order != "C" or any(d < 0 for d in shape):
        raise TensorFormatError(f"Invalid order/shape in header: {order}, {shape}")

    dtype = _DTYPES[dtype_name]
    expected = math.prod(shape) * dtype.itemsize
    payload = blob[header_end:]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"Payload holds {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise TensorFormatError(f"{len(payload) - expected} trailing bytes after payload")

    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=False)


def read_tensor(path: str | Path) -> Tensor:
    """Read a .tcpt file.

    Raises:
        IoFailure: If the file cannot be read
        BadMagic, TruncatedPayload, DtypeUnsupported: On malformed content
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"Cannot read tensor file {path}: {e}") from e
    t = decode_tensor(blob)
    logger.debug(
        "Read tensor", extra={"path": str(path), "shape": t.shape, "dtype": t.dtype.name}
    )
    return t


def write_tensor(path: str | Path, t: Tensor) -> None:
    """Write a tensor as a .tcpt file.

    Raises:
        IoFailure: If the file cannot be written
    """
    blob = encode_tensor(t)
    try:
        Path(path).write_bytes(blob)
    except OSError as e:
        raise IoFailure(f"Cannot write tensor file {path}: {e}") from e


def _mix64(z: NDArray[np.uint64]) -> NDArray[np.uint64]:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class Rng:
    """Immutable, splittable counter-based generator (SplitMix64).

    Drawing never mutates the generator: the same ``Rng`` always yields the
    same stream. Use :meth:`split` to derive independent streams.
    """

    seed: int
    algorithm: str = "splitmix64-counter/1"

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"Seed must fit in an unsigned 64-bit integer: {self.seed}")

    def words(self, n: int) -> NDArray[np.uint64]:
        """Return the first ``n`` 64-bit words of this stream."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GAMMA
        return _mix64(z)

    def split(self, key: int) -> Rng:
        """Derive an independent child stream for ``key``."""
        with np.errstate(over="ignore"):
            salt = np.array([key + 1], dtype=np.uint64) * _SPLIT_GAMMA
            child = _mix64(np.array([self.seed], dtype=np.uint64) ^ salt)
        return Rng(int(child[0]))


def uniform(rng: Rng, shape: tuple[int, ...] | list[int]) -> NDArray[np.float64]:
    """Uniform values in [0, 1) with 53 random bits each."""
    n = math.prod(shape)
    u = (rng.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return u.reshape(tuple(shape))


def randn(
    rng: Rng,
    shape: tuple[int, ...] | list[int],
    dtype: np.dtype[Any] | type[np.floating[Any]] = np.float64,
) -> Tensor:
    """Standard normal values, reproducible per seed on every platform."""
    n = math.prod(shape)
    pairs = (n + 1) // 2
    u = uniform(rng, (2 * pairs,))
    u1, u2 = u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log(1.0 - u1))
    angle = 2.0 * np.pi * u2
    z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
    return z.reshape(-1)[:n].reshape(tuple(shape)).astype(dtype)

import base64
import binascii
from typing import Sequence

import numpy as np
import numpy.typing as npt

from diffpose.errors import FormatError

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

_F32_LE = np.dtype("<f4")
_F64_LE = np.dtype("<f8")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """The named generator behind every stochastic operation.

    PCG64 keyed by ``SeedSequence([seed, *stream])``, so independent streams
    (per training step, per sample, per hypothesis) are derived from one seed
    without any hidden global state.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def to_f32_grid(x: "npt.ArrayLike") -> FloatArray:
    """Round to the nearest float32 and widen back, so persisting is lossless."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def encode_f32(x: "npt.ArrayLike") -> str:
    return base64.b64encode(np.ascontiguousarray(x, dtype=_F32_LE).tobytes()).decode("ascii")


def decode_f32(data: str, shape: Sequence[int], field: str) -> FloatArray:
    try:
        raw = base64.b64decode(data.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, AttributeError) as e:
        raise FormatError(f"{field}: payload is not valid base64") from e
    expected = int(np.prod(shape)) * _F32_LE.itemsize
    if len(raw) != expected:
        raise FormatError(f"{field}: expected {expected} bytes for shape {tuple(shape)}, got {len(raw)}")
    return np.frombuffer(raw, dtype=_F32_LE).astype(np.float64).reshape(tuple(shape))


def f32_bytes(x: "npt.ArrayLike") -> bytes:
    return np.ascontiguousarray(x, dtype=_F32_LE).tobytes()


def f64_bytes(x: "npt.ArrayLike") -> bytes:
    return np.ascontiguousarray(x, dtype=_F64_LE).tobytes()


def from_bytes(raw: bytes, dtype: str, count: int, field: str) -> FloatArray:
    dt = np.dtype(dtype)
    if len(raw) != count * dt.itemsize:
        raise FormatError(f"{field}: expected {count * dt.itemsize} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dt).astype(np.float64)


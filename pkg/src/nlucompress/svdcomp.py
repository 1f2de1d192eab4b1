"""Truncated-SVD embedding compression and the factorized embedding layer.

``SVDF`` layout (little-endian)::

    b"SVDF" | V u64 | D u64 | r u64 | n float64 | U (V*r f32) | S (r f32) | Vt (r*D f32)
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .embio import EmbeddingMatrix, atomic_write
from .errors import DimensionError, FormatError, ParameterError

SVDF_MAGIC = b"SVDF"
_HEADER = struct.Struct("<4sQQQd")


def retained_rank(n: float, V: int, D: int) -> int:
    if not 0.0 < n <= 1.0:
        raise ParameterError(f"retained fraction must be in (0, 1], got {n}")
    return max(1, int(math.floor(n * min(V, D) + 0.5)))


@dataclass(eq=False)
class LowRankFactors:
    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray
    n: float

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.S = np.asarray(self.S, dtype=np.float64).reshape(-1)
        self.Vt = np.asarray(self.Vt, dtype=np.float64)
        r = self.S.shape[0]
        if self.U.ndim != 2 or self.Vt.ndim != 2 or self.U.shape[1] != r or self.Vt.shape[0] != r:
            raise DimensionError(f"inconsistent factor shapes U{self.U.shape} S{self.S.shape} Vt{self.Vt.shape}")
        if r < 1:
            raise ParameterError("rank must be at least 1")
        if np.any(self.S < 0):
            raise ParameterError("singular values must be non-negative")

    r = property(lambda self: self.S.shape[0])
    V = property(lambda self: self.U.shape[0])
    D = property(lambda self: self.Vt.shape[1])

    def reconstruction(self) -> np.ndarray:
        return (self.U * self.S) @ self.Vt

    def payload_nbytes(self) -> int:
        return 4 * (self.V * self.r + self.r + self.r * self.D)


def _matrix(emb) -> np.ndarray:
    w = emb.weights if isinstance(emb, EmbeddingMatrix) else emb
    return np.asarray(w, dtype=np.float64)


def svd_spectrum(emb) -> np.ndarray:
    """All singular values, descending."""
    return np.linalg.svd(_matrix(emb), compute_uv=False)


def svd_truncate(emb, n: float) -> LowRankFactors:
    """Best rank-``round(n * min(V, D))`` approximation (Eckart-Young)."""
    W = _matrix(emb)
    r = retained_rank(n, *W.shape)
    U, S, Vt = np.linalg.svd(W, full_matrices=False)
    return LowRankFactors(U[:, :r], S[:r], Vt[:r], float(n))


def make_factorized_layer(factors: LowRankFactors) -> tuple[np.ndarray, np.ndarray]:
    """``(small embedding U*diag(S) (V, r), projection Vt (r, D))``."""
    return factors.U * factors.S, factors.Vt.copy()


def factors_to_bytes(f: LowRankFactors) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(SVDF_MAGIC, f.V, f.D, f.r, f.n))
    for arr in (f.U, f.S, f.Vt):
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def factors_from_bytes(data: bytes) -> LowRankFactors:
    if len(data) < _HEADER.size:
        raise FormatError("truncated SVDF header")
    magic, V, D, r, n = _HEADER.unpack_from(data, 0)
    if magic != SVDF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SVDF_MAGIC!r}")
    sizes = (V * r, r, r * D)
    if len(data) != _HEADER.size + 4 * sum(sizes):
        raise FormatError("SVDF payload size does not match header")
    off = _HEADER.size
    arrays = []
    for count in sizes:
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64))
        off += 4 * count
    return LowRankFactors(arrays[0].reshape(V, r), arrays[1], arrays[2].reshape(r, D), n)


def write_factors(path, f: LowRankFactors):
    """Persist factors; values are stored as float32."""
    atomic_write(path, factors_to_bytes(f))


def read_factors(path) -> LowRankFactors:
    with open(path, "rb") as fh:
        return factors_from_bytes(fh.read())

"""Post-training linear quantization with per-tensor ranges."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(eq=False)
class QuantizedMatrix:
    """Bin indices plus the affine map ``value = min + index * bin_width``."""

    data: np.ndarray
    min: float
    bin_width: float
    bins: int = 256

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1] if self.data.ndim > 1 else 1

    def payload_nbytes(self) -> int:
        """One byte per entry; the two float64 scale constants are excluded."""
        return int(self.data.size)

    def matmul_left(self, x) -> np.ndarray:
        """``x @ dequantize(self)`` computed on the bin indices.

        Uses ``x @ (min + w*idx) = min * rowsum(x) + w * (x @ idx)`` so the
        index matrix is never expanded to floats of the original range.
        """
        x = np.asarray(x, dtype=np.float64)
        idx = self.data.astype(np.float64)
        return self.min * x.sum(axis=-1, keepdims=True) + self.bin_width * (x @ idx)


def quantize(m, B: int = 256) -> QuantizedMatrix:
    """Map each entry to the nearest of ``B`` equally spaced values over ``[min, max]``.

    ``index = floor((x - min) / bin_width + 0.5)``, which rounds halves away
    from zero because the offset is non-negative.
    """
    if not 2 <= int(B) <= 256:
        raise ParameterError(f"bin count must be in [2, 256], got {B}")
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ParameterError("cannot quantize non-finite values")
    lo = float(m.min()) if m.size else 0.0
    hi = float(m.max()) if m.size else 0.0
    width = (hi - lo) / (B - 1)
    if width == 0.0:
        return QuantizedMatrix(np.zeros(m.shape, dtype=np.uint8), lo, 0.0, int(B))
    idx = np.floor((m - lo) / width + 0.5)
    idx = np.clip(idx, 0, B - 1).astype(np.uint8)
    return QuantizedMatrix(idx, lo, width, int(B))


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    return q.min + q.data.astype(np.float64) * q.bin_width


# LSTM weight matrices; biases stay in float
RECURRENT_WEIGHTS = ("lstm.f.Wx", "lstm.f.Wh", "lstm.b.Wx", "lstm.b.Wh")
HEAD_WEIGHTS = ("dc.W", "ic.W", "tag.W")


@dataclass
class QuantizationReport:
    tensors: dict
    float_payload_bytes: int
    quantized_payload_bytes: int

    @property
    def ratio(self) -> float:
        return self.float_payload_bytes / self.quantized_payload_bytes


def quantize_model(model, B: int = 256, include_heads: bool = False):
    """Return a copy of ``model`` with recurrent (and optionally head) weights quantized.

    The copy runs inference on the dequantized values and serializes the
    quantized tensors with the ``q8`` encoding.
    """
    names = list(RECURRENT_WEIGHTS) + (list(HEAD_WEIGHTS) if include_heads else [])
    out = copy.deepcopy(model)
    params = out.param_dict()
    tensors = {}
    for name in names:
        q = quantize(params[name].value, B)
        params[name].value[...] = dequantize(q)
        out.quantized[name] = q
        tensors[name] = q.data.size
    n = sum(tensors.values())
    return out, QuantizationReport(tensors=tensors, float_payload_bytes=4 * n, quantized_payload_bytes=n)

"""4-bit weight / 6-bit threshold quantization and shadow-parameter sync.

Weights use symmetric per-output-channel scales (``max|w| / 7``) and
round-half-away-from-zero, so the quantized values are reproducible bit for
bit. Biases live in accumulator units (``b / scale``) as 16-bit integers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neuron import THETA_MAX, THETA_MIN, ThresholdVector, round_half_away

Q_MIN = -8
Q_MAX = 7
Q_PEAK = 7
BIAS_LIMIT = 32767


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QWeights:
    q: np.ndarray  # int8, shape (out_ch, ...)
    scale: np.ndarray  # float64, shape (out_ch,)

    def dequantize(self) -> np.ndarray:
        s = self.scale.reshape((-1,) + (1,) * (self.q.ndim - 1))
        return self.q.astype(np.float64) * s

    @property
    def shape(self):
        return self.q.shape


def channel_scales(w_fp) -> np.ndarray:
    w = np.asarray(w_fp, dtype=np.float64)
    peak = np.abs(w.reshape(w.shape[0], -1)).max(axis=1)
    scale = peak / Q_PEAK
    return np.where(scale > 0, scale, 1.0)  # also catches a subnormal peak underflowing


def quantize_weights(w_fp, scale=None) -> QWeights:
    """Quantize a weight tensor whose leading axis is the output channel.

    ``scale`` may be supplied to quantize against a frozen scale; by default
    it is recomputed from the tensor.
    """
    w = np.asarray(w_fp, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise QuantizationError("non-finite weights")
    if scale is None:
        scale = channel_scales(w)
    scale = np.asarray(scale, dtype=np.float64)
    s = scale.reshape((-1,) + (1,) * (w.ndim - 1))
    q = np.clip(round_half_away(w / s), Q_MIN, Q_MAX).astype(np.int8)
    return QWeights(q=q, scale=scale)


def quantize_thresholds(t_fp) -> ThresholdVector:
    t = np.atleast_1d(np.asarray(t_fp, dtype=np.float64))
    if not np.all(np.isfinite(t)):
        raise QuantizationError("non-finite thresholds")
    return ThresholdVector.from_fp(t)


def quantize_bias(b_fp, scale) -> np.ndarray:
    """Bias in accumulator units: ``round(b / scale)`` saturated to int16."""
    b = np.asarray(b_fp, dtype=np.float64)
    q = round_half_away(b / np.asarray(scale, dtype=np.float64))
    return np.clip(q, -BIAS_LIMIT, BIAS_LIMIT).astype(np.int16)


# --- nibble packing -------------------------------------------------------

def pack_nibbles(q) -> bytes:
    """Two's-complement 4-bit nibbles, row-major, low nibble first."""
    flat = np.asarray(q).astype(np.int64).ravel()
    if flat.size and (flat.min() < Q_MIN or flat.max() > Q_MAX):
        bad = int(np.flatnonzero((flat < Q_MIN) | (flat > Q_MAX))[0])
        raise QuantizationError(f"entry {bad} = {flat[bad]} outside [{Q_MIN}, {Q_MAX}]")
    nib = (flat & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size != (count + 1) // 2:
        raise QuantizationError(f"expected {(count + 1) // 2} bytes, got {raw.size}")
    nib = np.empty(raw.size * 2, dtype=np.int8)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    nib = np.where(nib >= 8, nib - 16, nib).astype(np.int8)
    return nib[:count]


def pack_weights(qw: QWeights | np.ndarray) -> bytes:
    q = qw.q if isinstance(qw, QWeights) else qw
    return pack_nibbles(q)


def unpack_weights(data: bytes, shape) -> np.ndarray:
    count = int(np.prod(shape))
    return unpack_nibbles(data, count).reshape(shape)


# --- shadow parameters ----------------------------------------------------

@dataclass
class ShadowParams:
    """Full-precision clone of every trainable parameter, one entry per layer."""

    weights_fp: list
    thresholds_fp: list
    biases_fp: list
    encoder_alpha_fp: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "ShadowParams":
        return ShadowParams(
            [w.copy() for w in self.weights_fp],
            [t.copy() for t in self.thresholds_fp],
            [b.copy() for b in self.biases_fp],
            np.array(self.encoder_alpha_fp, dtype=np.float64),
        )

    def check_finite(self):
        for group in (self.weights_fp, self.thresholds_fp, self.biases_fp):
            for i, a in enumerate(group):
                if not np.all(np.isfinite(a)):
                    raise QuantizationError(f"non-finite shadow parameter in layer {i}")


@dataclass(frozen=True)
class QLayerParams:
    weights: QWeights
    bias: np.ndarray  # int16
    thresholds: ThresholdVector


def quantize_layer(w_fp, b_fp, t_fp) -> QLayerParams:
    qw = quantize_weights(w_fp)
    return QLayerParams(qw, quantize_bias(b_fp, qw.scale), quantize_thresholds(t_fp))


def sync_from_shadow(shadow: ShadowParams, reference=None) -> list[QLayerParams]:
    """Re-derive every quantized layer parameter from the shadow copy.

    ``reference`` (a list of ``QLayerParams``) is only used to check shapes.
    """
    shadow.check_finite()
    n = len(shadow.weights_fp)
    if not (len(shadow.thresholds_fp) == len(shadow.biases_fp) == n):
        raise QuantizationError("shadow parameter groups disagree on layer count")
    out = []
    for i in range(n):
        w, b, t = shadow.weights_fp[i], shadow.biases_fp[i], shadow.thresholds_fp[i]
        if not (len(b) == len(t) == w.shape[0]):
            raise QuantizationError(f"layer {i}: channel count mismatch")
        if reference is not None and reference[i].weights.shape != w.shape:
            raise QuantizationError(
                f"layer {i}: shadow shape {w.shape} != model {reference[i].weights.shape}"
            )
        out.append(quantize_layer(w, b, t))
    return out


@dataclass
class AuditViolation:
    layer: int | None
    kind: str
    index: int | None
    detail: str

    def __str__(self):
        where = "model" if self.layer is None else f"layer {self.layer}"
        at = "" if self.index is None else f" index {self.index}"
        return f"{where}{at}: {self.kind}: {self.detail}"


def audit_layer(i: int, p: QLayerParams) -> list[AuditViolation]:
    """Range and consistency checks for one quantized layer."""
    out = []
    q = p.weights.q.astype(np.int64)
    flat = q.ravel()
    bad = np.flatnonzero((flat < Q_MIN) | (flat > Q_MAX))
    for k in bad[:10]:
        out.append(AuditViolation(i, "weight-range", int(k), f"value {flat[k]}"))
    # the symmetric quantizer never emits -8 (|w|/scale <= 7)
    over = np.flatnonzero(np.abs(flat) > Q_PEAK)
    for k in over[:10]:
        if k not in bad:
            out.append(AuditViolation(i, "weight-unreachable", int(k),
                                      f"value {flat[k]} not producible by per-channel scale"))
    scale = p.weights.scale
    for c in np.flatnonzero(~np.isfinite(scale) | (scale <= 0)):
        out.append(AuditViolation(i, "scale", int(c), f"scale {scale[c]}"))
    tq = p.thresholds.theta_q
    for c in np.flatnonzero((tq < THETA_MIN) | (tq > THETA_MAX)):
        out.append(AuditViolation(i, "threshold-range", int(c), f"theta {tq[c]}"))
    b = np.asarray(p.bias, dtype=np.int64)
    for c in np.flatnonzero(np.abs(b) > BIAS_LIMIT):
        out.append(AuditViolation(i, "bias-range", int(c), f"bias {b[c]}"))
    return out


def audit_params(layers: list[QLayerParams]) -> list[AuditViolation]:
    out = []
    for i, p in enumerate(layers):
        out.extend(audit_layer(i, p))
    return out

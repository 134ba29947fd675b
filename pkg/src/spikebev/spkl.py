"""Reader/writer for the packed ``SPKL`` v1 model format.

Layout (little-endian throughout)::

    "SPKL"  u16 version  u16 layer_count
    per layer:
        u8 kind tag, u16 out_ch, u16 in_ch, u16 kh, u16 kw, u16 stride,
        u16 padding, u16 n_max
        f64 scale[out_ch]
        4-bit weight nibbles, ceil(out*in*kh*kw / 2) bytes
        i16 bias[out_ch]
        u8 threshold[out_ch]
    f64 encoder_alpha[in_channels of the first layer]
    f64 box_norm[10]   (5 means, then 5 spreads)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import BoxNorm, EncoderParams
from .engine import CONV, DECONV, HEAD_BOX, HEAD_KP, HEAD_ROT, KINDS, ArchConfig, LayerSpec, \
    NetworkGraph, QConvLayer, layer_specs
from .neuron import ThresholdVector
from .quant import AuditViolation, QLayerParams, QWeights, audit_params, pack_weights, \
    unpack_nibbles

MAGIC = b"SPKL"
VERSION = 1
_LAYER_HDR = struct.Struct("<B7H")


class SPKLError(ValueError):
    pass


def dumps(net: NetworkGraph) -> bytes:
    parts = [MAGIC, struct.pack("<HH", VERSION, len(net.layers))]
    for lay in net.layers:
        s, p = lay.spec, lay.params
        parts.append(_LAYER_HDR.pack(KINDS.index(s.kind), s.out_ch, s.in_ch, s.kernel, s.kernel,
                                     s.stride, s.padding, net.cfg.n_max))
        parts.append(np.asarray(p.weights.scale, dtype="<f8").tobytes())
        parts.append(pack_weights(p.weights))
        parts.append(np.asarray(p.bias, dtype="<i2").tobytes())
        parts.append(np.asarray(p.thresholds.theta_q, dtype=np.uint8).tobytes())
    parts.append(np.asarray(net.encoder.alpha, dtype="<f8").tobytes())
    parts.append(np.asarray(net.box_norm.to_array(), dtype="<f8").tobytes())
    return b"".join(parts)


def save(net: NetworkGraph, path):
    Path(path).write_bytes(dumps(net))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SPKLError(f"unexpected end of file at byte {len(self.data)} "
                            f"(needed {n} more from offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


@dataclass
class RawModel:
    """Decoded file content before consistency checks."""

    specs: list
    params: list
    n_max: int
    alpha: np.ndarray
    norm: np.ndarray
    padding_nibbles: list  # (layer, value) for odd-sized layers
    trailing: int


def parse(data: bytes) -> RawModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise SPKLError("not a SPKL file")
    rd = _Reader(data)
    rd.take(4)
    version, n_layers = struct.unpack("<HH", rd.take(4))
    if version != VERSION:
        raise SPKLError(f"unsupported SPKL version {version} (expected {VERSION})")
    specs, params, pads = [], [], []
    n_max = None
    for i in range(n_layers):
        tag, out_ch, in_ch, kh, kw, stride, padding, nm = _LAYER_HDR.unpack(rd.take(_LAYER_HDR.size))
        if tag >= len(KINDS):
            raise SPKLError(f"layer {i}: unknown kind tag {tag}")
        if kh != kw:
            raise SPKLError(f"layer {i}: non-square kernel {kh}x{kw}")
        if n_max is not None and nm != n_max:
            raise SPKLError(f"layer {i}: n_max {nm} differs from {n_max}")
        n_max = nm
        scale = rd.array("<f8", out_ch)
        count = out_ch * in_ch * kh * kw
        packed = rd.take((count + 1) // 2)
        q = unpack_nibbles(packed, count).reshape(out_ch, in_ch, kh, kw)
        if count % 2:
            pads.append((i, packed[-1] >> 4))
        bias = rd.array("<i2", out_ch)
        theta = rd.array(np.uint8, out_ch).astype(np.int64)
        specs.append(LayerSpec(_default_name(i, n_layers, KINDS[tag]), KINDS[tag],
                               in_ch, out_ch, kh, stride, padding))
        params.append(QLayerParams(QWeights(q, scale), bias.astype(np.int16),
                                   ThresholdVector.from_q(theta)))
    if not specs:
        raise SPKLError("model has no layers")
    alpha = rd.array("<f8", specs[0].in_ch)
    norm = rd.array("<f8", 10)
    return RawModel(specs, params, n_max, alpha, norm, pads, len(data) - rd.pos)


def _default_name(i, n_layers, kind):
    # provisional; the real names come from the inferred topology
    return kind if kind.startswith("head") else f"layer{i}"


def infer_config(raw: RawModel) -> ArchConfig:
    specs = raw.specs
    body = [s for s in specs if not s.kind.startswith("head")]
    heads = {s.kind: s for s in specs if s.kind.startswith("head")}
    if not body or body[0].kind != CONV or set(heads) != {HEAD_KP, HEAD_BOX, HEAD_ROT}:
        raise SPKLError("header inconsistent: missing stem or heads")
    down = [s for s in body if s.kind == CONV and s.stride == 2]
    decs = [s for s in body if s.kind == DECONV]
    depth = len(down)
    if depth == 0:
        raise SPKLError("header inconsistent: no encoder stages")
    first_dec = body.index(decs[0]) if decs else len(body)
    n_enc_ref = sum(1 for s in body[1:first_dec] if s.kind == CONV and s.stride == 1)
    n_dec_ref = sum(1 for s in body[first_dec:] if s.kind == CONV)
    if n_enc_ref % depth or n_dec_ref % depth:
        raise SPKLError("header inconsistent: uneven refinement layers per stage")
    try:
        cfg = ArchConfig(
            widths=tuple(s.out_ch for s in down), depth=depth,
            n_bins=heads[HEAD_ROT].out_ch, n_max=raw.n_max, in_channels=body[0].in_ch,
            kernel_size=body[0].kernel, deconv_kernel=decs[0].kernel if decs else 2,
            enc_refine=n_enc_ref // depth, dec_refine=n_dec_ref // depth,
        )
    except ValueError as exc:
        raise SPKLError(f"header inconsistent: {exc}") from None
    expected = layer_specs(cfg)
    if len(expected) != len(specs):
        raise SPKLError("header inconsistent: layer count does not match topology")
    for e, s in zip(expected, specs):
        if (e.kind, e.in_ch, e.out_ch, e.kernel, e.stride, e.padding) != \
                (s.kind, s.in_ch, s.out_ch, s.kernel, s.stride, s.padding):
            raise SPKLError(f"header inconsistent at layer {e.name}: {s} vs expected {e}")
    return cfg


def loads(data: bytes) -> NetworkGraph:
    raw = parse(data)
    if raw.trailing:
        raise SPKLError(f"{raw.trailing} trailing bytes after model")
    cfg = infer_config(raw)
    layers = [QConvLayer(s, p) for s, p in zip(layer_specs(cfg), raw.params)]
    return NetworkGraph(cfg, layers, EncoderParams(raw.alpha, cfg.n_max),
                        BoxNorm.from_array(raw.norm))


def load(path) -> NetworkGraph:
    return loads(Path(path).read_bytes())


def audit_bytes(data: bytes) -> list[AuditViolation]:
    """Every range, consistency and round-trip violation found in a model file."""
    try:
        raw = parse(data)
    except SPKLError as exc:
        return [AuditViolation(None, "format", None, str(exc))]
    out = audit_params(raw.params)
    for layer, nib in raw.padding_nibbles:
        if nib:
            count = int(np.prod(raw.params[layer].weights.shape))
            out.append(AuditViolation(layer, "padding-nibble", count, f"value {nib:#x}, expected 0"))
    if raw.trailing:
        out.append(AuditViolation(None, "format", None, f"{raw.trailing} trailing bytes"))
    if not np.all(np.isfinite(raw.alpha)) or np.any(raw.alpha <= 0):
        out.append(AuditViolation(None, "encoder-alpha", None, f"alphas {raw.alpha.tolist()}"))
    if not np.all(np.isfinite(raw.norm)) or np.any(raw.norm[5:] <= 0):
        out.append(AuditViolation(None, "box-norm", None, "non-finite or non-positive spread"))
    try:
        cfg = infer_config(raw)
    except SPKLError as exc:
        out.append(AuditViolation(None, "header", None, str(exc)))
        return out
    if not out:
        net = NetworkGraph(cfg, [QConvLayer(s, p) for s, p in zip(layer_specs(cfg), raw.params)],
                           EncoderParams(raw.alpha, cfg.n_max), BoxNorm.from_array(raw.norm))
        if dumps(net) != data:
            out.append(AuditViolation(None, "round-trip", None, "re-encoded bytes differ"))
    return out


def audit_file(path) -> list[AuditViolation]:
    return audit_bytes(Path(path).read_bytes())

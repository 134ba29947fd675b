"""Integer-exact spiking convolution engine and the encoder-decoder detector graph.

Everything after rate coding runs on ``int64`` arrays: spike counts are
convolved with 4-bit weights, biased, and divided by integer thresholds. The
only real-valued output is the box head, whose accumulator is multiplied by its
per-channel weight scale to recover a membrane potential in target units.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .codec import BoxNorm, EncoderParams, HeadReadout, encode_rate
from .neuron import DEFAULT_N_MAX, ThresholdVector, spike_act
from .quant import QLayerParams, ShadowParams, audit_params, quantize_layer, sync_from_shadow

CONV, DECONV, HEAD_KP, HEAD_BOX, HEAD_ROT = "conv", "deconv", "head_kp", "head_box", "head_rot"
KINDS = (CONV, DECONV, HEAD_KP, HEAD_BOX, HEAD_ROT)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple = (16, 32, 64)
    depth: int = 3
    n_bins: int = 8
    n_max: int = DEFAULT_N_MAX
    in_channels: int = 3
    kernel_size: int = 3
    deconv_kernel: int = 2
    enc_refine: int = 0
    dec_refine: int = 0
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.widths) != self.depth:
            raise ValueError(f"need one width per stage: depth={self.depth}, widths={self.widths}")
        if min(self.widths) < 1 or self.kernel_size % 2 == 0:
            raise ValueError("widths must be positive and kernel_size odd")
        if self.n_bins < 2 or self.n_max < 1:
            raise ValueError("n_bins >= 2 and n_max >= 1 required")
        if self.enc_refine < 0 or self.dec_refine < 0:
            raise ValueError("refinement counts must be >= 0")
        if self.deconv_kernel < 2 or self.deconv_kernel % 2:
            raise ValueError("deconv_kernel must be even and >= 2")

    @classmethod
    def from_dict(cls, d) -> "ArchConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ArchConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int
    push_skip: bool = False  # output is kept for a later skip merge
    merge_skip: bool = False  # output is merged with the most recent kept output

    @property
    def spiking(self) -> bool:
        return self.kind != HEAD_BOX

    @property
    def is_head(self) -> bool:
        return self.kind.startswith("head")

    @property
    def weight_shape(self):
        return (self.out_ch, self.in_ch, self.kernel, self.kernel)


def layer_specs(cfg: ArchConfig) -> list[LayerSpec]:
    """Execution order: stem, encoder stages, decoder stages (deepest first), 3 heads.

    Each encoder stage is a stride-2 SpikeConv plus ``enc_refine`` stride-1
    SpikeConvs; each decoder stage a stride-2 transposed SpikeConv, a skip
    merge, then ``dec_refine`` stride-1 SpikeConvs.
    """
    k, p = cfg.kernel_size, cfg.kernel_size // 2
    w = cfg.widths
    D = cfg.depth
    specs = [LayerSpec("stem", CONV, cfg.in_channels, w[0], k, 1, p, push_skip=True)]
    feat_ch = [w[0]]
    for i in range(D):
        cin = w[i - 1] if i > 0 else w[0]
        keep = i < D - 1
        specs.append(LayerSpec(f"enc{i}", CONV, cin, w[i], k, 2, p,
                               push_skip=keep and cfg.enc_refine == 0))
        for j in range(cfg.enc_refine):
            specs.append(LayerSpec(f"enc{i}_r{j}", CONV, w[i], w[i], k, 1, p,
                                   push_skip=keep and j == cfg.enc_refine - 1))
        feat_ch.append(w[i])
    kd = cfg.deconv_kernel
    for i in reversed(range(D)):
        c = feat_ch[i]
        specs.append(LayerSpec(f"dec{i}", DECONV, feat_ch[i + 1], c, kd, 2, (kd - 2) // 2,
                               merge_skip=True))
        for j in range(cfg.dec_refine):
            specs.append(LayerSpec(f"dec{i}_r{j}", CONV, c, c, k, 1, p))
    specs.append(LayerSpec("head_kp", HEAD_KP, w[0], 2, 1, 1, 0))
    specs.append(LayerSpec("head_box", HEAD_BOX, w[0], 5, 1, 1, 0))
    specs.append(LayerSpec("head_rot", HEAD_ROT, w[0], cfg.n_bins, 1, 1, 0))
    return specs


@dataclass
class QConvLayer:
    spec: LayerSpec
    params: QLayerParams

    @property
    def name(self):
        return self.spec.name

    @property
    def kind(self):
        return self.spec.kind

    @property
    def thresholds(self) -> ThresholdVector:
        return self.params.thresholds

    def with_thresholds(self, theta_q) -> "QConvLayer":
        return QConvLayer(self.spec, replace(self.params, thresholds=ThresholdVector.from_q(theta_q)))


@dataclass
class ActivityRecord:
    name: str
    input_spikes: int
    output_spikes: int
    synaptic_ops: int
    n_neurons: int
    n_zero: int

    @property
    def sparsity(self) -> float:
        return self.n_zero / self.n_neurons if self.n_neurons else 1.0


# --- integer kernels ---------------------------------------------------------

def conv2d_int(x, q, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Exact integer 2-D convolution (cross-correlation) of a (C, H, W) grid."""
    x = np.asarray(x, dtype=np.int64)
    q = np.asarray(q, dtype=np.int64)
    O, C, kh, kw = q.shape
    if x.shape[0] != C:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {C}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1:3]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo, C * kh * kw)
    return (q.reshape(O, -1) @ cols.T).reshape(O, Ho, Wo)


def conv_transpose2d_int(x, q, stride: int = 2, padding: int = 0) -> np.ndarray:
    """Exact integer transposed convolution; ``q`` is (out, in, k, k)."""
    x = np.asarray(x, dtype=np.int64)
    q = np.asarray(q, dtype=np.int64)
    O, C, kh, kw = q.shape
    if x.shape[0] != C:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {C}")
    H, W = x.shape[1:]
    full = np.zeros((O, (H - 1) * stride + kh, (W - 1) * stride + kw), dtype=np.int64)
    flat = x.reshape(C, -1)
    for i in range(kh):
        for j in range(kw):
            contrib = (q[:, :, i, j] @ flat).reshape(O, H, W)
            full[:, i:i + stride * H:stride, j:j + stride * W:stride] += contrib
    if padding:
        full = full[:, padding:-padding, padding:-padding]
    return full


def _conv_synops(nz, kh, kw, stride, padding, out_ch) -> int:
    nzp = np.pad(nz.astype(np.int64), ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(nzp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return int(win.sum()) * out_ch


def _deconv_synops(nz, kh, kw, stride, padding, out_ch) -> int:
    C, H, W = nz.shape
    Ho = (H - 1) * stride + kh - 2 * padding
    Wo = (W - 1) * stride + kw - 2 * padding
    per_cell = nz.sum(axis=0)
    total = 0
    for i in range(kh):
        rows = np.arange(H) * stride + i - padding
        rok = (rows >= 0) & (rows < Ho)
        for j in range(kw):
            cols = np.arange(W) * stride + j - padding
            cok = (cols >= 0) & (cols < Wo)
            total += int(per_cell[np.ix_(rok, cok)].sum())
    return total * out_ch


def _accumulate(layer: QConvLayer, spikes_in):
    s = layer.spec
    q = layer.params.weights.q
    if s.kind == DECONV:
        acc = conv_transpose2d_int(spikes_in, q, s.stride, s.padding)
        ops = _deconv_synops(spikes_in > 0, s.kernel, s.kernel, s.stride, s.padding, s.out_ch)
    else:
        acc = conv2d_int(spikes_in, q, s.stride, s.padding)
        ops = _conv_synops(spikes_in > 0, s.kernel, s.kernel, s.stride, s.padding, s.out_ch)
    acc += np.asarray(layer.params.bias, dtype=np.int64).reshape(-1, 1, 1)
    return acc, ops


def _check_input(layer: QConvLayer, spikes_in, n_max):
    x = np.asarray(spikes_in)
    if x.ndim != 3 or x.shape[0] != layer.spec.in_ch:
        raise ShapeError(f"{layer.name}: expected ({layer.spec.in_ch}, H, W), got {x.shape}")
    if x.size and (x.min() < 0 or (n_max is not None and x.max() > n_max)):
        raise ValueError(f"{layer.name}: spike counts outside [0, {n_max}]")
    return x.astype(np.int64)


def spike_conv_forward(layer: QConvLayer, spikes_in, n_max: int | None = DEFAULT_N_MAX):
    """Run one (transposed) SpikeConv layer.

    Returns ``(spikes_out, potentials, record)``. ``potentials`` is the integer
    accumulator. For the non-spiking box head ``spikes_out`` is ``None``.
    """
    x = _check_input(layer, spikes_in, n_max)
    acc, ops = _accumulate(layer, x)
    if layer.spec.spiking:
        out = spike_act(acc, layer.thresholds, n_max)
        n_zero = int(np.count_nonzero(out == 0))
        out_total = int(out.sum())
    else:
        out = None
        n_zero = int(np.count_nonzero(acc == 0))
        out_total = 0
    rec = ActivityRecord(layer.name, int(x.sum()), out_total, ops, int(acc.size), n_zero)
    return out, acc, rec


spike_deconv_forward = spike_conv_forward


def merge_skip(a, b, n_max: int | None = DEFAULT_N_MAX):
    """Saturating spike-count addition used by skip connections."""
    if a.shape != b.shape:
        raise ShapeError(f"skip shapes differ: {a.shape} vs {b.shape}")
    out = a + b
    return out if n_max is None else np.minimum(out, n_max)


def fold_batchnorm(conv_w_fp, mean, var, gamma, beta, eps: float = 1e-5, conv_b_fp=None):
    """Fold an inference-mode BatchNorm into the preceding convolution."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    w = np.asarray(conv_w_fp, dtype=np.float64)
    inv = np.asarray(gamma, dtype=np.float64) / np.sqrt(var + eps)
    folded_w = w * inv.reshape((-1,) + (1,) * (w.ndim - 1))
    b0 = 0.0 if conv_b_fp is None else np.asarray(conv_b_fp, dtype=np.float64)
    folded_b = np.asarray(beta, dtype=np.float64) + (b0 - np.asarray(mean)) * inv
    return folded_w, folded_b


# --- network -----------------------------------------------------------------

def init_shadow(cfg: ArchConfig, seed: int = 0, theta_init: float = 4.0,
                alpha_init: float | None = None, box_head_gain: float = 0.01,
                weight_init: str = "uniform") -> ShadowParams:
    """Fan-in scaled random weights, zero biases, constant thresholds.

    ``weight_init`` is "uniform" (bound 1/sqrt(fan_in)) or "normal" (std
    1/sqrt(fan_in)). A Gaussian draw leaves most quantized weights well below
    the per-channel peak of 7, which keeps layer gains inside the reachable
    threshold range. The box head starts ``box_head_gain`` times smaller so
    that its initial potentials sit near the normalised targets.
    """
    if weight_init not in ("uniform", "normal"):
        raise ValueError(f"unknown weight_init {weight_init!r}")
    rng = np.random.default_rng(seed)
    ws, ts, bs = [], [], []
    for s in layer_specs(cfg):
        fan_in = s.in_ch * s.kernel * s.kernel
        bound = 1.0 / np.sqrt(fan_in)
        if s.kind == HEAD_BOX:
            bound *= box_head_gain
        if weight_init == "normal":
            ws.append(rng.normal(0.0, bound, size=s.weight_shape))
        else:
            ws.append(rng.uniform(-bound, bound, size=s.weight_shape))
        ts.append(np.full(s.out_ch, float(theta_init)))
        bs.append(np.zeros(s.out_ch))
    alpha = np.full(cfg.in_channels, float(cfg.n_max if alpha_init is None else alpha_init))
    return ShadowParams(ws, ts, bs, alpha)


@dataclass
class NetworkGraph:
    """A quantized, immutable-at-inference detector."""

    cfg: ArchConfig
    layers: list
    encoder: EncoderParams
    box_norm: BoxNorm = field(default_factory=BoxNorm)

    @classmethod
    def from_shadow(cls, cfg: ArchConfig, shadow: ShadowParams,
                    box_norm: BoxNorm | None = None) -> "NetworkGraph":
        specs = layer_specs(cfg)
        params = sync_from_shadow(shadow)
        for s, p in zip(specs, params):
            if p.weights.shape != s.weight_shape:
                raise ShapeError(f"{s.name}: shadow weights {p.weights.shape} != {s.weight_shape}")
        if not cfg.use_bias:
            params = [replace(p, bias=np.zeros_like(p.bias)) for p in params]
        return cls(cfg, [QConvLayer(s, p) for s, p in zip(specs, params)],
                   EncoderParams(np.array(shadow.encoder_alpha_fp), cfg.n_max),
                   box_norm or BoxNorm())

    @property
    def params(self) -> list[QLayerParams]:
        return [lay.params for lay in self.layers]

    def audit(self):
        return audit_params(self.params)

    def layer(self, name) -> QConvLayer:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)

    def with_layer_thresholds(self, theta_by_layer: dict) -> "NetworkGraph":
        layers = [lay.with_thresholds(theta_by_layer[lay.name]) if lay.name in theta_by_layer
                  else lay for lay in self.layers]
        return NetworkGraph(self.cfg, layers, self.encoder, self.box_norm)

    def scaled_thresholds(self, factor: int) -> "NetworkGraph":
        """Copy with every threshold multiplied by ``factor`` (clamped to 31)."""
        return self.with_layer_thresholds({
            lay.name: np.minimum(lay.thresholds.theta_q * factor, 31) for lay in self.layers
        })


def build_network(cfg: ArchConfig | None = None, seed: int = 0, **init_kw) -> NetworkGraph:
    cfg = cfg or ArchConfig()
    return NetworkGraph.from_shadow(cfg, init_shadow(cfg, seed, **init_kw))


def forward(net: NetworkGraph, input_spikes, n_max: int | None = "cfg"):
    """Run the detector on encoded input spikes.

    Returns ``(HeadReadout, records)`` with one ActivityRecord per layer, in
    execution order.
    """
    if n_max == "cfg":
        n_max = net.cfg.n_max
    x = np.asarray(input_spikes, dtype=np.int64)
    D = net.cfg.depth
    H, W = x.shape[1:]
    if H % (2 ** D) or W % (2 ** D):
        raise ShapeError(f"input {H}x{W} not divisible by 2**depth={2 ** D}")
    records = []
    skips = []
    heads = {}
    h = x
    for layer in net.layers:
        out, acc, rec = spike_conv_forward(layer, h, n_max)
        records.append(rec)
        if layer.spec.is_head:
            heads[layer.kind] = (out, acc, layer)
            continue
        h = out
        if layer.spec.merge_skip:
            h = merge_skip(h, skips.pop(), n_max)
        if layer.spec.push_skip:
            skips.append(h)
    _, box_acc, box_layer = heads[HEAD_BOX]
    scale = box_layer.params.weights.scale.reshape(-1, 1, 1)
    readout = HeadReadout(heads[HEAD_KP][0], heads[HEAD_ROT][0],
                          box_acc.astype(np.float64) * scale)
    return readout, records


def encode_and_forward(net: NetworkGraph, bev):
    return forward(net, encode_rate(bev, net.encoder))

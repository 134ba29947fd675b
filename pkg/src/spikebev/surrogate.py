"""Differentiable twin of the integer engine used for quantization-aware training.

Each non-differentiable step (weight rounding, threshold rounding, floor in
SpikeAct and in the rate coder) is a custom autograd function. In ``hard``
mode the forward pass reproduces the integer engine exactly (all operands
are integer-valued float64, so sums are exact); in soft mode the forward
pass is the smooth surrogate whose derivative the backward rules implement,
which is what finite-difference checks compare against.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.autograd import Function

from .engine import DECONV, HEAD_BOX, HEAD_KP, HEAD_ROT, ArchConfig, layer_specs
from .neuron import THETA_MAX, THETA_MIN
from .quant import BIAS_LIMIT, Q_MAX, Q_MIN, Q_PEAK, ShadowParams

DTYPE = torch.float64


def _chan(t, ndim):
    return t.reshape((-1,) + (1,) * (ndim - 1))


def round_half_away(x):
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class QuantizeSTE(Function):
    """``clamp(round(w / scale))`` forward, ``grad / scale`` backward."""

    @staticmethod
    def forward(ctx, w, scale, lo, hi, hard):
        s = _chan(scale, w.dim())
        ctx.save_for_backward(s)
        r = w / s
        return torch.clamp(round_half_away(r), lo, hi) if hard else r

    @staticmethod
    def backward(ctx, g):
        (s,) = ctx.saved_tensors
        return g / s, None, None, None, None


class ThresholdSTE(Function):
    @staticmethod
    def forward(ctx, t, hard):
        return torch.clamp(round_half_away(t), THETA_MIN, THETA_MAX) if hard else t.clone()

    @staticmethod
    def backward(ctx, g):
        return g, None


class SpikeActFn(Function):
    """Counts ``clamp(floor(v/theta), 0, n_max)``; surrogate ``clamp(v/theta, 0, n_max)``.

    With ``open_low`` the surrogate is ``min(v/theta, n_max)``: the hard
    forward value is unchanged but negative potentials keep their gradient
    (and the soft forward goes negative to match).
    """

    @staticmethod
    def forward(ctx, v, theta, n_max, hard, open_low=False):
        th = theta.reshape(1, -1, 1, 1)
        ratio = v / th
        ctx.save_for_backward(v, th)
        ctx.n_max = n_max
        ctx.open_low = open_low
        if hard:
            return torch.clamp(torch.floor(ratio), 0, n_max)
        return torch.clamp(ratio, None if open_low else 0, n_max)

    @staticmethod
    def backward(ctx, g):
        v, th = ctx.saved_tensors
        ratio = v / th
        inside = ratio <= ctx.n_max
        if not ctx.open_low:
            inside = inside & (ratio >= 0)
        gate = inside.to(g.dtype)
        grad_v = g * gate / th
        grad_th = (-g * v / th**2 * gate).sum(dim=(0, 2, 3))
        return grad_v, grad_th, None, None, None


class EncodeFn(Function):
    """Rate coder ``clamp(floor(alpha * x), 0, n_max)`` with the soft-clamp backward."""

    @staticmethod
    def forward(ctx, x, alpha, n_max, hard):
        a = alpha.reshape(1, -1, 1, 1)
        s = a * x
        ctx.save_for_backward(x, a)
        ctx.n_max = n_max
        if hard:
            s = torch.floor(s)
        return torch.clamp(s, 0, n_max)

    @staticmethod
    def backward(ctx, g):
        x, a = ctx.saved_tensors
        s = a * x
        gate = ((s > 0) & (s < ctx.n_max)).to(g.dtype)
        return g * a * gate, (g * x * gate).sum(dim=(0, 2, 3)), None, None


def channel_scales_t(w):
    peak = w.detach().abs().reshape(w.shape[0], -1).amax(dim=1)
    scale = peak / Q_PEAK
    return torch.where(scale > 0, scale, torch.ones_like(scale))


class SurrogateNet(nn.Module):
    """Shadow parameters plus the quantized forward pass over a batch (B, C, H, W)."""

    def __init__(self, cfg: ArchConfig, shadow: ShadowParams, open_heads: bool = False):
        super().__init__()
        self.cfg = cfg
        self.open_heads = open_heads
        self.specs = layer_specs(cfg)
        t = lambda a: nn.Parameter(torch.tensor(np.asarray(a), dtype=DTYPE))
        self.weights = nn.ParameterList([t(w) for w in shadow.weights_fp])
        self.biases = nn.ParameterList([t(b) for b in shadow.biases_fp])
        self.thresholds = nn.ParameterList([t(th) for th in shadow.thresholds_fp])
        self.alpha = t(shadow.encoder_alpha_fp)
        self.hard = True
        self._frozen_scales = None

    def shadow(self) -> ShadowParams:
        c = lambda p: p.detach().cpu().numpy().copy()
        return ShadowParams([c(w) for w in self.weights], [c(th) for th in self.thresholds],
                            [c(b) for b in self.biases], c(self.alpha))

    def load_shadow(self, shadow: ShadowParams):
        with torch.no_grad():
            for dst, src in zip(self.weights, shadow.weights_fp):
                dst.copy_(torch.from_numpy(np.asarray(src)))
            for dst, src in zip(self.biases, shadow.biases_fp):
                dst.copy_(torch.from_numpy(np.asarray(src)))
            for dst, src in zip(self.thresholds, shadow.thresholds_fp):
                dst.copy_(torch.from_numpy(np.asarray(src)))
            self.alpha.copy_(torch.from_numpy(np.asarray(shadow.encoder_alpha_fp)))

    def freeze_scales(self, on: bool = True):
        """Pin per-channel weight scales to their current values (for gradient checks)."""
        self._frozen_scales = [channel_scales_t(w) for w in self.weights] if on else None

    def _scale(self, i):
        if self._frozen_scales is not None:
            return self._frozen_scales[i]
        return channel_scales_t(self.weights[i])

    def layer(self, i, x):
        spec = self.specs[i]
        w = self.weights[i]
        scale = self._scale(i)
        q = QuantizeSTE.apply(w, scale, Q_MIN, Q_MAX, self.hard)
        if spec.kind == DECONV:
            acc = F.conv_transpose2d(x, q.transpose(0, 1), stride=spec.stride, padding=spec.padding)
        else:
            acc = F.conv2d(x, q, stride=spec.stride, padding=spec.padding)
        if self.cfg.use_bias:
            b = QuantizeSTE.apply(self.biases[i], scale, -BIAS_LIMIT, BIAS_LIMIT, self.hard)
            acc = acc + b.reshape(1, -1, 1, 1)
        if spec.kind == HEAD_BOX:
            return acc * scale.reshape(1, -1, 1, 1), acc
        theta = ThresholdSTE.apply(self.thresholds[i], self.hard)
        open_low = self.open_heads and spec.is_head
        return SpikeActFn.apply(acc, theta, self.cfg.n_max, self.hard, open_low), acc

    def encode(self, bev):
        return EncodeFn.apply(bev, self.alpha, self.cfg.n_max, self.hard)

    def forward(self, bev, return_potentials: bool = False):
        """Head outputs: keypoint and rotation spike counts, box potentials."""
        n_max = self.cfg.n_max
        pots, skips, heads = [], [], {}
        h = self.encode(bev)
        for i, spec in enumerate(self.specs):
            out, acc = self.layer(i, h)
            pots.append(acc)
            if spec.is_head:
                heads[spec.kind] = out
                continue
            h = out
            if spec.merge_skip:
                h = torch.clamp(h + skips.pop(), max=n_max)
            if spec.push_skip:
                skips.append(h)
        out = {"keypoint": heads[HEAD_KP], "box": heads[HEAD_BOX], "rotation": heads[HEAD_ROT]}
        if return_potentials:
            out["potentials"] = pots
        return out

    def project_(self):
        """Keep shadow thresholds near the representable range and alphas positive."""
        with torch.no_grad():
            for t in self.thresholds:
                t.clamp_(THETA_MIN - 0.5, THETA_MAX + 0.5)
            self.alpha.clamp_(min=1e-3)

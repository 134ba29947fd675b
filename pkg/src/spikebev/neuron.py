"""Integrate-and-Fire membrane arithmetic and the SpikeAct activation.

Potentials are plain numpy arrays shaped (C, H, W) (or anything whose leading
axis is the channel axis). Spike counts are non-negative ``int64`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THETA_MIN = 1
THETA_MAX = 31
DEFAULT_N_MAX = 63


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class ThresholdVector:
    """Per-output-channel firing thresholds: shadow reals plus quantized ints."""

    theta_fp: np.ndarray
    theta_q: np.ndarray

    @classmethod
    def from_fp(cls, theta_fp) -> "ThresholdVector":
        theta_fp = np.atleast_1d(np.asarray(theta_fp, dtype=np.float64))
        theta_q = np.clip(round_half_away(theta_fp), THETA_MIN, THETA_MAX).astype(np.int64)
        return cls(theta_fp=theta_fp, theta_q=theta_q)

    @classmethod
    def from_q(cls, theta_q) -> "ThresholdVector":
        theta_q = np.atleast_1d(np.asarray(theta_q, dtype=np.int64))
        return cls(theta_fp=theta_q.astype(np.float64), theta_q=theta_q)

    def __len__(self) -> int:
        return len(self.theta_q)


def _channel_view(theta_q, ndim):
    return np.asarray(theta_q).reshape((-1,) + (1,) * (ndim - 1))


def if_integrate(v_prev, weighted_input):
    """One leak-free IF update: the new potential is the old plus the input."""
    v_prev = np.asarray(v_prev)
    weighted_input = np.asarray(weighted_input)
    if v_prev.shape != weighted_input.shape:
        raise ValueError(
            f"shape mismatch: potential {v_prev.shape} vs input {weighted_input.shape}"
        )
    return v_prev + weighted_input


class IFNeuronState:
    """Mutable membrane state for one inference window.

    ``integrate`` accumulates weighted input; ``fire`` converts the potential to
    a spike count and resets it, so a second ``fire`` without new input is silent.
    """

    def __init__(self, shape, dtype=np.int64):
        self.v = np.zeros(shape, dtype=dtype)

    def integrate(self, weighted_input):
        self.v = if_integrate(self.v, weighted_input)
        return self.v

    def fire(self, theta: ThresholdVector, n_max: int = DEFAULT_N_MAX):
        spikes = spike_act(self.v, theta, n_max)
        self.v = np.zeros_like(self.v)
        return spikes


def spike_act(v, theta: ThresholdVector, n_max: int | None = DEFAULT_N_MAX):
    """Spike count per neuron: ``clamp(floor(v / theta_q), 0, n_max)``.

    ``n_max=None`` disables the upper clamp (test mode). Integer potentials are
    divided with integer floor division so the result is exact.
    """
    v = np.asarray(v)
    th = _channel_view(theta.theta_q, v.ndim)
    if np.any(theta.theta_q < 1):
        raise ValueError("thresholds must be >= 1")
    if np.issubdtype(v.dtype, np.integer):
        counts = np.floor_divide(v, th)
    else:
        counts = np.floor(v / th)
    counts = np.maximum(counts, 0)
    if n_max is not None:
        counts = np.minimum(counts, n_max)
    return counts.astype(np.int64)


def spike_act_grad(v, theta: ThresholdVector, upstream_grad, n_max: int = DEFAULT_N_MAX,
                   mode: str = "copy"):
    """Backward rule of SpikeAct.

    The active region is ``0 <= v/theta_q <= n_max``. In ``"copy"`` mode the
    upstream gradient is passed through unchanged there (straight-through); in
    ``"soft"`` mode it is divided by ``theta_q``, which is the exact derivative
    of the surrogate ``clamp(v/theta, 0, n_max)``. ``grad_theta`` is always the
    surrogate derivative ``-g * v / theta_q**2`` summed per channel.
    """
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if v.shape != g.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {g.shape}")
    th = _channel_view(theta.theta_q, v.ndim).astype(np.float64)
    ratio = v / th
    active = (ratio >= 0) & (ratio <= n_max)
    if mode == "copy":
        grad_v = np.where(active, g, 0.0)
    elif mode == "soft":
        grad_v = np.where(active, g / th, 0.0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    per_elem = np.where(active, -g * v / th**2, 0.0)
    grad_theta = per_elem.reshape(per_elem.shape[0], -1).sum(axis=1)
    return grad_v, grad_theta

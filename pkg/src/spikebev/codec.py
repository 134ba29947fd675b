"""Rate coding of BEV rasters and decoding of the three detection heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import GridMeta, bin_center_yaw
from .neuron import DEFAULT_N_MAX


@dataclass
class EncoderParams:
    alpha: np.ndarray  # one positive scale per input channel
    n_max: int = DEFAULT_N_MAX

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if np.any(self.alpha <= 0) or not np.all(np.isfinite(self.alpha)):
            raise ValueError("encoder alpha must be positive and finite")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


def _alpha_view(alpha, ndim):
    return np.asarray(alpha).reshape((-1,) + (1,) * (ndim - 1))


def encode_rate(bev, p: EncoderParams) -> np.ndarray:
    """Spike counts ``clamp(floor(alpha_c * value), 0, n_max)`` per channel and cell.

    ``bev`` is a ``BEVGrid`` or a (C, H, W) array.
    """
    x = np.asarray(getattr(bev, "data", bev), dtype=np.float64)
    a = _alpha_view(p.alpha, x.ndim)
    return np.clip(np.floor(a * x), 0, p.n_max).astype(np.int64)


def encode_rate_grad(bev, p: EncoderParams, upstream_grad):
    """Gradients of the soft coder ``clamp(alpha * value, 0, n_max)``.

    Inside the open clamp interval ``d/dvalue = alpha`` and ``d/dalpha = value``;
    outside (including a zero input) both vanish.
    """
    x = np.asarray(getattr(bev, "data", bev), dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    a = _alpha_view(p.alpha, x.ndim)
    s = a * x
    inside = (s > 0) & (s < p.n_max)
    grad_bev = np.where(inside, g * a, 0.0)
    grad_alpha = np.where(inside, g * x, 0.0).reshape(x.shape[0], -1).sum(axis=1)
    return grad_bev, grad_alpha


@dataclass
class BoxNorm:
    """Per-dimension affine normalisation of the 5 box targets (h, w, l, dx, dy)."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(5))
    spread: np.ndarray = field(default_factory=lambda: np.ones(5))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(5)
        self.spread = np.asarray(self.spread, dtype=np.float64).reshape(5)

    @classmethod
    def fit(cls, values) -> "BoxNorm":
        """Zero-mean / unit-range statistics from an (N, 5) sample of targets."""
        v = np.asarray(values, dtype=np.float64).reshape(-1, 5)
        if len(v) == 0:
            return cls()
        mean = v.mean(axis=0)
        spread = v.max(axis=0) - v.min(axis=0)
        spread = np.where(spread > 1e-6, spread, 1.0)
        return cls(mean, spread)

    def normalize(self, box_map):
        box_map = np.asarray(box_map, dtype=np.float64)
        shape = (5,) + (1,) * (box_map.ndim - 1)
        return (box_map - self.mean.reshape(shape)) / self.spread.reshape(shape)

    def denormalize(self, pot):
        pot = np.asarray(pot, dtype=np.float64)
        shape = (5,) + (1,) * (pot.ndim - 1)
        return pot * self.spread.reshape(shape) + self.mean.reshape(shape)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.mean, self.spread])

    @classmethod
    def from_array(cls, a) -> "BoxNorm":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:5], a[5:])


@dataclass
class HeadReadout:
    keypoint_spikes: np.ndarray  # (2, H, W): background, foreground
    rotation_spikes: np.ndarray  # (R, H, W)
    box_potentials: np.ndarray  # (5, H, W), normalised units

    @property
    def n_bins(self) -> int:
        return self.rotation_spikes.shape[0]


@dataclass
class Detection:
    center: tuple  # (x, y) metres
    dims: tuple  # (h, w, l) metres
    yaw_bin: int
    score: float
    n_bins: int = 8

    @property
    def yaw(self) -> float:
        return bin_center_yaw(self.yaw_bin, self.n_bins)

    def bev(self) -> tuple:
        return (float(self.center[0]), float(self.center[1]), float(self.dims[1]),
                float(self.dims[2]), self.yaw)

    def to_line(self) -> str:
        cx, cy = self.center
        h, w, l = self.dims
        return f"{cx:.4f} {cy:.4f} {h:.4f} {w:.4f} {l:.4f} {self.yaw_bin:d} {self.score:.4f}"

    @classmethod
    def from_line(cls, line: str, n_bins: int = 8) -> "Detection":
        f = line.split()
        if len(f) != 7:
            raise ValueError(f"expected 7 fields, got {len(f)}: {line!r}")
        return cls((float(f[0]), float(f[1])), (float(f[2]), float(f[3]), float(f[4])),
                   int(f[5]), float(f[6]), n_bins)


def write_detections(dets, path):
    with open(path, "w") as fh:
        for d in dets:
            fh.write(d.to_line() + "\n")


def read_detections(path, n_bins: int = 8) -> list:
    with open(path) as fh:
        return [Detection.from_line(ln, n_bins) for ln in fh if ln.strip()]


def _peak_mask(fg: np.ndarray) -> np.ndarray:
    """True where ``fg`` is the 3x3 maximum, ties kept only at the lowest row-major index."""
    H, W = fg.shape
    pad = np.full((H + 2, W + 2), -1, dtype=np.int64)
    pad[1:-1, 1:-1] = fg
    keep = np.ones((H, W), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = pad[1 + dr:1 + dr + H, 1 + dc:1 + dc + W]
            earlier = dr < 0 or (dr == 0 and dc < 0)
            # a neighbour that comes earlier wins ties; a later one must be strictly smaller
            keep &= (nb < fg) if earlier else (nb <= fg)
    return keep


def decode_keypoints(readout: HeadReadout, min_margin: int = 1) -> list:
    """Peak cells with ``fg - bg >= min_margin``; returns [((row, col), score)]."""
    bg = np.asarray(readout.keypoint_spikes[0], dtype=np.int64)
    fg = np.asarray(readout.keypoint_spikes[1], dtype=np.int64)
    cand = (fg - bg >= min_margin) & (fg > 0) & _peak_mask(fg)
    out = []
    for r, c in zip(*np.nonzero(cand)):
        total = fg[r, c] + bg[r, c]
        score = float(fg[r, c] / total) if total else 0.0
        out.append(((int(r), int(c)), score))
    return out


@dataclass
class DecodeStats:
    dropped: int = 0


def decode_boxes(readout: HeadReadout, keypoints, meta: GridMeta, norm: BoxNorm | None = None,
                 stats: DecodeStats | None = None) -> list:
    norm = norm or BoxNorm()
    stats = stats if stats is not None else DecodeStats()
    R = readout.n_bins
    dets = []
    for (r, c), score in keypoints:
        vals = norm.denormalize(readout.box_potentials[:, r, c])
        h, w, l, dx, dy = (float(v) for v in vals)
        if min(h, w, l) <= 0:
            stats.dropped += 1
            continue
        x0, y0 = meta.cell_center(r, c)
        cx = float(x0) + dx * meta.cell_size
        cy = float(y0) + dy * meta.cell_size
        yaw_bin = int(np.argmax(readout.rotation_spikes[:, r, c]))  # first max wins
        dets.append(Detection((cx, cy), (h, w, l), yaw_bin, score, R))
    return dets


def ideal_readout(targets, norm: BoxNorm | None = None, n_bins: int = 8,
                  fg_spikes: int = 10) -> HeadReadout:
    """Head outputs a perfect network would produce for the given target maps."""
    norm = norm or BoxNorm()
    kp = targets.keypoint_map.astype(np.int64)
    H, W = kp.shape
    kps = np.zeros((2, H, W), dtype=np.int64)
    kps[1] = kp * fg_spikes
    rot = np.zeros((n_bins, H, W), dtype=np.int64)
    rr, cc = np.nonzero(kp)
    rot[targets.rotation_map[rr, cc], rr, cc] = fg_spikes
    pot = np.where(kp[None] > 0, norm.normalize(targets.box_map), 0.0)
    return HeadReadout(kps, rot, pot)

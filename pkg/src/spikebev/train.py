"""Quantization-aware training with a full-precision shadow model.

Each step quantizes the shadow parameters, runs the spiking forward pass with
the quantized values, back-propagates through the surrogate rules, updates the
shadow copy and re-quantizes.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import spkl
from .codec import BoxNorm
from .engine import ArchConfig, NetworkGraph, init_shadow
from .evaluation import activity_report, merge_activity
from .pipeline import SceneDataset, detect_many
from .evaluation import average_precision
from .quant import QLayerParams, sync_from_shadow
from .neuron import THETA_MAX, THETA_MIN
from .surrogate import DTYPE, SurrogateNet

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingError(RuntimeError):
    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot or {}


@dataclass
class LossWeights:
    w_kp: float = 1.0
    w_box: float = 1.0
    w_rot: float = 1.0
    gamma: float = 2.0
    alpha: float = 0.25
    pos_weight_cap: float = 100.0
    kp_sigma: float = 0.0  # >0: Gaussian penalty reduction for negatives near centers
    neg_beta: float = 4.0
    reg_radius: int = 0  # box/rotation supervised within this Chebyshev radius of a center

    def __post_init__(self):
        if min(self.w_kp, self.w_box, self.w_rot) < 0 or max(self.w_kp, self.w_box, self.w_rot) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")
        if self.gamma < 0 or not 0 < self.alpha < 1 + 1e-12:
            raise ValueError("need gamma >= 0 and alpha in (0, 1]")
        if self.kp_sigma < 0 or self.reg_radius < 0:
            raise ValueError("kp_sigma and reg_radius must be >= 0")


# Desk-scale recipe: what TrainConfig uses when ``arch`` / ``loss`` are not
# given. Partial dicts in ``from_dict`` are merged on top of these.
DESK_ARCH = {"dec_refine": 1, "deconv_kernel": 4}
DESK_LOSS = {"w_kp": 20.0, "w_box": 20.0, "kp_sigma": 1.0, "reg_radius": 1}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9  # sgd only
    optimizer: str = "adam"
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    theta_init: float = 4.0  # used when calibrate_scenes == 0
    weight_init: str = "normal"
    box_head_gain: float = 0.01
    calibrate_scenes: int = 16  # >0: data-driven threshold init on this many scenes
    calib_quantile: float = 0.99
    calib_body_spikes: float = 48.0
    calib_head_spikes: float = 8.0
    open_heads: bool = True
    theta_lr_scale: float = 10.0
    alpha_lr_scale: float = 1.0
    checkpoint_every: int = 1
    min_margin: int = 1
    ema_decay: float = 0.0  # >0: export a running average of the shadow parameters
    loss: LossWeights = field(default_factory=lambda: LossWeights(**DESK_LOSS))
    arch: ArchConfig = field(default_factory=lambda: ArchConfig(**DESK_ARCH))

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        known = {k: d.pop(k) for k in list(d) if k in cls.__dataclass_fields__}
        if "loss" in known and isinstance(known["loss"], dict):
            known["loss"] = LossWeights(**{**DESK_LOSS, **known["loss"]})
        if "arch" in known and isinstance(known["arch"], dict):
            known["arch"] = ArchConfig.from_dict({**DESK_ARCH, **known["arch"]})
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d


# --- losses (numpy reference forms) --------------------------------------------

def focal_loss(pred_prob, target, gamma: float = 2.0, alpha: float = 0.25):
    """Element-wise focal loss ``-alpha (1-p_t)^gamma ln p_t``."""
    p = np.clip(np.asarray(pred_prob, dtype=np.float64), EPS, 1 - EPS)
    t = np.asarray(target)
    pt = np.where(t == 1, p, 1 - p)
    return -alpha * (1 - pt) ** gamma * np.log(pt)


def positive_weights(target, cap: float = 100.0):
    t = np.asarray(target)
    n_pos = int((t == 1).sum())
    n_neg = t.size - n_pos
    wpos = min(n_neg / n_pos, cap) if n_pos else 1.0
    return np.where(t == 1, wpos, 1.0)


def weighted_focal(pred_prob, target, gamma=2.0, alpha=0.25, cap=100.0) -> float:
    """Focal loss averaged over cells with positives up-weighted by the neg/pos ratio."""
    w = positive_weights(target, cap)
    return float((w * focal_loss(pred_prob, target, gamma, alpha)).sum() / w.sum())


def mse_loss(pred, target, keypoint_mask) -> float:
    """Mean squared error over masked cells and all 5 box channels."""
    m = np.asarray(keypoint_mask, dtype=bool)
    if not m.any():
        return 0.0
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((d[..., m] ** 2).mean()) if d.ndim == m.ndim + 1 else float((d[m] ** 2).mean())


# --- dense training targets ----------------------------------------------------

@dataclass
class DenseTargets:
    """Per-cell supervision derived from the single-cell keypoint maps.

    ``heat`` is 1 at centers and decays as a Gaussian around them (0 with
    ``sigma == 0``); ``reg_mask`` marks cells whose box and rotation outputs are
    supervised. Box offsets are the residual from each cell to its object's
    center, so decoding at any supervised cell lands on the same center.
    """

    keypoint: np.ndarray  # (N, H, W) uint8
    heat: np.ndarray  # (N, H, W)
    reg_mask: np.ndarray  # (N, H, W) bool
    box: np.ndarray  # (N, 5, H, W), metric dims, offsets in cells
    rotation: np.ndarray  # (N, H, W)


def dense_targets(data: SceneDataset, sigma: float = 0.0, radius: int = 0) -> DenseTargets:
    N = len(data)
    H, W = data.meta.shape
    heat = data.keypoint.astype(np.float64)
    mask = data.keypoint > 0
    box = data.box.copy()
    rot = data.rotation.copy()
    if sigma <= 0 and radius <= 0:
        return DenseTargets(data.keypoint, heat, mask, box, rot)
    rr, cc = np.mgrid[0:H, 0:W]
    for n in range(N):
        best = np.full((H, W), np.inf)
        for r, c in zip(*np.nonzero(data.keypoint[n])):
            fr, fc = data.box[n, 3, r, c], data.box[n, 4, r, c]
            dr, dc = (r + fr) - rr, (c + fc) - cc  # cell -> true center, in cells
            d2 = dr ** 2 + dc ** 2
            if sigma > 0:
                heat[n] = np.maximum(heat[n], np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * sigma ** 2)))
            near = (np.abs(rr - r) <= radius) & (np.abs(cc - c) <= radius) & (d2 < best)
            best[near] = d2[near]
            mask[n] |= near
            box[n, :3, near] = data.box[n, :3, r, c]
            box[n, 3, near] = dr[near]
            box[n, 4, near] = dc[near]
            rot[n, near] = data.rotation[n, r, c]
    return DenseTargets(data.keypoint, heat, mask, box, rot)


# --- losses (torch, used by the trainer) ----------------------------------------

def _focal_from_logp(logp_t, gamma, alpha):
    # log-space form: same value as the clamped formula inside [eps, 1-eps],
    # but keeps a gradient when a wrong class dominates
    pt = torch.exp(logp_t)
    return -alpha * (1 - pt) ** gamma * logp_t


def total_loss(out, kp_t, box_t, rot_t, lw: LossWeights, heat=None, reg_mask=None):
    """Weighted keypoint/rotation focal losses plus the box MSE.

    Spike counts (or their soft surrogates) act as logits of a per-cell
    softmax over classes. ``heat`` scales negative cells by
    ``(1 - heat)^neg_beta``; ``reg_mask`` widens the box/rotation supervision
    beyond the keypoint cells.
    """
    logp = torch.log_softmax(out["keypoint"], dim=1)
    target = kp_t.to(DTYPE)
    n_pos = target.sum()
    n_neg = target.numel() - n_pos
    wpos = torch.clamp(n_neg / n_pos, max=lw.pos_weight_cap) if n_pos > 0 else torch.tensor(1.0)
    neg_w = torch.ones_like(target) if heat is None else (1 - heat) ** lw.neg_beta
    w = torch.where(target > 0, wpos.to(DTYPE), neg_w)
    logp_t = torch.where(target > 0, logp[:, 1], logp[:, 0])
    l_kp = (w * _focal_from_logp(logp_t, lw.gamma, lw.alpha)).sum() / w.sum()

    mask = kp_t > 0 if reg_mask is None else reg_mask
    if mask.any():
        rot_logits = out["rotation"].permute(0, 2, 3, 1)[mask]  # (K, R)
        rlogp = torch.log_softmax(rot_logits, dim=1)
        lp_rot = rlogp.gather(1, rot_t[mask].reshape(-1, 1)).squeeze(1)
        l_rot = _focal_from_logp(lp_rot, lw.gamma, lw.alpha).mean()
        pred_box = out["box"].permute(0, 2, 3, 1)[mask]
        tgt_box = box_t.permute(0, 2, 3, 1)[mask]
        l_box = ((pred_box - tgt_box) ** 2).mean()
    else:
        l_rot = l_box = torch.zeros((), dtype=DTYPE)
    total = lw.w_kp * l_kp + lw.w_rot * l_rot + lw.w_box * l_box
    return total, {"kp": float(l_kp.detach()), "rot": float(l_rot.detach()),
                   "box": float(l_box.detach())}


# --- state and steps ----------------------------------------------------------

@dataclass
class TrainState:
    model: SurrogateNet
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    step: int = 0
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    quantized: list = field(default_factory=list)
    ema: dict | None = None  # name -> running average of that shadow parameter

    @property
    def shadow(self):
        return self.model.shadow()

    def averaged_shadow(self):
        """Shadow parameters with the running averages swapped in (raw ones if none)."""
        if not self.ema:
            return self.model.shadow()
        params = dict(self.model.named_parameters())
        with torch.no_grad():
            saved = {k: p.detach().clone() for k, p in params.items()}
            for k, p in params.items():
                p.copy_(self.ema[k])
            out = self.model.shadow()
            for k, p in params.items():
                p.copy_(saved[k])
        return out


def make_optimizer(model: SurrogateNet, cfg: TrainConfig):
    groups = [
        {"params": list(model.weights) + list(model.biases), "lr": cfg.lr},
        {"params": list(model.thresholds), "lr": cfg.lr * cfg.theta_lr_scale},
        {"params": [model.alpha], "lr": cfg.lr * cfg.alpha_lr_scale},
    ]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(groups, lr=cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def calibrate_thresholds(model: SurrogateNet, bev, quantile=0.99, body_spikes=48.0,
                         head_spikes=8.0):
    """Set each channel's threshold so its ``quantile`` positive potential fires
    ``body_spikes`` (``head_spikes`` for classification heads) spikes.

    Layers are visited in execution order, so every layer sees inputs produced
    by already-calibrated predecessors. Thresholds are clamped to the
    representable range.
    """
    x = torch.as_tensor(bev, dtype=DTYPE)
    hard = model.hard
    model.hard = True
    with torch.no_grad():
        for i, spec in enumerate(model.specs):
            if not spec.spiking:
                continue
            acc = model(x, return_potentials=True)["potentials"][i]
            per_ch = acc.transpose(0, 1).reshape(acc.shape[1], -1)
            target = head_spikes if spec.is_head else body_spikes
            theta = model.thresholds[i].clone()
            for c in range(per_ch.shape[0]):
                pos = per_ch[c][per_ch[c] > 0]
                if len(pos):
                    theta[c] = torch.quantile(pos, quantile) / target
            model.thresholds[i].copy_(torch.clamp(theta, THETA_MIN, THETA_MAX))
    model.hard = hard
    return model


def init_state(cfg: TrainConfig, shadow=None, calib_bev=None) -> TrainState:
    """Fresh training state; ``calib_bev`` (B, C, H, W) enables threshold calibration."""
    torch.manual_seed(cfg.seed)
    shadow = shadow or init_shadow(cfg.arch, cfg.seed, theta_init=cfg.theta_init,
                                   weight_init=cfg.weight_init, box_head_gain=cfg.box_head_gain)
    model = SurrogateNet(cfg.arch, shadow, open_heads=cfg.open_heads)
    if calib_bev is not None and len(calib_bev):
        calibrate_thresholds(model, calib_bev, cfg.calib_quantile, cfg.calib_body_spikes,
                             cfg.calib_head_spikes)
        shadow = model.shadow()
    state = TrainState(model, make_optimizer(model, cfg), cfg)
    state.quantized = sync_from_shadow(shadow)
    if cfg.ema_decay > 0:
        state.ema = {k: p.detach().clone() for k, p in model.named_parameters()}
    return state


def fit_box_norm(targets: DenseTargets) -> BoxNorm:
    n, r, c = np.nonzero(targets.reg_mask)
    return BoxNorm.fit(targets.box[n, :, r, c])


def batch_tensors(data: SceneDataset, idx, norm, targets: DenseTargets | None = None):
    """(bev, keypoint, normalised box, rotation, heat, reg_mask) tensors for ``idx``."""
    t = targets or dense_targets(data.subset(idx))
    if targets is not None:
        t = DenseTargets(*(a[idx] for a in (t.keypoint, t.heat, t.reg_mask, t.box, t.rotation)))
    bev = torch.from_numpy(data.bev[idx]).to(DTYPE)
    kp = torch.from_numpy(t.keypoint.astype(np.int64))
    box = torch.from_numpy(np.stack([norm.normalize(b) for b in t.box])).to(DTYPE)
    return (bev, kp, box, torch.from_numpy(t.rotation), torch.from_numpy(t.heat).to(DTYPE),
            torch.from_numpy(t.reg_mask))


def train_step(state: TrainState, batch) -> tuple[TrainState, float]:
    """One shadow-model update. ``batch`` is (bev, keypoint, box_norm, rotation) tensors."""
    bev, kp, box, rot, *extra = batch
    state.quantized = sync_from_shadow(state.model.shadow())
    state.model.hard = True
    out = state.model(bev)
    loss, parts = total_loss(out, kp, box, rot, state.cfg.loss, *extra)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at step {state.step}",
                            {"step": state.step, "parts": parts})
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.model.project_()
    state.quantized = sync_from_shadow(state.model.shadow())
    if state.ema is not None:
        d = state.cfg.ema_decay
        with torch.no_grad():
            for k, p in state.model.named_parameters():
                state.ema[k].mul_(d).add_(p, alpha=1 - d)
    state.step += 1
    state.loss_history.append(value)
    return state, value


def export_network(state: TrainState, norm) -> NetworkGraph:
    """Quantized network from the averaged shadow when ``ema_decay`` > 0, else the raw one."""
    return NetworkGraph.from_shadow(state.cfg.arch, state.averaged_shadow(), norm)


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(state: TrainState, norm, path, extra=None):
    torch.save({
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "loss_history": list(state.loss_history),
        "ema": state.ema,
        "norm": norm.to_array().tolist(),
        "config": state.cfg.to_dict(),
        "extra": extra or {},
    }, path)


def load_checkpoint(path, cfg: TrainConfig | None = None):
    from .codec import BoxNorm
    ck = torch.load(path, weights_only=False)
    cfg = cfg or TrainConfig.from_dict(ck["config"])
    state = init_state(cfg)
    state.model.load_state_dict(ck["model"])
    state.optimizer.load_state_dict(ck["optimizer"])
    state.step, state.epoch = ck["step"], ck["epoch"]
    state.loss_history = list(ck["loss_history"])
    if ck.get("ema") is not None:
        state.ema = ck["ema"]
    state.quantized = sync_from_shadow(state.model.shadow())
    return state, BoxNorm.from_array(ck["norm"]), ck.get("extra", {})


# --- loop ---------------------------------------------------------------------------

def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def validate(net: NetworkGraph, data: SceneDataset, min_margin: int = 1) -> dict:
    results = detect_many(net, data.bev, data.meta, min_margin, with_activity=True)
    dets = [d for d, _ in results]
    res = average_precision(dets, data.labels, (0.5, 0.7))
    act = merge_activity(a for _, a in results)
    return {
        "AP@0.5": res.ap[0.5]["easy"], "AP@0.7": res.ap[0.7]["easy"],
        "per_layer_mean_sparsity": act.get("per_layer_mean_sparsity", {}),
    }


def train(cfg: TrainConfig, train_data: SceneDataset, out_dir=None, val_data=None,
          resume_from=None, on_epoch=None, stop_after_epoch=None):
    """Run ``cfg.epochs`` epochs; returns ``(network, report)``.

    Writes ``model.spkl``, ``report.json`` and per-epoch checkpoints when
    ``out_dir`` is given. ``on_epoch(epoch, state, net)`` is the validation hook.
    """
    if len(train_data) == 0:
        raise ValueError("training dataset is empty")
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    targets = dense_targets(train_data, cfg.loss.kp_sigma, cfg.loss.reg_radius)
    if resume_from:
        state, norm, extra = load_checkpoint(resume_from, cfg)
        epochs_log = list(extra.get("epochs", []))
    else:
        calib = train_data.bev[:cfg.calibrate_scenes] if cfg.calibrate_scenes else None
        state = init_state(cfg, calib_bev=calib)
        norm = fit_box_norm(targets)
        epochs_log = []

    n = len(train_data)
    bs = max(1, cfg.batch_size)
    last_good = None
    while state.epoch < cfg.epochs:
        order = epoch_order(cfg.seed, state.epoch, n)
        losses = []
        for start in range(0, n, bs):
            batch = batch_tensors(train_data, order[start:start + bs], norm, targets)
            try:
                state, loss = train_step(state, batch)
            except TrainingError:
                if out and last_good:
                    log.error("non-finite loss; last good checkpoint kept at %s", last_good)
                raise
            losses.append(loss)
        state.epoch += 1
        net = export_network(state, norm)
        entry = {"epoch": state.epoch, "loss": float(np.mean(losses))}
        if val_data is not None and len(val_data):
            entry.update(validate(net, val_data, cfg.min_margin))
        epochs_log.append(entry)
        log.info("epoch %d loss %.4f %s", state.epoch, entry["loss"],
                 {k: v for k, v in entry.items() if k.startswith("AP")})
        if on_epoch is not None:
            on_epoch(state.epoch, state, net)
        if out and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            last_good = out / "checkpoints" / f"epoch_{state.epoch:04d}.pt"
            save_checkpoint(state, norm, last_good, {"epochs": epochs_log})
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break

    net = export_network(state, norm)
    report = {"config": cfg.to_dict(), "steps": state.step, "epochs": epochs_log}
    if out:
        spkl.save(net, out / "model.spkl")
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return net, report, state

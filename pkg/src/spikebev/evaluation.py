"""Rotated BEV IoU, interpolated average precision and spike-activity reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ingest import DIFFICULTIES

N_RECALL_POINTS = 40


# --- rotated IoU -----------------------------------------------------------

def box_corners(box) -> np.ndarray:
    """Counter-clockwise corners of a (cx, cy, w, l, yaw) footprint.

    ``l`` runs along the heading direction, ``w`` across it.
    """
    cx, cy, w, l, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2.0, w / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = np.asarray(poly, dtype=np.float64).T
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _signed_area(poly) -> float:
    x, y = np.asarray(poly, dtype=np.float64).T
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clip) -> list:
    """Sutherland-Hodgman clipping of ``subject`` against convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
                if sq < 0:
                    t = sp / (sp - sq)
                    out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
            elif sq >= 0:
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def rotated_iou(a, b) -> float:
    """IoU of two rotated rectangles given as (cx, cy, w, l, yaw)."""
    a = tuple(float(v) for v in a)
    b = tuple(float(v) for v in b)
    if a > b:  # fixed argument order makes the result exactly symmetric
        a, b = b, a
    area_a, area_b = a[2] * a[3], b[2] * b[3]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    # cheap rejection on circumscribed circles
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    pa, pb = box_corners(a), box_corners(b)
    inter = polygon_area(clip_polygon(pa, pb))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def monte_carlo_iou(a, b, n_samples: int = 10**6, rng=None) -> float:
    """Reference IoU by uniform sampling over the joint bounding rectangle."""
    rng = np.random.default_rng(rng)
    pa, pb = box_corners(a), box_corners(b)
    pts_all = np.vstack([pa, pb])
    lo, hi = pts_all.min(axis=0), pts_all.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n_samples, 2))

    def inside(poly, p):
        ok = np.ones(len(p), dtype=bool)
        for i in range(4):
            ax, ay = poly[i]
            bx, by = poly[(i + 1) % 4]
            ok &= (bx - ax) * (p[:, 1] - ay) - (by - ay) * (p[:, 0] - ax) >= 0
        return ok

    ia, ib = inside(pa, pts), inside(pb, pts)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


# --- average precision -----------------------------------------------------

@dataclass
class EvalResult:
    ap: dict = field(default_factory=dict)  # {iou: {difficulty: AP}}
    curves: dict = field(default_factory=dict)  # {iou: {difficulty: (precision, recall)}}
    counts: dict = field(default_factory=dict)  # {iou: {difficulty: {tp, fp, fn}}}
    no_ground_truth: bool = False

    def to_dict(self) -> dict:
        return {
            "ap": {f"{k:g}": v for k, v in self.ap.items()},
            "counts": {f"{k:g}": v for k, v in self.counts.items()},
            "no_ground_truth": self.no_ground_truth,
        }


def interpolated_ap(precision, recall, n_points: int = N_RECALL_POINTS) -> float:
    """Mean over recall levels 1/n..1 of the best precision at recall >= level."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    if precision.size == 0:
        return 0.0
    levels = np.arange(1, n_points + 1) / n_points
    total = 0.0
    for r in levels:
        ok = recall >= r - 1e-12
        if ok.any():
            total += precision[ok].max()
    return float(total / n_points)


def _bucket_split(objects, ignored, difficulty):
    """Valid GT for a bucket: that bucket and easier ones; harder ones are ignored."""
    rank = DIFFICULTIES.index(difficulty)
    valid, ign = [], list(ignored)
    for o in objects:
        (valid if DIFFICULTIES.index(o.difficulty) <= rank else ign).append(o)
    return valid, ign


def match_detections(dets_per_scene, labels_per_scene, iou_thresh: float,
                     difficulty: str = "moderate", box_fn=None):
    """Greedy score-ordered matching. Returns (tp_flags, n_gt) in ranked order."""
    box_fn = box_fn or (lambda d: d.bev())
    ranked = []
    for s, dets in enumerate(dets_per_scene):
        for k, d in enumerate(dets):
            ranked.append((-float(d.score), s, k, d))
    ranked.sort(key=lambda t: (t[0], t[1], t[2]))  # stable: insertion order on ties

    scenes = []
    n_gt = 0
    for label in labels_per_scene:
        valid, ign = _bucket_split(label.objects, label.ignored, difficulty)
        scenes.append(([o.bev() for o in valid], [o.bev() for o in ign],
                       np.zeros(len(valid), dtype=bool)))
        n_gt += len(valid)

    flags = []
    for _, s, _, d in ranked:
        gts, ign, used = scenes[s]
        db = box_fn(d)
        best, best_iou = -1, iou_thresh
        for g, gb in enumerate(gts):
            if used[g]:
                continue
            iou = rotated_iou(db, gb)
            if iou >= best_iou:
                if best < 0 or iou > best_iou:
                    best, best_iou = g, iou
        if best >= 0:
            used[best] = True
            flags.append(True)
        elif any(rotated_iou(db, gb) >= iou_thresh for gb in ign):
            continue  # matched a don't-care object: neither TP nor FP
        else:
            flags.append(False)
    return np.array(flags, dtype=bool), n_gt


def precision_recall(tp_flags, n_gt):
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt if n_gt else np.zeros_like(precision, dtype=np.float64)
    return precision, recall


def average_precision(dets_per_scene, labels_per_scene, iou_thresholds=(0.5, 0.7),
                      difficulties=DIFFICULTIES, box_fn=None) -> EvalResult:
    """AP per IoU threshold and difficulty bucket over a set of scenes.

    ``dets_per_scene[i]`` holds the detections for ``labels_per_scene[i]``.
    """
    if np.isscalar(iou_thresholds):
        iou_thresholds = (float(iou_thresholds),)
    res = EvalResult()
    res.no_ground_truth = sum(len(lb.objects) for lb in labels_per_scene) == 0
    for t in iou_thresholds:
        t = float(t)
        res.ap[t], res.curves[t], res.counts[t] = {}, {}, {}
        for diff in difficulties:
            flags, n_gt = match_detections(dets_per_scene, labels_per_scene, t, diff, box_fn)
            prec, rec = precision_recall(flags, n_gt)
            res.ap[t][diff] = interpolated_ap(prec, rec) if n_gt else 0.0
            res.curves[t][diff] = (prec, rec)
            tp = int(flags.sum())
            res.counts[t][diff] = {"tp": tp, "fp": int((~flags).sum()), "fn": n_gt - tp}
    return res


# --- activity --------------------------------------------------------------

@dataclass
class ActivityReport:
    layers: list
    total_input_spikes: int
    total_output_spikes: int
    total_synaptic_ops: int
    mean_sparsity: float

    @property
    def energy_proxy(self) -> int:
        """Synaptic-operation count; a proxy for switching activity, not joules."""
        return self.total_synaptic_ops

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "total_input_spikes": self.total_input_spikes,
            "total_output_spikes": self.total_output_spikes,
            "total_synaptic_ops": self.total_synaptic_ops,
            "energy_proxy_synaptic_ops": self.energy_proxy,
            "mean_sparsity": self.mean_sparsity,
        }


def activity_report(records) -> ActivityReport:
    layers = []
    for r in records:
        layers.append({
            "name": r.name,
            "input_spikes": int(r.input_spikes),
            "output_spikes": int(r.output_spikes),
            "synaptic_ops": int(r.synaptic_ops),
            "neurons": int(r.n_neurons),
            "sparsity": r.sparsity,
        })
    sp = [lay["sparsity"] for lay in layers]
    return ActivityReport(
        layers=layers,
        total_input_spikes=sum(lay["input_spikes"] for lay in layers),
        total_output_spikes=sum(lay["output_spikes"] for lay in layers),
        total_synaptic_ops=sum(lay["synaptic_ops"] for lay in layers),
        mean_sparsity=float(np.mean(sp)) if sp else 1.0,
    )


def merge_activity(reports) -> dict:
    """Per-layer mean sparsity and summed totals over many forward passes."""
    reports = list(reports)
    if not reports:
        return {}
    names = [lay["name"] for lay in reports[0].layers]
    return {
        "per_layer_mean_sparsity": {
            n: float(np.mean([r.layers[i]["sparsity"] for r in reports]))
            for i, n in enumerate(names)
        },
        "mean_output_spikes": float(np.mean([r.total_output_spikes for r in reports])),
        "mean_synaptic_ops": float(np.mean([r.total_synaptic_ops for r in reports])),
    }

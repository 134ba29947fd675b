"""Scene datasets on disk and the encode -> forward -> decode detection path."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import BoxNorm, DecodeStats, decode_boxes, decode_keypoints
from .engine import NetworkGraph, encode_and_forward
from .evaluation import activity_report, average_precision
from .ingest import (Calibration, GridMeta, SceneLabel, format_kitti_label, labels_to_targets,
                     load_kitti_labels, load_kitti_pointcloud, pointcloud_to_bev,
                     save_kitti_pointcloud)
from .synthetic import generate_synthetic_scene

MANIFEST = "manifest.jsonl"


@dataclass
class SceneDataset:
    """Rasterised scenes with their labels and dense training targets."""

    bev: np.ndarray  # (N, 3, H, W)
    labels: list
    keypoint: np.ndarray  # (N, H, W)
    box: np.ndarray  # (N, 5, H, W), metric units
    rotation: np.ndarray  # (N, H, W)
    meta: GridMeta
    names: list

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_scenes(cls, clouds, labels, meta: GridMeta, n_bins: int, names=None) -> "SceneDataset":
        bev = [pointcloud_to_bev(pc, meta).data for pc in clouds]
        return cls.from_bev(bev, labels, meta, n_bins, names)

    @classmethod
    def from_bev(cls, bev, labels, meta: GridMeta, n_bins: int, names=None) -> "SceneDataset":
        bev = [np.asarray(b, dtype=np.float64) for b in bev]
        if len(bev) != len(labels):
            raise ValueError(f"{len(bev)} grids but {len(labels)} label sets")
        kp, box, rot = [], [], []
        for lb in labels:
            t = labels_to_targets(lb, meta, n_bins)
            kp.append(t.keypoint_map)
            box.append(t.box_map)
            rot.append(t.rotation_map)
        H, W = meta.shape
        stack = lambda xs, shape, dt: np.stack(xs) if xs else np.zeros((0,) + shape, dtype=dt)
        names = list(names) if names is not None else [f"scene_{i:04d}" for i in range(len(labels))]
        return cls(stack(bev, (3, H, W), np.float64), list(labels), stack(kp, (H, W), np.uint8),
                   stack(box, (5, H, W), np.float64), stack(rot, (H, W), np.int64), meta, names)

    def subset(self, idx) -> "SceneDataset":
        idx = list(idx)
        return SceneDataset(self.bev[idx], [self.labels[i] for i in idx], self.keypoint[idx],
                            self.box[idx], self.rotation[idx], self.meta,
                            [self.names[i] for i in idx])

    def keypoint_targets(self) -> np.ndarray:
        """(K, 5) box targets at every ground-truth keypoint."""
        n, r, c = np.nonzero(self.keypoint)
        return self.box[n, :, r, c]

    def fit_box_norm(self) -> BoxNorm:
        return BoxNorm.fit(self.keypoint_targets())


def synthesize_dataset(out_dir, seed: int, count: int, meta: GridMeta | None = None,
                       max_objects: int = 5, min_objects: int = 1):
    """Write ``count`` synthetic scenes (KITTI .bin + label .txt) and a manifest."""
    meta = meta or GridMeta()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**31 - 1, size=count)
    n_objs = rng.integers(min_objects, max_objects + 1, size=count)
    lines = []
    calib = Calibration()
    for i in range(count):
        name = f"scene_{i:04d}"
        pc, label = generate_synthetic_scene(int(scene_seeds[i]), int(n_objs[i]), meta)
        save_kitti_pointcloud(pc, out / f"{name}.bin")
        (out / f"{name}.txt").write_text(
            "".join(format_kitti_label(o, calib) + "\n" for o in label.objects))
        lines.append(json.dumps({"scene": name, "seed": int(scene_seeds[i]),
                                 "n_objects": int(n_objs[i])}, sort_keys=True))
    (out / MANIFEST).write_text("".join(ln + "\n" for ln in lines))
    return out / MANIFEST


def read_manifest(dataset_dir) -> list[dict]:
    path = Path(dataset_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {dataset_dir}")
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]


def load_dataset(dataset_dir, meta: GridMeta, n_bins: int, limit: int | None = None) -> SceneDataset:
    d = Path(dataset_dir)
    entries = read_manifest(d)[:limit]
    clouds, labels, names = [], [], []
    for e in entries:
        name = e["scene"]
        clouds.append(load_kitti_pointcloud(d / f"{name}.bin"))
        labels.append(load_kitti_labels(d / f"{name}.txt"))
        names.append(name)
    return SceneDataset.from_scenes(clouds, labels, meta, n_bins, names)


def detect(net: NetworkGraph, bev, meta: GridMeta, min_margin: int = 1, with_activity=False):
    """Detections for one BEV array (3, H, W); optionally the activity report too."""
    readout, records = encode_and_forward(net, bev)
    kps = decode_keypoints(readout, min_margin)
    stats = DecodeStats()
    dets = decode_boxes(readout, kps, meta, net.box_norm, stats)
    if with_activity:
        return dets, activity_report(records)
    return dets


def detect_many(net: NetworkGraph, bevs, meta: GridMeta, min_margin: int = 1, threads: int = 1,
                with_activity=False):
    """Scene-parallel detection; output order always follows the input order."""
    fn = lambda b: detect(net, b, meta, min_margin, with_activity)
    if threads <= 1:
        return [fn(b) for b in bevs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, bevs))


def evaluate(net: NetworkGraph, data: SceneDataset, iou_thresholds=(0.5, 0.7),
             min_margin: int = 1, threads: int = 1):
    dets = detect_many(net, data.bev, data.meta, min_margin, threads)
    return average_precision(dets, data.labels, iou_thresholds), dets


def oracle_detections(label: SceneLabel, n_bins: int = 8):
    """Perfect detections derived from ground truth (yaw snapped to its bin)."""
    from .codec import Detection
    from .ingest import rotation_bin
    return [Detection((float(o.center[0]), float(o.center[1])), o.dims,
                      rotation_bin(o.yaw, n_bins), 1.0, n_bins) for o in label.objects]

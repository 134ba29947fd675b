"""Deterministic toy LiDAR scenes: car-sized boxes on a noisy ground plane."""
from __future__ import annotations

import math

import numpy as np

from .evaluation import rotated_iou
from .ingest import BoxLabel, GridMeta, PointCloud, SceneLabel

GROUND_Z = -1.73
MIN_OBJECT_POINTS = 20
PLACEMENT_RETRIES = 500


class PlacementError(RuntimeError):
    pass


def _sample_box(rng, meta: GridMeta):
    h = rng.uniform(1.4, 1.75)
    w = rng.uniform(1.5, 1.9)
    l = rng.uniform(3.4, 4.6)
    yaw = rng.uniform(-math.pi, math.pi)
    margin = l / 2 + 0.2
    x = rng.uniform(meta.x_range[0] + margin, meta.x_range[1] - margin)
    y = rng.uniform(meta.y_range[0] + margin, meta.y_range[1] - margin)
    return BoxLabel((x, y, GROUND_Z + h / 2), (h, w, l), yaw, cls="Car", difficulty="easy")


def _box_points(rng, box: BoxLabel, density: float = 40.0):
    """Points on the roof and the four side faces of a box."""
    h, w, l = box.dims
    cx, cy, cz = box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    n_top = max(int(density * w * l), MIN_OBJECT_POINTS)
    u = rng.uniform(-l / 2, l / 2, n_top)
    v = rng.uniform(-w / 2, w / 2, n_top)
    zt = cz + h / 2 + rng.normal(0, 0.02, n_top)
    n_side = int(6.0 * 2 * (w + l) * h)
    t = rng.uniform(0, 2 * (w + l), n_side)
    su = np.where(t < l, t - l / 2,
         np.where(t < l + w, l / 2, np.where(t < 2 * l + w, l / 2 - (t - l - w), -l / 2)))
    sv = np.where(t < l, -w / 2,
         np.where(t < l + w, -w / 2 + (t - l), np.where(t < 2 * l + w, w / 2,
                                                        w / 2 - (t - 2 * l - w))))
    zs = rng.uniform(cz - h / 2, cz + h / 2, n_side)
    lu = np.concatenate([u, su])
    lv = np.concatenate([v, sv])
    z = np.concatenate([zt, zs])
    x = cx + c * lu - s * lv
    y = cy + s * lu + c * lv
    base = rng.uniform(0.35, 0.9)
    inten = np.clip(base + rng.normal(0, 0.05, len(x)), 0, 1)
    return np.column_stack([x, y, z, inten])


def _clutter(rng, meta: GridMeta, n_ground: int, n_blobs: int):
    x = rng.uniform(meta.x_range[0], meta.x_range[1], n_ground)
    y = rng.uniform(meta.y_range[0], meta.y_range[1], n_ground)
    z = GROUND_Z + rng.normal(0, 0.03, n_ground)
    inten = rng.uniform(0.0, 0.3, n_ground)
    parts = [np.column_stack([x, y, z, inten])]
    for _ in range(n_blobs):
        # poles and bushes: small footprint, variable height
        r = rng.uniform(0.15, 0.6)
        top = GROUND_Z + rng.uniform(0.3, 2.2)
        bx = rng.uniform(*meta.x_range)
        by = rng.uniform(*meta.y_range)
        m = int(rng.integers(15, 60))
        ang = rng.uniform(0, 2 * math.pi, m)
        rad = r * np.sqrt(rng.uniform(0, 1, m))
        bz = rng.uniform(GROUND_Z, top, m)
        parts.append(np.column_stack([bx + rad * np.cos(ang), by + rad * np.sin(ang), bz,
                                      rng.uniform(0.1, 0.6, m)]))
    return np.vstack(parts)


def generate_synthetic_scene(rng_seed: int, n_objects: int, meta: GridMeta | None = None,
                             n_ground: int = 1500, n_blobs: int | None = None):
    """Return ``(PointCloud, SceneLabel)`` for a seeded scene with ``n_objects`` cars.

    Boxes keep a 0.3 m clearance so their footprints never overlap.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    meta = meta or GridMeta()
    rng = np.random.default_rng(rng_seed)
    boxes: list[BoxLabel] = []
    for _ in range(n_objects):
        for _attempt in range(PLACEMENT_RETRIES):
            cand = _sample_box(rng, meta)
            padded = lambda b: (b.center[0], b.center[1], b.dims[1] + 0.3, b.dims[2] + 0.3, b.yaw)
            if all(rotated_iou(padded(cand), padded(b)) == 0.0 for b in boxes):
                boxes.append(cand)
                break
        else:
            raise PlacementError(f"could not place object {len(boxes) + 1} of {n_objects}")
    if n_blobs is None:
        n_blobs = int(rng.integers(0, 4))
    parts = [_clutter(rng, meta, n_ground, n_blobs)]
    for b in boxes:
        parts.append(_box_points(rng, b))
    pts = np.vstack(parts)
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return PointCloud(pts), SceneLabel(objects=boxes)


def points_in_box(points, box: BoxLabel) -> np.ndarray:
    """Boolean mask of points inside a box (small tolerance for surface samples)."""
    p = np.asarray(points)[:, :3] - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = c * p[:, 0] + s * p[:, 1]
    v = -s * p[:, 0] + c * p[:, 1]
    h, w, l = box.dims
    tol = 0.1
    return (np.abs(u) <= l / 2 + tol) & (np.abs(v) <= w / 2 + tol) & (np.abs(p[:, 2]) <= h / 2 + tol)

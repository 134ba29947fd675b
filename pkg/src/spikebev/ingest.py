"""Point clouds, KITTI files, bird's-eye-view rasters and target maps.

Grid convention: row index runs along LiDAR ``x`` (forward), column index
along LiDAR ``y`` (left). Cell ``(r, c)`` covers
``[x_min + r*cell, x_min + (r+1)*cell) x [y_min + c*cell, y_min + (c+1)*cell)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

RECORD_BYTES = 16
DIFFICULTIES = ("easy", "moderate", "hard")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class GridMeta:
    x_range: tuple = (0.0, 16.0)
    y_range: tuple = (-8.0, 8.0)
    z_range: tuple = (-2.5, 1.0)
    cell_size: float = 0.25

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"degenerate {name}: {(lo, hi)}")

    @classmethod
    def kitti(cls) -> "GridMeta":
        return cls(x_range=(0.0, 80.0), y_range=(-20.0, 20.0), z_range=(-2.5, 1.0), cell_size=0.1)

    @classmethod
    def from_dict(cls, d) -> "GridMeta":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "z_range": list(self.z_range), "cell_size": self.cell_size}

    @property
    def shape(self) -> tuple[int, int]:
        h = int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))
        w = int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))
        return h, w

    def cell_of(self, x, y):
        """Integer (row, col) of metric coordinates; may fall outside the grid."""
        r = np.floor((np.asarray(x) - self.x_range[0]) / self.cell_size).astype(np.int64)
        c = np.floor((np.asarray(y) - self.y_range[0]) / self.cell_size).astype(np.int64)
        return r, c

    def cell_center(self, r, c):
        x = self.x_range[0] + (np.asarray(r) + 0.5) * self.cell_size
        y = self.y_range[0] + (np.asarray(c) + 0.5) * self.cell_size
        return x, y

    def contains_xy(self, x, y) -> bool:
        return (self.x_range[0] <= x < self.x_range[1]) and (self.y_range[0] <= y < self.y_range[1])


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z, intensity
    n_dropped: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        if pts.size and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise ValueError("intensity must lie in [0, 1]")
        self.points = pts

    def __len__(self):
        return len(self.points)


@dataclass
class BEVGrid:
    data: np.ndarray  # (3, H, W): height, intensity, mask
    meta: GridMeta

    @property
    def height_ch(self):
        return self.data[0]

    @property
    def intensity_ch(self):
        return self.data[1]

    @property
    def mask_ch(self):
        return self.data[2]

    @property
    def shape(self):
        return self.data.shape[1:]


@dataclass
class BoxLabel:
    center: np.ndarray  # LiDAR frame, box centre (m)
    dims: tuple  # (h, w, l) metres
    yaw: float  # radians in [-pi, pi)
    cls: str = "Car"
    difficulty: str = "easy"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = tuple(float(d) for d in self.dims)
        if min(self.dims) <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.dims}")
        self.yaw = wrap_angle(self.yaw)

    def bev(self) -> tuple:
        """(cx, cy, w, l, yaw) footprint used by the IoU routines."""
        return (float(self.center[0]), float(self.center[1]), self.dims[1], self.dims[2], self.yaw)


@dataclass
class SceneLabel:
    objects: list = field(default_factory=list)
    ignored: list = field(default_factory=list)

    def __len__(self):
        return len(self.objects)


@dataclass
class GroundTruthMaps:
    keypoint_map: np.ndarray  # (H, W) uint8
    box_map: np.ndarray  # (5, H, W): h, w, l, dx, dy
    rotation_map: np.ndarray  # (H, W) int64


def wrap_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    return float((a + math.pi) % (2 * math.pi) - math.pi)


# --- KITTI I/O -------------------------------------------------------------

def load_kitti_pointcloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(pts), axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.warning("%s: dropped %d non-finite points", path, dropped)
    pts = pts[finite]
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return PointCloud(pts, n_dropped=dropped)


def save_kitti_pointcloud(pc: PointCloud, path):
    Path(path).write_bytes(np.asarray(pc.points, dtype="<f4").tobytes())


@dataclass(frozen=True)
class Calibration:
    """Rectification and LiDAR-to-camera transforms from a KITTI calib file."""

    R0_rect: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tr_velo_to_cam: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, -1.0, 0.0, 0.0],
                                          [0.0, 0.0, -1.0, 0.0],
                                          [1.0, 0.0, 0.0, 0.0]])
    )

    @classmethod
    def from_file(cls, path) -> "Calibration":
        vals = {}
        for line in Path(path).read_text().splitlines():
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            vals[key.strip()] = np.array([float(v) for v in rest.split()])
        return cls(R0_rect=vals["R0_rect"].reshape(3, 3),
                   Tr_velo_to_cam=vals["Tr_velo_to_cam"].reshape(3, 4))

    def _velo_to_rect(self):
        T = np.eye(4)
        T[:3, :] = self.Tr_velo_to_cam
        R = np.eye(4)
        R[:3, :3] = self.R0_rect
        return R @ T

    def rect_to_velo(self, pts):
        pts = np.atleast_2d(pts)
        h = np.hstack([pts, np.ones((len(pts), 1))])
        return (np.linalg.inv(self._velo_to_rect()) @ h.T).T[:, :3]

    def velo_to_rect(self, pts):
        pts = np.atleast_2d(pts)
        h = np.hstack([pts, np.ones((len(pts), 1))])
        return (self._velo_to_rect() @ h.T).T[:, :3]


def kitti_difficulty(bbox_height: float, truncation: float, occlusion: int):
    """KITTI devkit buckets; ``None`` when the object is outside all three."""
    if bbox_height >= 40 and occlusion <= 0 and truncation <= 0.15:
        return "easy"
    if bbox_height >= 25 and occlusion <= 1 and truncation <= 0.30:
        return "moderate"
    if bbox_height >= 25 and occlusion <= 2 and truncation <= 0.50:
        return "hard"
    return None


def load_kitti_labels(path, calib: Calibration | None = None, foreground: str = "Car") -> SceneLabel:
    calib = calib or Calibration()
    label = SceneLabel()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        f = line.split()
        try:
            cls = f[0]
            trunc, occ = float(f[1]), int(float(f[2]))
            y1, y2 = float(f[5]), float(f[7])
            h, w, l = (float(v) for v in f[8:11])
            loc = np.array([float(v) for v in f[11:14]])
            ry = float(f[14])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: cannot parse label line ({exc})") from None
        center = calib.rect_to_velo(loc)[0]
        if cls == "DontCare":
            # DontCare regions carry placeholder geometry (-1 dims); keep a tiny box
            dims = tuple(max(v, 1e-3) for v in (h, w, l))
            label.ignored.append(BoxLabel(center, dims, -ry - math.pi / 2, cls=cls,
                                          difficulty="hard"))
            continue
        center[2] += h / 2.0  # KITTI locations are bottom centres
        diff = kitti_difficulty(y2 - y1, trunc, occ)
        box = BoxLabel(center, (h, w, l), -ry - math.pi / 2, cls=cls, difficulty=diff or "hard")
        if cls != foreground or diff is None:
            label.ignored.append(box)
        else:
            label.objects.append(box)
    return label


def format_kitti_label(box: BoxLabel, calib: Calibration | None = None,
                       bbox=(0.0, 0.0, 100.0, 100.0), truncation=0.0, occlusion=0) -> str:
    """Inverse of ``load_kitti_labels`` for one object (used by the synthesizer)."""
    calib = calib or Calibration()
    bottom = box.center.copy()
    bottom[2] -= box.dims[0] / 2.0
    loc = calib.velo_to_rect(bottom)[0]
    ry = wrap_angle(-box.yaw - math.pi / 2)
    h, w, l = box.dims
    fields = [box.cls, f"{truncation:.2f}", str(occlusion), "0.00",
              *(f"{v:.2f}" for v in bbox),
              f"{h:.6f}", f"{w:.6f}", f"{l:.6f}",
              *(f"{v:.6f}" for v in loc), f"{ry:.6f}"]
    return " ".join(fields)


# --- rasterisation -----------------------------------------------------------

def pointcloud_to_bev(pc: PointCloud, meta: GridMeta) -> BEVGrid:
    """Rasterise to height / intensity / occupancy using the highest point per cell."""
    H, W = meta.shape
    data = np.zeros((3, H, W), dtype=np.float64)
    pts = np.asarray(pc.points, dtype=np.float64)
    if len(pts) == 0:
        return BEVGrid(data, meta)
    x, y, z, inten = pts.T
    r, c = meta.cell_of(x, y)
    z_lo, z_hi = meta.z_range
    keep = (r >= 0) & (r < H) & (c >= 0) & (c < W) & (z >= z_lo) & (z <= z_hi)
    if not keep.any():
        return BEVGrid(data, meta)
    r, c, z, inten = r[keep], c[keep], z[keep], inten[keep]
    flat = r * W + c
    # last entry per cell after sorting = max z, ties by max intensity
    order = np.lexsort((inten, z, flat))
    flat_s = flat[order]
    last = np.r_[flat_s[1:] != flat_s[:-1], True]
    sel = order[last]
    cells = flat[sel]
    height = np.clip((z[sel] - z_lo) / (z_hi - z_lo), 0.0, 1.0)
    data[0].flat[cells] = height
    data[1].flat[cells] = inten[sel]
    data[2].flat[cells] = 1.0
    return BEVGrid(data, meta)


def rotation_bin(yaw: float, n_bins: int) -> int:
    width = math.pi / n_bins
    return min(int(math.floor((yaw % math.pi) / width)), n_bins - 1)


def bin_center_yaw(b: int, n_bins: int) -> float:
    return b * math.pi / n_bins + math.pi / (2 * n_bins)


def labels_to_targets(label: SceneLabel, meta: GridMeta, n_bins: int = 8) -> GroundTruthMaps:
    if n_bins < 2:
        raise ValueError("need at least two rotation bins")
    H, W = meta.shape
    kp = np.zeros((H, W), dtype=np.uint8)
    box = np.zeros((5, H, W), dtype=np.float64)
    rot = np.zeros((H, W), dtype=np.int64)
    for obj in label.objects:
        x, y = obj.center[0], obj.center[1]
        if not meta.contains_xy(x, y):
            continue
        r, c = (int(v) for v in meta.cell_of(x, y))
        fr = (x - meta.x_range[0]) / meta.cell_size - (r + 0.5)
        fc = (y - meta.y_range[0]) / meta.cell_size - (c + 0.5)
        kp[r, c] = 1
        box[:, r, c] = (*obj.dims, fr, fc)
        rot[r, c] = rotation_bin(obj.yaw, n_bins)
    return GroundTruthMaps(kp, box, rot)

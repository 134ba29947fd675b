import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bev_reference
from spikebev.ingest import (BoxLabel, Calibration, FormatError, GridMeta, PointCloud, SceneLabel,
                             format_kitti_label, labels_to_targets, load_kitti_labels,
                             load_kitti_pointcloud, pointcloud_to_bev, rotation_bin)

META = GridMeta()


def test_load_two_points(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<8f", 1, 2, 3, 0.5, 4, 5, 6, 0.25))
    pc = load_kitti_pointcloud(p)
    assert len(pc) == 2
    np.testing.assert_array_equal(pc.points, [[1, 2, 3, 0.5], [4, 5, 6, 0.25]])


def test_load_empty(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(load_kitti_pointcloud(p)) == 0


def test_load_bad_length(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(b"\x00" * 17)
    with pytest.raises(FormatError):
        load_kitti_pointcloud(p)


def test_load_drops_non_finite(tmp_path):
    p = tmp_path / "n.bin"
    p.write_bytes(struct.pack("<8f", 1, 2, 3, 0.5, float("nan"), 0, 0, 0))
    pc = load_kitti_pointcloud(p)
    assert len(pc) == 1 and pc.n_dropped == 1


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_kitti_pointcloud(tmp_path / "missing.bin")


def test_pointcloud_rejects_nan():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0, 0, np.inf, 0.1]]))


def _car_line(h=1.5, w=1.6, l=3.9, ry=0.1, bbox_h=60.0, cls="Car", trunc=0.0, occ=0):
    return (f"{cls} {trunc} {occ} 0.0 100 100 200 {100 + bbox_h} {h} {w} {l} 2.0 1.5 10.0 {ry}")


def test_label_passthrough(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text(_car_line() + "\n")
    lab = load_kitti_labels(p)
    assert len(lab.objects) == 1
    assert lab.objects[0].dims == (1.5, 1.6, 3.9)
    assert lab.objects[0].difficulty == "easy"


def test_label_dontcare_ignored(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text("DontCare -1 -1 -10 1 1 5 5 -1 -1 -1 -1000 -1000 -1000 -10\n" + _car_line() + "\n")
    lab = load_kitti_labels(p)
    assert len(lab.objects) == 1 and len(lab.ignored) == 1


def test_label_three_cars(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text("\n".join([_car_line()] * 3))
    assert len(load_kitti_labels(p).objects) == 3


def test_label_bad_line_names_line(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text(_car_line() + "\nCar 0 0 oops\n")
    with pytest.raises(FormatError, match=":2:"):
        load_kitti_labels(p)


@pytest.mark.parametrize("bbox_h,occ,trunc,diff", [(45, 0, 0.0, "easy"), (30, 1, 0.2, "moderate"),
                                                   (30, 2, 0.4, "hard")])
def test_label_difficulty(tmp_path, bbox_h, occ, trunc, diff):
    p = tmp_path / "l.txt"
    p.write_text(_car_line(bbox_h=bbox_h, occ=occ, trunc=trunc))
    assert load_kitti_labels(p).objects[0].difficulty == diff


def test_label_frame_transform(tmp_path):
    # default calib: camera (x, y, z) = (-y_l, -z_l, x_l); bottom centre lifted by h/2
    p = tmp_path / "l.txt"
    p.write_text(_car_line())
    o = load_kitti_labels(p).objects[0]
    np.testing.assert_allclose(o.center, [10.0, -2.0, -1.5 + 0.75], atol=1e-9)
    assert o.yaw == pytest.approx(-0.1 - math.pi / 2)


def test_label_format_round_trip(tmp_path):
    box = BoxLabel([7.0, -1.0, -1.0], (1.5, 1.7, 4.0), 0.4)
    p = tmp_path / "l.txt"
    p.write_text(format_kitti_label(box))
    back = load_kitti_labels(p).objects[0]
    np.testing.assert_allclose(back.center, box.center, atol=1e-5)
    assert back.yaw == pytest.approx(box.yaw, abs=1e-5)


def test_calibration_from_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("P0: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\n"
                 "Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n")
    c = Calibration.from_file(p)
    np.testing.assert_allclose(c.rect_to_velo(c.velo_to_rect([[1.0, 2.0, 3.0]])), [[1, 2, 3]])


def test_bev_empty():
    bev = pointcloud_to_bev(PointCloud(np.zeros((0, 4))), META)
    assert bev.data.shape == (3, 64, 64) and not bev.data.any()


def test_bev_single_point():
    zmid = sum(META.z_range) / 2
    bev = pointcloud_to_bev(PointCloud([[10.0, 0.0, zmid, 0.5]]), META)
    assert bev.mask_ch.sum() == 1
    assert bev.mask_ch[40, 32] == 1  # (10 - 0)/0.25, (0 + 8)/0.25
    assert bev.height_ch[40, 32] == pytest.approx(0.5)
    assert bev.intensity_ch[40, 32] == 0.5


def test_bev_max_z_rule():
    z0, z1 = META.z_range
    bev = pointcloud_to_bev(PointCloud([[10.0, 0.0, z0, 0.2], [10.1, 0.1, z1, 0.9]]), META)
    assert bev.height_ch[40, 32] == 1.0 and bev.intensity_ch[40, 32] == 0.9


def test_bev_discards_out_of_range():
    bev = pointcloud_to_bev(PointCloud([[-1.0, 0, 0, 0.5], [5, 0, 9.0, 0.5], [16.0, 0, 0, 0.1]]),
                            META)
    assert not bev.data.any()


clouds = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


def _random_cloud(rng, n=300):
    return np.column_stack([rng.uniform(-1, 17, n), rng.uniform(-9, 9, n), rng.uniform(-3, 1.5, n),
                            rng.uniform(0, 1, n)])


@settings(max_examples=20, deadline=None)
@given(clouds)
def test_bev_matches_loop_oracle_and_masking(rng):
    pts = _random_cloud(rng)
    # quantise z so ties are exercised
    pts[:, 2] = np.round(pts[:, 2], 1)
    bev = pointcloud_to_bev(PointCloud(pts), META).data
    ref = bev_reference(pts, META.x_range, META.y_range, META.z_range, META.cell_size)
    np.testing.assert_allclose(bev, ref)
    empty = bev[2] == 0
    assert not bev[0][empty].any() and not bev[1][empty].any()


@settings(max_examples=20, deadline=None)
@given(clouds)
def test_bev_permutation_invariant(rng):
    pts = _random_cloud(rng)
    a = pointcloud_to_bev(PointCloud(pts), META).data
    b = pointcloud_to_bev(PointCloud(pts[rng.permutation(len(pts))]), META).data
    np.testing.assert_array_equal(a, b)


def test_targets_cell_center_object():
    x, y = META.cell_center(10, 20)
    t = labels_to_targets(SceneLabel([BoxLabel([float(x), float(y), -1], (1.5, 1.6, 3.9), 0.0)]),
                          META)
    assert t.keypoint_map[10, 20] == 1 and t.keypoint_map.sum() == 1
    assert t.box_map[3, 10, 20] == pytest.approx(0) and t.box_map[4, 10, 20] == pytest.approx(0)
    assert t.rotation_map[10, 20] == 0


def test_targets_residuals_and_skip():
    lab = SceneLabel([BoxLabel([5.2, 1.1, -1], (1.5, 1.6, 3.9), 0.0),
                      BoxLabel([30.0, 0.0, -1], (1.5, 1.6, 3.9), 0.0)])
    t = labels_to_targets(lab, META)
    assert t.keypoint_map.sum() == 1
    r, c = 20, 36  # 5.2/0.25 = 20.8, (1.1+8)/0.25 = 36.4
    assert t.box_map[3, r, c] == pytest.approx(0.3)
    assert t.box_map[4, r, c] == pytest.approx(-0.1)
    np.testing.assert_allclose(t.box_map[:3, r, c], [1.5, 1.6, 3.9])


@pytest.mark.parametrize("yaw,b", [(0.0, 0), (math.pi / 2 + 0.01, 4), (-0.1, 7), (math.pi - 1e-12, 7)])
def test_rotation_bin(yaw, b):
    assert rotation_bin(yaw, 8) == b


def test_targets_need_two_bins():
    with pytest.raises(ValueError):
        labels_to_targets(SceneLabel(), META, 1)


def test_box_label_invariants():
    with pytest.raises(ValueError):
        BoxLabel([0, 0, 0], (1.0, 0.0, 1.0), 0.0)
    assert BoxLabel([0, 0, 0], (1, 1, 1), math.pi).yaw == pytest.approx(-math.pi)


def test_grid_meta_validation():
    with pytest.raises(ValueError):
        GridMeta(cell_size=0)
    with pytest.raises(ValueError):
        GridMeta(x_range=(1.0, 1.0))
    assert GridMeta.kitti().shape == (800, 400)
    assert GridMeta.from_dict(META.to_dict()) == META

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikebev.codec import (BoxNorm, DecodeStats, Detection, EncoderParams, HeadReadout,
                            decode_boxes, decode_keypoints, encode_rate, encode_rate_grad,
                            ideal_readout, read_detections, write_detections)
from spikebev.ingest import BoxLabel, GridMeta, SceneLabel, labels_to_targets

META = GridMeta()


def _p(alpha, n_max=63):
    return EncoderParams(np.array([alpha]), n_max)


def test_encode_examples():
    x = np.array([[[0.0, 0.25, 100.0]]])
    assert encode_rate(x, _p(10)).ravel().tolist() == [0, 2, 63]


def test_encode_per_channel_alpha():
    x = np.full((3, 1, 1), 0.5)
    out = encode_rate(x, EncoderParams(np.array([2.0, 10.0, 63.0])))
    assert out.ravel().tolist() == [1, 5, 31]


def test_encoder_params_validation():
    with pytest.raises(ValueError):
        EncoderParams(np.array([0.0]))
    with pytest.raises(ValueError):
        EncoderParams(np.array([1.0]), n_max=0)


vals = arrays(np.float64, (1, 3, 3), elements=st.floats(0, 10))


@given(vals, st.floats(0, 5), st.floats(0.1, 100))
def test_encoder_monotone_and_bounded(x, d, a):
    p = _p(a)
    lo, hi = encode_rate(x, p), encode_rate(x + d, p)
    assert np.all(lo <= hi) and lo.min() >= 0 and hi.max() <= 63
    assert np.all(encode_rate(x, _p(a)) <= encode_rate(x, _p(a * 1.5)))


def test_encode_grad_examples():
    x = np.array([[[0.25, 0.0, 100.0]]])
    g_x, g_a = encode_rate_grad(x, _p(10), np.array([[[2.0, 1.0, 1.0]]]))
    assert g_x.ravel().tolist() == [20.0, 0.0, 0.0]
    assert g_a.tolist() == [0.5]  # 2 * 0.25 from the interior cell only


def test_encode_grad_interior_upstream_one():
    _, g_a = encode_rate_grad(np.array([[[0.3]]]), _p(10), np.ones((1, 1, 1)))
    assert g_a[0] == pytest.approx(0.3)


def _ro(fg, bg=None, R=8):
    fg = np.asarray(fg)
    bg = np.zeros_like(fg) if bg is None else np.asarray(bg)
    H, W = fg.shape
    return HeadReadout(np.stack([bg, fg]), np.zeros((R, H, W), dtype=np.int64), np.zeros((5, H, W)))


def test_keypoints_empty():
    assert decode_keypoints(_ro(np.zeros((5, 5), dtype=int))) == []


def test_keypoints_single():
    fg = np.zeros((5, 5), dtype=int)
    fg[2, 3] = 5
    assert decode_keypoints(_ro(fg), 1) == [((2, 3), 1.0)]


def test_keypoints_adjacent_nms():
    fg = np.zeros((5, 5), dtype=int)
    fg[2, 2], fg[2, 3] = 5, 4
    assert [k for k, _ in decode_keypoints(_ro(fg))] == [(2, 2)]


def test_keypoints_tie_lowest_index():
    fg = np.zeros((5, 5), dtype=int)
    fg[2, 2] = fg[3, 3] = 5
    assert [k for k, _ in decode_keypoints(_ro(fg))] == [(2, 2)]


def test_keypoints_margin_and_score():
    fg = np.zeros((5, 5), dtype=int)
    bg = np.zeros((5, 5), dtype=int)
    fg[1, 1], bg[1, 1] = 3, 1
    fg[3, 3], bg[3, 3] = 3, 2
    out = decode_keypoints(_ro(fg, bg), min_margin=2)
    assert out == [((1, 1), 0.75)]


def _one_object_readout():
    x, y = META.cell_center(10, 20)
    lab = SceneLabel([BoxLabel([float(x) + 0.05, float(y) - 0.1, -1], (1.5, 1.6, 3.9), 0.5)])
    return lab, labels_to_targets(lab, META)


def test_decode_reproduces_target():
    lab, t = _one_object_readout()
    norm = BoxNorm(np.array([1.5, 1.7, 4.0, 0.0, 0.0]), np.array([0.5, 0.4, 1.2, 1.0, 1.0]))
    ro = ideal_readout(t, norm)
    (d,) = decode_boxes(ro, decode_keypoints(ro), META, norm)
    np.testing.assert_allclose(d.center, lab.objects[0].center[:2], atol=1e-6)
    np.testing.assert_allclose(d.dims, (1.5, 1.6, 3.9))
    assert d.yaw_bin == t.rotation_map[10, 20]


def test_decode_yaw_argmax_and_scaling():
    _, t = _one_object_readout()
    ro = ideal_readout(t)
    ro.rotation_spikes[:, 10, 20] = [0, 3, 1, 0, 0, 0, 0, 0]
    kps = decode_keypoints(ro)
    assert decode_boxes(ro, kps, META)[0].yaw_bin == 1
    ro.rotation_spikes *= 7
    assert decode_boxes(ro, kps, META)[0].yaw_bin == 1
    ro.rotation_spikes[:, 10, 20] = [0, 3, 3, 0, 0, 0, 0, 0]
    assert decode_boxes(ro, kps, META)[0].yaw_bin == 1


def test_decode_drops_negative_length():
    _, t = _one_object_readout()
    ro = ideal_readout(t)
    ro.box_potentials[2, 10, 20] = -0.2
    stats = DecodeStats()
    assert decode_boxes(ro, decode_keypoints(ro), META, stats=stats) == []
    assert stats.dropped == 1


def test_box_norm_fit_and_round_trip():
    v = np.array([[1, 1, 3, 0, 0], [2, 3, 5, 1, -1.0]])
    n = BoxNorm.fit(v)
    np.testing.assert_allclose(n.normalize(v.T).T.max(0) - n.normalize(v.T).T.min(0), 1.0)
    np.testing.assert_allclose(n.denormalize(n.normalize(v.T)), v.T)
    np.testing.assert_allclose(BoxNorm.from_array(n.to_array()).mean, n.mean)
    assert BoxNorm.fit(np.zeros((0, 5))).spread.tolist() == [1.0] * 5


def test_detection_text_round_trip(tmp_path):
    d = Detection((1.23456, -2.0), (1.5, 1.6, 3.9), 3, 0.875)
    assert d.to_line() == "1.2346 -2.0000 1.5000 1.6000 3.9000 3 0.8750"
    write_detections([d, d], tmp_path / "d.txt")
    back = read_detections(tmp_path / "d.txt")
    assert len(back) == 2 and back[0].yaw_bin == 3 and back[0].center == (1.2346, -2.0)
    with pytest.raises(ValueError):
        Detection.from_line("1 2 3")

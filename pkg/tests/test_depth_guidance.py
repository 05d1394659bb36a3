import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from endonav.depth_guidance import (DepthFormatError, DepthMap, ImageFeature, Intrinsics,
                                    RenderError, Roi, cast_rays, extract_roi, image_feature,
                                    load_depth, load_mask_pgm, pixel_rays, render_depth,
                                    save_depth, save_mask_pgm)
from endonav.geometry_core import PhantomSpec, make_phantom
from endonav.plant_sim import Endoscope, step, true_tip_pose
from oracles import roi_brute

STRAIGHT = make_phantom(PhantomSpec("straight"))
S_CURVE = make_phantom(PhantomSpec("s_curve"))


def depth_map(values):
    values = np.asarray(values, dtype=np.float32)
    h, w = values.shape
    return DepthMap(values, Intrinsics(w, h, 10.0, (w - 1) / 2, (h - 1) / 2))


# --- rendering --------------------------------------------------------------

def test_on_axis_view_is_symmetric_with_peak_at_centre():
    intr = Intrinsics.from_fov(33, 33)
    d = render_depth((np.array([0, 0, 120.0]), np.eye(3)), STRAIGHT, intr).depth
    assert d[16, 16] == d.max()
    np.testing.assert_allclose(d, d[::-1], atol=1e-4)
    np.testing.assert_allclose(d, d[:, ::-1], atol=1e-4)
    np.testing.assert_allclose(d, d.T, atol=1e-4)


def test_perpendicular_ray_hits_at_radius():
    dirs = np.array([[1.0, 0, 0], [0, -1.0, 0], [math.sqrt(0.5), math.sqrt(0.5), 0]])
    np.testing.assert_allclose(cast_rays(np.array([0, 0, 500.0]), dirs, STRAIGHT), 25.0,
                               atol=1e-9)


def brute_depth(origin, dirs, lumen, max_depth=300.0, step_mm=0.02):
    """Distance to the first march sample outside the wall."""
    t = np.arange(0.0, max_depth + step_mm, step_mm)
    out = np.full(len(dirs), max_depth)
    for i, d in enumerate(dirs):
        sd = lumen.signed_distance(origin + t[:, None] * d)
        hit = np.nonzero(sd > 0)[0]
        if len(hit):
            out[i] = t[hit[0]]
    return out


def test_render_matches_brute_force_march():
    s = Endoscope(S_CURVE).initial_state(0.3, -0.2)
    for _ in range(70):
        s = step(s, np.array([0.2, 0.1, 40.0]), 0.05)
    pos, R = true_tip_pose(s)
    intr = Intrinsics.from_fov(12, 12)
    fast = render_depth((pos, R), S_CURVE, intr).depth.ravel()
    slow = brute_depth(pos, pixel_rays(intr, R), S_CURVE)
    assert np.max(np.abs(fast - slow)) <= 0.2


def test_camera_outside_lumen_fails():
    with pytest.raises(RenderError):
        render_depth((np.array([40.0, 0, 100]), np.eye(3)), STRAIGHT, Intrinsics.from_fov(8, 8))


def test_rendering_is_deterministic():
    pose = (np.array([3.0, -2.0, 200.0]), np.eye(3))
    intr = Intrinsics.from_fov(16, 16)
    a = render_depth(pose, S_CURVE, intr).depth
    b = render_depth(pose, S_CURVE, intr).depth
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a)) and np.all(a > 0)


# --- ROI --------------------------------------------------------------------

def test_uniform_map_selects_everything():
    roi = extract_roi(depth_map(np.full((6, 8), 7.0)))
    assert roi.mask.all() and roi.area == 48
    np.testing.assert_allclose(roi.center, [3.5, 2.5])


def test_four_by_four_example():
    d = np.ones((4, 4))
    d[1:3, 1:3] = 9.0
    d[3, 3] = 9.0
    roi = extract_roi(depth_map(d))
    expected = np.zeros((4, 4), bool)
    expected[1:3, 1:3] = True
    np.testing.assert_array_equal(roi.mask, expected)
    np.testing.assert_allclose(roi.center, [1.5, 1.5])


def test_equal_components_resolve_to_first_in_raster_order():
    d = np.ones((5, 5))
    d[3, 0] = d[3, 1] = 9.0      # starts at index 15
    d[0, 4] = d[1, 4] = 9.0      # starts at index 4
    roi = extract_roi(depth_map(d), percentile=90.0)
    assert roi.mask[0, 4] and roi.mask[1, 4] and roi.area == 2


def test_percentile_ties_can_exceed_five_percent():
    d = np.ones((10, 10))
    d[:, :3] = 2.0                 # 30 tied pixels at the threshold
    roi = extract_roi(depth_map(d))
    assert roi.area == 30 > math.ceil(0.05 * 100)


@given(arrays(np.float32, (16, 16), elements=st.floats(1, 300, width=32)))
def test_roi_invariants(values):
    roi = extract_roi(depth_map(values))
    thr = np.percentile(values, 95.0)
    ties = int(np.sum(values == thr))
    assert 1 <= roi.area <= math.ceil(0.05 * 256) + ties
    rows, cols = np.nonzero(roi.mask)
    assert cols.min() <= roi.center[0] <= cols.max()
    assert rows.min() <= roi.center[1] <= rows.max()
    assert ndimage.label(roi.mask)[1] == 1


@given(arrays(np.int8, (7, 9), elements=st.integers(1, 4)))
def test_roi_matches_brute_force_with_heavy_ties(values):
    roi = extract_roi(depth_map(values))
    mask, center = roi_brute(values)
    np.testing.assert_array_equal(roi.mask, mask)
    np.testing.assert_allclose(roi.center, center)


# --- image feature ----------------------------------------------------------

def roi_at(x, y, shape=(200, 300)):
    return Roi(mask=np.ones(shape, bool), center=np.array([x, y], float), area=1)


def test_alpha_one_adopts_centre():
    prev = ImageFeature(np.array([10.0, 20.0]), np.array([5.0, 5.0]))
    f = image_feature(roi_at(77.0, 33.0), prev, alpha=1.0)
    np.testing.assert_array_equal(f.y, [77.0, 33.0])


def test_one_step_smoothing():
    prev = ImageFeature(np.array([100.0, 100.0]), np.array([0.0, 0.0]))
    f = image_feature(roi_at(200.0, 100.0), prev, alpha=0.3)
    np.testing.assert_allclose(f.y, [130.0, 100.0])


@given(st.floats(0.05, 1.0), st.integers(1, 20))
def test_geometric_decay(alpha, k):
    f = ImageFeature(np.array([0.0, 0.0]), np.zeros(2))
    p = np.array([150.0, 60.0])
    for _ in range(k):
        f = image_feature(roi_at(*p), f, alpha)
    np.testing.assert_allclose(np.linalg.norm(f.y - p), (1 - alpha) ** k * np.linalg.norm(p),
                               rtol=1e-9, atol=1e-9)
    assert 0 <= f.y[0] < 300 and 0 <= f.y[1] < 200


def test_alpha_out_of_range():
    with pytest.raises(ValueError):
        image_feature(roi_at(1, 1), None, alpha=0.0)


# --- files ------------------------------------------------------------------

def test_depth_round_trip(tmp_path):
    dm = render_depth((np.array([0, 0, 120.0]), np.eye(3)), S_CURVE, Intrinsics.from_fov(20, 14))
    save_depth(tmp_path / "d.bin", dm)
    back = load_depth(tmp_path / "d.bin")
    np.testing.assert_array_equal(back.depth, dm.depth)
    assert back.intrinsics == dm.intrinsics


def test_header_declares_384(tmp_path):
    dm = DepthMap(np.full((384, 384), 50.0, np.float32), Intrinsics.from_fov())
    save_depth(tmp_path / "d.bin", dm)
    assert load_depth(tmp_path / "d.bin").shape == (384, 384)


def test_truncated_file_fails(tmp_path):
    dm = depth_map(np.full((4, 5), 3.0))
    path = tmp_path / "d.bin"
    save_depth(path, dm)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DepthFormatError):
        load_depth(path)
    path.write_bytes(b"NOPE 1 1\n")
    with pytest.raises(DepthFormatError):
        load_depth(path)


def test_invalid_depth_values_rejected():
    with pytest.raises(DepthFormatError):
        depth_map([[1.0, 0.0], [1.0, 1.0]])


def test_mask_round_trip(tmp_path):
    mask = np.random.default_rng(2).random((7, 11)) > 0.5
    save_mask_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(load_mask_pgm(tmp_path / "m.pgm"), mask)

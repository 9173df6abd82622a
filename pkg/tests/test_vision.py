import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from netpen.scene import CameraIntrinsics, SceneConfig, VehicleState, build_scene, render_frame
from netpen.vision import (DegenerateObservation, HoughLine, RopeFilterConfig, RopePairObservation, YawConfig,
                           canny, estimate_distance, estimate_yaw, extract_rope_pair, gaussian_blur,
                           gaussian_kernel, hough_accumulator, hough_lines, perceive)
from oracles import hough_brute, pair_candidates

CAM = CameraIntrinsics()


# -- blur ---------------------------------------------------------------------

@pytest.mark.parametrize("sigma", [0.5, 1.0, 1.4, 3.0])
def test_blur_keeps_constant(sigma):
    img = np.full((40, 50), 128, np.uint8)
    assert np.array_equal(gaussian_blur(img, sigma), img)


def test_blur_sigma_zero_is_identity():
    img = np.random.default_rng(0).integers(0, 256, (30, 30), dtype=np.uint8)
    assert np.array_equal(gaussian_blur(img, 0), img)


def test_blur_impulse_centre_weight():
    img = np.zeros((21, 21), np.uint8)
    img[10, 10] = 255
    # independent kernel: half-width ceil(3 sigma), normalized samples of exp(-x^2/2)
    x = np.arange(-3, 4)
    k = np.exp(-0.5 * x ** 2)
    k0 = 1 / k.sum()
    assert abs(int(gaussian_blur(img, 1.0)[10, 10]) - k0 * k0 * 255) <= 0.5
    assert gaussian_kernel(1.0).size == 7


def test_blur_rejects_negative_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((5, 5)), -1)


# -- canny --------------------------------------------------------------------

def test_canny_constant_image_has_no_edges():
    assert not canny(np.full((40, 40), 90, np.uint8)).edges.any()


def test_canny_step_edge_is_one_pixel_line():
    img = np.zeros((40, 40), np.uint8)
    img[:, 20:] = 255
    em = canny(img)
    cols = np.flatnonzero(em.edges.any(axis=0))
    assert len(cols) == 1 and cols[0] in (19, 20)
    assert em.edges[:, cols[0]].all()
    assert (em.width, em.height) == (40, 40)


def test_canny_bad_thresholds():
    with pytest.raises(ValueError):
        canny(np.zeros((5, 5)), low=50, high=40)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (24, 24)), st.floats(1, 60), st.floats(0, 60), st.floats(0, 60), st.floats(0, 60))
def test_canny_monotone_in_thresholds(img, low, high_extra, dlow, dhigh):
    a = canny(img, 1.0, low, low + high_extra).edges
    b = canny(img, 1.0, low + dlow, low + high_extra + dlow + dhigh).edges
    assert not (b & ~a).any()


# -- hough --------------------------------------------------------------------

def test_hough_vertical_column():
    e = np.zeros((64, 64), bool)
    e[:, 40] = True
    top = hough_lines(e, 1.0, math.pi / 180, 10)[0]
    assert top.theta == pytest.approx(0.0) and top.rho == pytest.approx(40.0)
    assert top.votes == 64


def test_hough_diagonal():
    e = np.eye(50, dtype=bool)
    top = hough_lines(e, 1.0, math.pi / 180, 10)[0]
    assert top.theta == pytest.approx(3 * math.pi / 4) and top.rho == pytest.approx(0.0)


def test_hough_empty():
    assert hough_lines(np.zeros((20, 20), bool), 1.0, 0.05, 1) == []


@pytest.mark.parametrize("case", range(50))
def test_hough_matches_brute_force(case):
    rng = np.random.default_rng(case)
    h, w = rng.integers(4, 65, size=2)
    e = rng.random((h, w)) < rng.uniform(0.005, 0.08)
    # add a line or two so that real peaks exist
    for _ in range(rng.integers(0, 3)):
        y0, y1 = rng.integers(0, h, 2)
        for t in np.linspace(0, 1, max(h, w)):
            e[int(round(y0 + t * (y1 - y0))), int(round(t * (w - 1)))] = True
    rho_res = float(rng.choice([1.0, 1.5, 2.0]))
    theta_res = float(rng.choice([math.pi / 90, math.pi / 45, 0.05]))
    min_votes = int(rng.integers(1, 6))
    acc_ref, peaks_ref = hough_brute(e, rho_res, theta_res, min_votes)
    assert np.array_equal(hough_accumulator(e, rho_res, theta_res).full(), acc_ref)
    got = [(l.votes, l.theta, l.rho) for l in hough_lines(e, rho_res, theta_res, min_votes)]
    assert got == peaks_ref


def test_hough_bands_agree_with_full_space():
    rng = np.random.default_rng(5)
    e = rng.random((48, 48)) < 0.05
    e[:, 10] = True
    bands = [(0.0, 0.3), (math.pi - 0.3, math.pi)]
    full = hough_accumulator(e, 1.0, math.pi / 90).full()
    part = hough_accumulator(e, 1.0, math.pi / 90, theta_bands=bands)
    assert np.array_equal(full[part.theta_index], part.acc)


# -- rope pair ----------------------------------------------------------------

def _vline(u, votes):
    return HoughLine(float(u), 0.0, votes)


def test_pair_from_two_clusters():
    obs = extract_rope_pair([_vline(270, 200), _vline(370, 190)], CAM)
    assert obs.pixel_spacing == pytest.approx(100)
    assert obs.midpoint_u == pytest.approx(320)
    assert obs.left_line.rho < obs.right_line.rho


def test_single_line_gives_none():
    assert extract_rope_pair([_vline(300, 300)], CAM) is None


def test_horizontal_lines_are_ignored():
    assert extract_rope_pair([HoughLine(100, math.pi / 2, 500), HoughLine(300, math.pi / 2, 500)], CAM) is None


def test_close_lines_merge_vote_weighted():
    obs = extract_rope_pair([_vline(268, 100), _vline(272, 300), _vline(370, 200)], CAM)
    assert obs.pixel_spacing == pytest.approx(370 - 271)


@pytest.mark.parametrize("votes", [(100, 200, 150), (300, 200, 150), (100, 100, 100)])
def test_three_candidates_choose_by_votes(votes):
    us = (100, 320, 540)
    cfg = RopeFilterConfig(min_px=150, max_px=350)
    obs = extract_rope_pair([_vline(u, v) for u, v in zip(us, votes)], CAM, cfg)
    ref = pair_candidates(us, votes, 150, 350)
    pairs = {(us[i], us[j]) for s, i, j in
             [(votes[i] + votes[j], i, j) for i, j in ((0, 1), (1, 2))] if s == ref[0]}
    chosen = (obs.left_line.rho, obs.right_line.rho)
    assert chosen in pairs


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 639), st.integers(1, 500)), min_size=2, max_size=8))
def test_pair_invariants(cands):
    obs = extract_rope_pair([_vline(u, v) for u, v in cands], CAM)
    if obs is not None:
        assert obs.pixel_spacing > 0
        assert 30 <= obs.pixel_spacing <= 400
        assert obs.left_line.u_at_row(CAM.cy) < obs.right_line.u_at_row(CAM.cy)


# -- range --------------------------------------------------------------------

def _obs(d):
    return RopePairObservation(_vline(0, 1), _vline(d, 1), d, d / 2)


def test_distance_examples():
    assert estimate_distance(_obs(100), CAM, 0.5) == pytest.approx(2.0)
    assert estimate_distance(_obs(125), CameraIntrinsics(focal_px=500), 0.5) == pytest.approx(2.0)


def test_distance_degenerate():
    with pytest.raises(DegenerateObservation):
        estimate_distance(_obs(0.5), CAM, 0.5)


@given(st.floats(1, 1000), st.floats(1, 2000), st.floats(0.1, 2))
def test_distance_scale_invariance_and_monotone(d, f, b):
    cam1 = CameraIntrinsics(focal_px=f)
    cam2 = CameraIntrinsics(focal_px=2 * f)
    assert estimate_distance(_obs(2 * d), cam2, b) == pytest.approx(estimate_distance(_obs(d), cam1, b))
    assert estimate_distance(_obs(d * 1.01), cam1, b) < estimate_distance(_obs(d), cam1, b)


def test_rendered_range_at_three_metres():
    sc = build_scene(SceneConfig(defects=()))
    obs = perceive(render_frame(sc, VehicleState(z=3.0, depth=3.0), CAM, 0), CAM, 0.5, with_yaw=False).observation
    assert obs.distance_est == pytest.approx(3.0, rel=0.03)


# -- yaw ----------------------------------------------------------------------

def _line_through(v0, slope):
    # line v = v0 + slope * (u - cx), as (rho, theta)
    theta = math.atan2(1.0, -slope)
    st_, ct = math.sin(theta), math.cos(theta)
    rho = CAM.cx * ct + v0 * st_
    return HoughLine(rho, theta, 100)


def test_yaw_zero_for_level_lines():
    lines = [_line_through(v, 0.0) for v in (30, 80, 400, 450)]
    assert estimate_yaw(lines, CAM) == pytest.approx(0.0, abs=1e-12)


def test_yaw_from_synthetic_slopes():
    yaw = 0.15
    lines = [_line_through(v, -(v - CAM.cy) * math.tan(yaw) / CAM.focal_px) for v in (20, 60, 100, 400, 440)]
    assert estimate_yaw(lines, CAM) == pytest.approx(yaw, abs=1e-9)


def test_yaw_needs_enough_lines():
    lines = [_line_through(v, 0.0) for v in (30, 450)]
    assert estimate_yaw(lines, CAM, YawConfig(min_lines=3)) is None
    assert estimate_yaw([_line_through(245, 0.0)] * 5, CAM) is None  # all inside the centre band


@pytest.mark.parametrize("yaw", [-0.2, 0.0, 0.2])
def test_rendered_yaw(yaw):
    sc = build_scene(SceneConfig(defects=()))
    est = perceive(render_frame(sc, VehicleState(z=2.0, depth=3.0, yaw=yaw), CAM, 1), CAM, 0.5).yaw_est
    assert est == pytest.approx(yaw, abs=0.05 if yaw else 0.01)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (30, 30)), st.floats(1, 40), st.floats(0, 60))
def test_canny_matches_dense_suppression(img, low, extra):
    from netpen.vision import gaussian_blur, hysteresis, non_max_suppression, sobel
    from netpen.vision import _quantize_direction
    gx, gy = sobel(gaussian_blur(img.astype(np.float32), 1.0))
    dense = hysteresis(non_max_suppression(np.hypot(gx, gy), _quantize_direction(gx, gy)), low, low + extra)
    assert np.array_equal(canny(img, 1.0, low, low + extra).edges, dense)

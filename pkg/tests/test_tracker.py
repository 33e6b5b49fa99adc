import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from conftest import gray_map
from splatrack import tracker
from splatrack.events import EventArray, EventKeyframe, FrontendConfig
from splatrack.gaussian_map import random_map
from splatrack.lie import v2t
from splatrack.motion import MotionState
from splatrack.rasterizer import CameraIntrinsics
from splatrack.tracker import (TrackerConfig, coarse_stage, event_mask, fine_stage,
                               normalized_loss, prepare_target, preprocess, render_delta_Ir,
                               track_keyframe, track_sequence)

INTR = CameraIntrinsics(60.0, 60.0, 31.5, 31.5, 64, 64)


def _state(seed=0):
    rng = np.random.default_rng(seed)
    return MotionState(v2t(rng.normal(0, 0.02, 3), rng.normal(0, 0.02, 3)),
                       rng.normal(0, 0.3, 3), rng.normal(0, 0.3, 3))


def _exact_keyframe(gmap, state, dtau=0.03, scale=1 / 0.15):
    """Keyframe whose event image is the rendered change at ``state`` itself."""
    d = render_delta_Ir(gmap, state, None, dtau, INTR).image.values
    return EventKeyframe(d * scale, 0.5, dtau, 1000)


# -- render_delta_Ir -------------------------------------------------------------

def test_static_camera_zero_change():
    gmap = random_map(30, seed=1)
    d = render_delta_Ir(gmap, MotionState(np.eye(4)), None, 0.05, INTR)
    assert not d.image.values.any()
    assert d.image.kind == "rendered"


def test_velocity_antisymmetry():
    gmap = random_map(40, seed=2)
    s = _state(1)
    a = render_delta_Ir(gmap, s, None, 0.04, INTR).image.values
    b = render_delta_Ir(gmap, s.with_velocity(-s.v, -s.omega), None, 0.04, INTR).image.values
    np.testing.assert_allclose(a, -b, atol=1e-9)


@pytest.mark.parametrize("direction", [1, -1])
def test_edge_response(direction):
    # thin bright vertical bar at x = 0 in front of a near-uniform backdrop
    gmap = gray_map([[0, 0, 2.0], [0, 0, 4.0]], [[0.01, 3.0, 0.01], [20.0, 20.0, 0.01]],
                    [0.99, 0.99], [0.9, 0.3])
    state = MotionState(np.eye(4), [-0.5 * direction, 0, 0])
    row = render_delta_Ir(gmap, state, None, 0.02, INTR).image.values[32]
    c = INTR.cx
    u = np.arange(INTR.width)
    near = np.abs(u - c) < 4
    assert np.abs(row[near]).sum() > 0.99 * np.abs(row).sum()
    left, right = row[(u < c) & near], row[(u > c) & near]
    # the bar slides against the motion: brighter on its leading side, darker behind
    assert np.all(np.sign(left[np.abs(left) > 1e-6]) == direction)
    assert np.all(np.sign(right[np.abs(right) > 1e-6]) == -direction)
    np.testing.assert_allclose(left.sum(), -right.sum(), rtol=0.05)


# -- normalized loss -------------------------------------------------------------

def test_loss_identical_images():
    img = np.random.default_rng(0).normal(size=(8, 8))
    loss, grad = normalized_loss(img, img)
    assert loss == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(grad, 0.0, atol=1e-14)


@given(st.floats(1e-6, 1e6))
@settings(max_examples=50, deadline=None)
def test_loss_contrast_invariance(k):
    rng = np.random.default_rng(7)
    r, e = rng.normal(size=(10, 12)), rng.normal(size=(10, 12))
    mask = rng.random((10, 12)) > 0.3
    assert normalized_loss(r, k * e, mask)[0] == pytest.approx(normalized_loss(r, e, mask)[0],
                                                                rel=1e-12, abs=1e-15)


def test_loss_gradient_fd():
    rng = np.random.default_rng(3)
    r, e = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
    mask = rng.random((16, 16)) > 0.2
    _, grad = normalized_loss(r, e, mask)
    h = 1e-6
    for _ in range(20):
        i, j = rng.integers(0, 16, 2)
        rp, rm = r.copy(), r.copy()
        rp[i, j] += h
        rm[i, j] -= h
        fd = (normalized_loss(rp, e, mask)[0] - normalized_loss(rm, e, mask)[0]) / (2 * h)
        if mask[i, j]:
            assert abs(grad[i, j] - fd) <= 1e-6 * abs(fd) + 1e-9
        else:
            assert grad[i, j] == 0 and abs(fd) < 1e-9


def test_loss_degenerate_and_errors():
    loss, grad = normalized_loss(np.zeros((4, 4)), np.ones((4, 4)))
    assert loss == 2.0 and not grad.any()
    with pytest.raises(ValueError):
        normalized_loss(np.zeros((4, 4)), np.zeros((4, 5)))


# -- mask and preprocessing ---------------------------------------------------------

def test_mask_single_event():
    img = np.zeros((20, 20))
    img[10, 10] = 1
    m = event_mask(img, TrackerConfig(mask_dilation=2))
    expected = np.zeros((20, 20), bool)
    expected[8:13, 8:13] = True
    np.testing.assert_array_equal(m, expected)
    assert not event_mask(np.zeros((20, 20)), TrackerConfig()).any()


def test_mask_matches_brute_force():
    rng = np.random.default_rng(5)
    img = rng.integers(-2, 3, (24, 30)) * (rng.random((24, 30)) > 0.9)
    cfg = TrackerConfig(mask_dilation=3, mask_threshold=2)
    seed = np.abs(img) >= 2
    expected = np.zeros_like(seed)
    for i in range(24):
        for j in range(30):
            expected[i, j] = seed[max(i - 3, 0):i + 4, max(j - 3, 0):j + 4].any()
    np.testing.assert_array_equal(event_mask(img, cfg), expected)


def test_preprocess_identity_and_constant():
    img = np.random.default_rng(1).normal(size=(16, 16))
    np.testing.assert_array_equal(preprocess(img, 0, TrackerConfig(blur_sigma=0.0)), img)
    const = np.full((64, 64), 3.0)
    cfg = TrackerConfig(blur_sigma=1.0)
    out = preprocess(const, 1, cfg)
    assert out.shape == (32, 32)
    # blur pads with zeros, so only pixels at least 4 sigma from the border are untouched
    np.testing.assert_allclose(out[5:-5, 5:-5], 3.0, rtol=1e-12)
    np.testing.assert_allclose(tracker.average_pool(const, 4), 3.0)


def test_blur_matches_direct_convolution():
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    sigma = 1.7
    out = tracker.gaussian_blur(img, sigma)
    radius = int(4.0 * sigma + 0.5)
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k /= k.sum()
    direct = np.zeros_like(img)
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            direct[20 + di, 20 + dj] = k[di + radius] * k[dj + radius]
    np.testing.assert_allclose(out, direct, atol=1e-9)


def test_preprocess_level_bound():
    with pytest.raises(ValueError):
        preprocess(np.zeros((8, 8)), 3, TrackerConfig(pyramid_levels=3))


def test_config_validation():
    for bad in ({"pyramid_levels": 0}, {"pyramid_levels": 6}, {"lr_rotation": -1},
                {"max_iters": 0}, {"beta1": 1.0}):
        with pytest.raises(ValueError):
            TrackerConfig(**bad)


# -- stages -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def scene():
    return random_map(120, seed=4, scale=(0.03, 0.08))


def test_coarse_stationary_at_truth(scene):
    s = _state(2)
    kf = _exact_keyframe(scene, s)
    cfg = TrackerConfig(pyramid_levels=1, max_iters=10)
    res = coarse_stage(scene, s, kf, INTR, cfg)
    np.testing.assert_allclose(res.state.T_cw, s.T_cw, atol=1e-6)
    obj = tracker.Objective(scene, INTR, prepare_target(kf, cfg), 0, True, cfg)
    assert np.linalg.norm(obj.evaluate(s)[1]) < 1e-8


def test_fine_stationary_at_truth(scene):
    s = _state(3)
    kf = _exact_keyframe(scene, s)
    cfg = TrackerConfig(pyramid_levels=1, max_iters=10)
    res = fine_stage(scene, s, kf, INTR, cfg)
    np.testing.assert_allclose(res.state.T_cw, s.T_cw, atol=1e-6)
    np.testing.assert_allclose(res.state.v, s.v, atol=1e-6)
    obj = tracker.Objective(scene, INTR, prepare_target(kf, cfg), 0, False, cfg)
    assert np.linalg.norm(obj.evaluate(s)[1]) < 1e-8


def test_coarse_is_sign_blind(scene):
    truth = _state(4)
    kf = _exact_keyframe(scene, truth)
    flipped = EventKeyframe(-kf.delta_Ie, kf.tau, kf.delta_tau, kf.count)
    start = MotionState(v2t([0.01, 0, 0], [0, 0.01, 0]) @ truth.T_cw, truth.v, truth.omega)
    cfg = TrackerConfig(pyramid_levels=2, max_iters=8)
    a = coarse_stage(scene, start, kf, INTR, cfg)
    b = coarse_stage(scene, start, flipped, INTR, cfg)
    np.testing.assert_array_equal(a.state.T_cw, b.state.T_cw)
    assert a.losses == b.losses


def test_accepted_steps_never_increase_loss(scene):
    truth = _state(5)
    kf = _exact_keyframe(scene, truth)
    start = MotionState(v2t([0.02, -0.01, 0], [0.01, 0, 0]) @ truth.T_cw, truth.v, truth.omega)
    res = fine_stage(scene, start, kf, INTR, TrackerConfig(pyramid_levels=1, max_iters=25))
    assert np.all(np.diff(res.losses) <= 0)
    assert res.losses[-1] < res.losses[0]


def test_coarse_velocity_frozen(scene):
    truth = _state(6)
    kf = _exact_keyframe(scene, truth)
    start = MotionState(v2t([0.02, 0, 0], np.zeros(3)) @ truth.T_cw, truth.v, truth.omega)
    res = coarse_stage(scene, start, kf, INTR, TrackerConfig(pyramid_levels=2, max_iters=5))
    np.testing.assert_array_equal(res.state.v, truth.v)
    np.testing.assert_array_equal(res.state.omega, truth.omega)


def test_slope_rule():
    cfg = TrackerConfig(slope_window=3, slope_epsilon=0.01)
    assert not tracker._slope_converged([1.0, 0.9, 0.8], cfg, 1.0)
    assert not tracker._slope_converged([1.0, 0.9, 0.8, 0.7], cfg, 1.0)
    assert tracker._slope_converged([1.0, 0.999, 0.998, 0.997], cfg, 1.0)


# -- sequences ------------------------------------------------------------------------

def test_empty_stream():
    res = track_sequence(random_map(5, seed=0), MotionState(np.eye(4)), EventArray.empty(),
                         FrontendConfig(10, 64, 64), INTR, TrackerConfig())
    assert len(res.trajectory) == 0 and res.diagnostics == []


def test_skipped_keyframes_follow_prediction():
    # events below the mask threshold everywhere: +1 then -1 at each pixel
    n = 40
    x = np.repeat(np.arange(n // 2), 2)
    ev = EventArray(np.arange(n) * 0.01, x, np.zeros(n), np.tile([1, -1], n // 2))
    T = v2t([0.1, 0, 0], np.zeros(3))
    res = track_sequence(random_map(5, seed=0), MotionState(T), ev, FrontendConfig(10, 64, 64),
                         INTR, TrackerConfig())
    assert len(res.trajectory) == 4
    assert all(d.skipped for d in res.diagnostics)
    for pose in res.trajectory.poses:
        np.testing.assert_array_equal(pose, T)


def test_divergent_keyframe_keeps_prediction(scene, monkeypatch):
    truth = _state(7)
    kf = _exact_keyframe(scene, truth)

    def bad_fine(gmap, state, kf, intr, cfg, target=None):
        out = tracker.StageResult(MotionState(v2t([0.2, 0, 0], np.zeros(3)) @ state.T_cw,
                                              state.v, state.omega))
        out.iterations = 1
        return out

    monkeypatch.setattr(tracker, "fine_stage", bad_fine)
    state, rec = track_keyframe(scene, truth, kf, INTR, TrackerConfig(coarse=False), 0)
    assert rec.divergent
    np.testing.assert_array_equal(state.T_cw, truth.T_cw)
    assert rec.as_dict()["divergent"] is True

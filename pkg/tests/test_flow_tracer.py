import numpy as np
import pytest

from conftest import textured
from core import AnomalyEvent, BBox, Branch, ConfigError, InsufficientHistoryError, TimeStamp
from flow_tracer import (FlowParams, arbitrate, backward_trace, knn_outlier_filter, lk_step, locate_crash_frame,
                         moving_window_detect, peak_suppress, seed_points, write_series)

BOX = BBox(40, 30, 120, 90)


def _vehicle_frames(stop_frame, n_frames, speed=3.0):
    """Flat background, textured vehicle moving right at `speed` px/frame until stop_frame."""
    vehicle = textured(30, 40, seed=5, low=60, high=250)
    frames = []
    for t in range(n_frames):
        x = 10 + int(speed * min(t, stop_frame))
        frame = np.full((80, 220), 100, np.uint8)
        frame[25:55, x:x + 40] = vehicle
        frames.append(frame)
    return frames, BBox(10 + speed * stop_frame, 25, 50 + speed * stop_frame, 55)


def test_lk_step_recovers_integer_translation():
    prev = textured(120, 160, seed=1)
    cur = np.roll(prev, 2, axis=1)
    points = seed_points(BOX, cur, 50)
    stepped = [p for p in lk_step(cur, prev, points) if p.tracked]
    assert len(stepped) >= 40
    for p in stepped:
        assert p.u == pytest.approx(2.0, abs=0.2)
        assert p.v == pytest.approx(0.0, abs=0.2)


def test_lk_step_static_and_featureless():
    frame = textured(120, 160, seed=2)
    stepped = lk_step(frame, frame.copy(), seed_points(BOX, frame, 30))
    assert all(abs(p.u) < 0.05 and abs(p.v) < 0.05 for p in stepped if p.tracked)

    flat = np.full((60, 60), 128, np.uint8)
    (p,) = lk_step(flat, flat, np.array([[30.0, 30.0]]))
    assert not p.tracked


def test_seed_points_stay_inside_box():
    frame = textured(120, 160, seed=3)
    points = seed_points(BOX, frame, 50)
    assert len(points) == 50
    assert all(BOX.x1 <= p.x <= BOX.x2 and BOX.y1 <= p.y <= BOX.y2 for p in points)
    assert seed_points(BOX, np.full((120, 160), 90, np.uint8), 50) == []


def test_seed_points_on_checkerboard_land_on_crossings():
    board = ((np.arange(96)[:, None] // 8 + np.arange(96)[None, :] // 8) % 2 * 200 + 30).astype(np.uint8)
    points = seed_points(BBox(16, 16, 80, 80), board, 20)
    assert points
    for p in points:
        assert abs(p.x - 8 * round(p.x / 8)) <= 2
        assert abs(p.y - 8 * round(p.y / 8)) <= 2


def _brute_force_inliers(d, k, thresh):
    dist = np.linalg.norm(d[:, None, :] - d[None, :, :], axis=-1)
    nearest = np.sort(dist, axis=1)[:, 1:k + 1]
    return nearest.mean(axis=1) <= thresh


def test_knn_filter_examples(rng):
    same = np.tile([1.5, -0.5], (20, 1))
    assert knn_outlier_filter(same).all()

    cluster = np.vstack([rng.normal([1.0, 1.0], 0.3, size=(49, 2)), [[101.0, 1.0]]])
    keep = knn_outlier_filter(cluster)
    assert keep[:49].all() and not keep[49]

    two = np.vstack([rng.normal([0.0, 0.0], 0.1, size=(25, 2)), rng.normal([3.0, 0.0], 0.1, size=(25, 2))])
    assert knn_outlier_filter(two).all()

    assert knn_outlier_filter(np.zeros((3, 2))).all()


def test_knn_filter_matches_brute_force(rng):
    for _ in range(100):
        d = rng.normal(0, 5, size=(int(rng.integers(7, 60)), 2))
        np.testing.assert_array_equal(knn_outlier_filter(d, 6, 6.6), _brute_force_inliers(d, 6, 6.6))


def test_backward_trace_static_vehicle():
    frames, box = _vehicle_frames(stop_frame=0, n_frames=80)
    series = backward_trace(box, 79, frames)
    assert len(series) == 79
    assert (series.magnitudes < 0.1).all()


def test_backward_trace_sees_the_stop():
    frames, box = _vehicle_frames(stop_frame=40, n_frames=80)
    series = backward_trace(box, 79, frames)
    m = dict(zip(series.frame_indices, series.magnitudes))
    assert np.median([m[t] for t in range(10, 38)]) == pytest.approx(3.0, abs=0.3)
    assert max(m[t] for t in range(44, 80)) < 0.5


def test_peak_suppress_examples():
    flat = np.full(30, 2.0)
    np.testing.assert_array_equal(peak_suppress(flat, 5), flat)

    impulse = flat.copy()
    impulse[12] = 10.0
    cleaned = peak_suppress(impulse, 5)
    assert cleaned[12] == 0.0
    np.testing.assert_array_equal(np.delete(cleaned, 12), np.delete(impulse, 12))

    crash = flat.copy()
    crash[10:21] = 10.0
    np.testing.assert_array_equal(peak_suppress(crash, 5), crash)


def test_peak_suppress_keeps_a_genuine_crash_spike():
    series = np.full(200, 3.0)
    series[100:105] = [11.6, 11.8, 12.0, 11.9, 11.7]
    cleaned = peak_suppress(series, 5)
    assert np.flatnonzero(cleaned != series).tolist() == [102]
    assert cleaned[102] == 0.0
    assert moving_window_detect(cleaned, 60) == 100
    np.testing.assert_array_equal(peak_suppress(series, 5, tolerance=0.1), series)


def test_spikes_touching_the_series_ends_are_found():
    head = np.full(200, 3.0)
    head[:2] = 12.0
    assert moving_window_detect(head, 60) == 0
    tail = np.full(200, 3.0)
    tail[-2:] = 12.0
    assert moving_window_detect(tail, 60) == 198


def test_moving_window_detect_examples():
    assert moving_window_detect(np.full(200, 3.0), 60) is None
    spike = np.full(200, 3.0)
    spike[100] = 12.0
    assert moving_window_detect(spike, 60) == 100
    assert moving_window_detect(np.linspace(0, 3, 390), 60) is None
    with pytest.raises(InsufficientHistoryError):
        moving_window_detect(np.zeros(59), 60)


def test_short_spikes_are_found_and_long_ones_are_not():
    for k in range(1, 6):
        series = np.full(200, 3.0)
        series[100:100 + k] = 12.0
        assert moving_window_detect(series, 60) == 100
    series = np.full(200, 3.0)
    series[100:106] = 12.0
    assert moving_window_detect(series, 60) is None


def test_arbitrate():
    assert arbitrate(None, None) is None
    assert arbitrate(50.0, None) == (50.0, Branch.TRAJECTORY_REFINED)
    assert arbitrate(None, 48.0) == (48.0, Branch.FLOW_REFINED)
    assert arbitrate(50.0, 51.5) == (51.5, Branch.FLOW_REFINED)
    assert arbitrate(50.0, 40.0) == (40.0, Branch.FLOW_REFINED)
    assert arbitrate(40.0, 50.0) == (40.0, Branch.TRAJECTORY_REFINED)


def test_locate_crash_frame_abstains_on_short_history(tmp_path):
    frames, box = _vehicle_frames(stop_frame=0, n_frames=20)
    event = AnomalyEvent('cam', TimeStamp(19 / 10), box, 0.8, Branch.FUSED)
    frame, series = locate_crash_frame(event, frames, 10.0)
    assert frame is None
    assert len(series) == 19

    path = write_series(series, tmp_path / 'series.tsv')
    lines = path.read_text().splitlines()
    assert lines[0] == "frame\tu\tv\tm\tactive"
    assert len(lines) == 20


def test_flow_params_validation():
    with pytest.raises(ConfigError):
        FlowParams(n_points=5)
    with pytest.raises(ConfigError):
        FlowParams(trace_len=30)

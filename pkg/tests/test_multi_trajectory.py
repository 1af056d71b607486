from types import SimpleNamespace

import numpy as np
import pytest

from core import AnomalyEvent, BBox, Branch, InsufficientHistoryError, TimeStamp
from box_tracker import TrackPoint
from multi_trajectory import (CurveParams, build_window, count_abnormal_curves, line_fit_error,
                              locate_crash_interval, offtrack_filter, refine_with_trajectories, write_curve_counts)
from road_mask import RoadMask

FPS = 10.0
ANCHOR = 100.0


def _track(tid, points, start_frame, size=10.0):
    history = [TrackPoint(start_frame + i, BBox.from_center(x, y, size, size), 0.9) for i, (x, y) in enumerate(points)]
    return SimpleNamespace(id=tid, history=history)


def _straight(n, y=50.0, step=6.0):
    return [(10 + step * i, y) for i in range(n)]


def _zigzag(n, y=50.0, step=6.0, amplitude=10.0):
    return [(10 + step * i, y + (amplitude if i % 2 else -amplitude)) for i in range(n)]


def _frame_of_interval(idx):
    return int((ANCHOR - CurveParams().window_before_s + idx) * FPS)


def _mask_rows(h, w, rows):
    mask = np.zeros((h, w), bool)
    mask[rows] = True
    hits = mask.astype(np.int32)
    return RoadMask(mask, hits, hits)


def _brute_force_error(points):
    pts = np.asarray(points, dtype=np.float64)
    best = np.inf
    for theta in np.linspace(0, np.pi, 20001):
        proj = pts @ np.array([np.cos(theta), np.sin(theta)])
        best = min(best, float(np.mean((proj - proj.mean()) ** 2)))
    return best


def test_line_fit_error_examples():
    assert line_fit_error([(i, 2 * i + 1) for i in range(10)]) == pytest.approx(0.0, abs=1e-9)
    assert line_fit_error([(5.0, float(y)) for y in range(10)]) == pytest.approx(0.0, abs=1e-9)
    elbow = [(float(x), 0.0) for x in range(11)] + [(0.0, float(y)) for y in range(1, 11)]
    assert line_fit_error(elbow) == pytest.approx(_brute_force_error(elbow), rel=1e-4)
    with pytest.raises(InsufficientHistoryError):
        line_fit_error([(1.0, 1.0)])


def test_line_fit_error_is_translation_invariant(rng):
    for _ in range(100):
        pts = rng.uniform(0, 100, size=(12, 2))
        shift = rng.uniform(-500, 500, size=2)
        assert line_fit_error(pts + shift) == pytest.approx(line_fit_error(pts), rel=1e-6, abs=1e-6)


def test_window_has_one_bin_per_interval():
    params = CurveParams()
    track = _track(1, _straight(300), start_frame=_frame_of_interval(-2))
    window = build_window([track], ANCHOR, FPS, params)
    assert len(window.intervals) == 26
    assert window.start_seconds == 80.0
    for idx, segments in enumerate(window.intervals):
        (seg,) = segments
        assert len(seg.points) == 10
        first_frame = _frame_of_interval(idx)
        expected = [p for p in track.history if first_frame <= p.frame_idx < first_frame + 10]
        assert seg.points[0] == pytest.approx(((expected[0].bbox.x1 + expected[0].bbox.x2) / 2, 50.0))


def test_straight_traffic_counts_nothing():
    tracks = [_track(i, _straight(260, y=20.0 * i), _frame_of_interval(0)) for i in range(1, 4)]
    window = build_window(tracks, ANCHOR, FPS, CurveParams())
    assert count_abnormal_curves(window, CurveParams()) == [0] * 26


def test_single_swerve_counts_in_its_interval():
    tracks = [
        _track(1, _straight(260), _frame_of_interval(0)),
        _track(2, _zigzag(10, y=90.0), _frame_of_interval(20)),
    ]
    counts = count_abnormal_curves(build_window(tracks, ANCHOR, FPS, CurveParams()), CurveParams())
    assert counts[20] >= 1
    assert sum(counts) == counts[20]


def test_dodging_vehicles_add_up():
    tracks = [_track(i, _zigzag(20, y=30.0 * i), _frame_of_interval(20)) for i in range(1, 4)]
    counts = count_abnormal_curves(build_window(tracks, ANCHOR, FPS, CurveParams()), CurveParams())
    assert counts[20] + counts[21] >= 3


def test_short_segments_and_off_road_segments_are_ignored():
    tracks = [_track(1, _zigzag(6, y=150.0), _frame_of_interval(20))]
    assert sum(count_abnormal_curves(build_window(tracks, ANCHOR, FPS, CurveParams()), CurveParams())) == 0

    tracks = [_track(1, _zigzag(10, y=150.0), _frame_of_interval(20))]
    road = _mask_rows(200, 300, slice(0, 100))
    window = build_window(tracks, ANCHOR, FPS, CurveParams())
    assert sum(count_abnormal_curves(window, CurveParams(), road)) == 0
    assert sum(count_abnormal_curves(window, CurveParams(), None)) == 1


def test_locate_crash_interval_examples():
    params = CurveParams()
    assert locate_crash_interval([0] * 26, params) is None
    assert locate_crash_interval([0] * 20 + [5, 1] + [0] * 4, params) == 20
    assert locate_crash_interval([3] * 26, params) is None
    assert locate_crash_interval([0] * 25 + [1], params) is None
    assert locate_crash_interval([], params) is None


def test_offtrack_filter_examples():
    params = CurveParams()
    road = _mask_rows(200, 300, slice(0, 100))

    on_road = _track(1, _straight(100, y=40.0, step=2.0), _frame_of_interval(0))
    assert offtrack_filter(build_window([on_road], ANCHOR, FPS, params), road, params) == {}

    leaving = _track(2, _zigzag(100, y=150.0, step=2.0, amplitude=3.9), _frame_of_interval(0), size=8.0)
    flagged = offtrack_filter(build_window([leaving], ANCHOR, FPS, params), road, params)
    assert flagged == {2: list(range(10))}

    tiny = _track(3, _zigzag(100, y=150.0, step=2.0, amplitude=3.9), _frame_of_interval(0), size=np.sqrt(20.0))
    assert offtrack_filter(build_window([tiny], ANCHOR, FPS, params), road, params) == {}


def _event():
    return AnomalyEvent('cam', TimeStamp(ANCHOR), BBox(0, 0, 20, 20), 0.7, Branch.FUSED)


def test_refine_moves_start_to_curve_peak():
    tracks = [_track(i, _zigzag(10, y=40.0 * i), _frame_of_interval(22)) for i in (1, 2)]
    tracks.append(_track(3, _straight(260, y=10.0), _frame_of_interval(0)))
    refined, analysis = refine_with_trajectories(_event(), tracks, None, FPS, CurveParams())
    assert analysis.crash_interval == 22
    assert analysis.n_series[22] == 2
    assert refined.branch == Branch.TRAJECTORY_REFINED
    assert refined.start_seconds == pytest.approx(102.0)


def test_refine_ignores_platform_of_curved_road():
    # a bending road makes every vehicle look abnormal in every interval
    tracks = [_track(i, _zigzag(260, y=40.0 * i), _frame_of_interval(0)) for i in (1, 2, 3)]
    event = _event()
    refined, analysis = refine_with_trajectories(event, tracks, None, FPS, CurveParams())
    assert analysis.n_series == (3,) * 26
    assert analysis.crash_interval is None
    assert refined is event


def test_offtrack_vehicles_raise_confidence():
    params = CurveParams(offtrack_min_freq=8)
    road = _mask_rows(200, 300, slice(0, 100))
    leaving = _track(2, _zigzag(100, y=150.0, step=2.0, amplitude=3.9), _frame_of_interval(0), size=8.0)
    refined, analysis = refine_with_trajectories(_event(), [leaving], road, FPS, params)
    assert analysis.offtrack == {2: list(range(10))}
    assert refined.confidence == pytest.approx(0.75)


def test_write_curve_counts(tmp_path):
    tracks = [_track(i, _zigzag(10, y=40.0 * i), _frame_of_interval(22)) for i in (1, 2)]
    _, analysis = refine_with_trajectories(_event(), tracks, None, FPS, CurveParams())
    path = write_curve_counts(analysis, tmp_path / 'curves.tsv')
    lines = path.read_text().splitlines()
    assert lines[0] == "interval\tstart_s\tn"
    assert len(lines) == 27
    assert lines[23] == "22\t102.0\t2"

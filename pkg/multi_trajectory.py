import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core import Branch, ConfigError, InsufficientHistoryError, bbox_center

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CurveParams:
    fit_error_thresh: float = 30.0
    min_traj_points: int = 10
    offtrack_area_thresh: float = 40.0
    offtrack_error_thresh: float = 10.0
    offtrack_min_freq: int = 8
    offtrack_bonus: float = 0.05
    peak_min: int = 2
    platform_ratio: float = 3.0
    window_before_s: float = 20.0
    window_after_s: float = 6.0
    interval_s: float = 1.0
    on_road_fraction: float = 0.5

    def __post_init__(self):
        if min(self.fit_error_thresh, self.min_traj_points, self.offtrack_area_thresh,
               self.offtrack_error_thresh, self.offtrack_min_freq, self.interval_s) <= 0:
            raise ConfigError("curve: thresholds must be positive")

    @property
    def n_intervals(self):
        return int(round((self.window_before_s + self.window_after_s) / self.interval_s))


@dataclass(frozen=True)
class Segment:
    """Centre points and box areas of one vehicle inside one interval."""
    track_id: int
    points: tuple
    areas: tuple

    @property
    def mean_area(self):
        return float(np.mean(self.areas)) if self.areas else 0.0


@dataclass
class TrajectoryWindow:
    start_seconds: float
    interval_s: float
    intervals: list = field(default_factory=list)

    def interval_of(self, seconds):
        idx = math.floor((seconds - self.start_seconds) / self.interval_s + 1e-9)
        return idx if 0 <= idx < len(self.intervals) else None

    def interval_start(self, idx):
        return self.start_seconds + idx * self.interval_s


@dataclass(frozen=True)
class CurveAnalysis:
    n_series: tuple
    offtrack: dict
    crash_interval: object
    window_start: float
    interval_s: float = 1.0


def build_window(tracks, anchor_seconds, fps, params):
    """Bin every track's centre points into the intervals around the anchor."""
    window = TrajectoryWindow(anchor_seconds - params.window_before_s, params.interval_s,
                              [dict() for _ in range(params.n_intervals)])
    for track in tracks:
        for p in track.history:
            idx = window.interval_of(p.frame_idx / fps)
            if idx is None:
                continue
            points, areas = window.intervals[idx].setdefault(track.id, ([], []))
            points.append(bbox_center(p.bbox))
            areas.append(p.bbox.area)
    window.intervals = [
        [Segment(tid, tuple(pts), tuple(areas)) for tid, (pts, areas) in sorted(bucket.items())]
        for bucket in window.intervals
    ]
    return window


def line_fit_error(points):
    """Mean squared perpendicular distance to the orthogonal-regression line."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise InsufficientHistoryError(f"Line fit needs at least 2 points, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    return float(singular[-1] ** 2 / len(pts))


def _on_road(segment, road_mask, params):
    if road_mask is None:
        return True
    return road_mask.fraction_inside(segment.points) >= params.on_road_fraction


def count_abnormal_curves(window, params, road_mask=None):
    counts = []
    for segments in window.intervals:
        n = 0
        for seg in segments:
            if len(seg.points) < params.min_traj_points or not _on_road(seg, road_mask, params):
                continue
            if line_fit_error(seg.points) > params.fit_error_thresh:
                n += 1
        counts.append(n)
    return counts


def offtrack_filter(window, road_mask, params):
    """Track ids that repeatedly curve off the road, with the intervals where they do."""
    hits = {}
    for idx, segments in enumerate(window.intervals):
        for seg in segments:
            if len(seg.points) < max(2, params.min_traj_points):
                continue
            if seg.mean_area < params.offtrack_area_thresh or _on_road(seg, road_mask, params):
                continue
            if line_fit_error(seg.points) > params.offtrack_error_thresh:
                hits.setdefault(seg.track_id, []).append(idx)
    return {tid: idxs for tid, idxs in hits.items() if len(idxs) >= params.offtrack_min_freq}


def locate_crash_interval(n_series, params):
    """Index of a genuine peak in the abnormal-curve counts, or None for flat series."""
    n = np.asarray(n_series, dtype=np.float64)
    if n.size == 0:
        return None
    peak = n.max()
    if peak < params.peak_min:
        return None
    nonzero = n[n > 0]
    if len(nonzero) >= 3 and np.all(nonzero == nonzero[0]):
        return None
    if peak < params.platform_ratio * np.median(n):
        return None
    return int(np.argmax(n))


def analyze_window(window, road_mask, params):
    counts = count_abnormal_curves(window, params, road_mask)
    offtrack = offtrack_filter(window, road_mask, params)
    for idxs in offtrack.values():
        for idx in idxs:
            counts[idx] += 1
    return CurveAnalysis(tuple(counts), offtrack, locate_crash_interval(counts, params),
                         window.start_seconds, window.interval_s)


def refine_with_trajectories(event, tracks, road_mask, fps, params):
    """Move the event to the crash interval when the curve counts peak; returns (event, analysis)."""
    window = build_window(tracks, event.start_seconds, fps, params)
    analysis = analyze_window(window, road_mask, params)
    refined = event
    if analysis.offtrack:
        bonus = params.offtrack_bonus * len(analysis.offtrack)
        refined = refined.refined(refined.start_seconds, note=f"{len(analysis.offtrack)} off-track vehicles",
                                  confidence=min(1.0, refined.confidence + bonus))
    if analysis.crash_interval is None:
        logger.debug(f"{event.video_id}: no abnormal-curve peak near {event.start_seconds:.1f}s")
        return refined, analysis
    seconds = window.interval_start(analysis.crash_interval)
    logger.info(f"📈 {event.video_id}: curve peak in interval {analysis.crash_interval}, start -> {seconds:.1f}s")
    return refined.refined(seconds, branch=Branch.TRAJECTORY_REFINED, note='curve peak'), analysis


def write_curve_counts(analysis, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write("interval\tstart_s\tn\n")
        for i, n in enumerate(analysis.n_series):
            f.write(f"{i}\t{analysis.window_start + i * analysis.interval_s:.1f}\t{n}\n")
    return path

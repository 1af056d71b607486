"""
Box-level tracking with identity retrieval, and the duration / frequency /
stability rules that turn background-stream tracks into anomaly events.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from filterpy.kalman import KalmanFilter
from scipy.optimize import linear_sum_assignment

from core import AnomalyEvent, BBox, Branch, ConfigError, TimeStamp, bbox_center, iou

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackerParams:
    iou_gate: float = 0.1
    min_hits: int = 3
    max_age: int = 30
    retrieve_gap: int = 300

    def __post_init__(self):
        if self.min_hits < 1 or self.max_age < 1:
            raise ConfigError("tracker: min_hits and max_age must be >= 1")
        if self.retrieve_gap < 0:
            raise ConfigError("tracker: retrieve_gap must be >= 0")


@dataclass(frozen=True)
class AnomalyCriteria:
    min_duration_s: float = 40.0
    window_s: float = 10.0
    window_count: int = 5
    min_windows_present: int = 4
    iou_retrieve_thresh: float = 0.3
    center_std_max: float = 3.0

    def __post_init__(self):
        if self.min_windows_present > self.window_count:
            raise ConfigError("criteria: min_windows_present cannot exceed window_count")


class TrackStatus(str, Enum):
    TENTATIVE = 'tentative'
    CONFIRMED = 'confirmed'
    LOST = 'lost'


@dataclass(frozen=True)
class TrackPoint:
    frame_idx: int
    bbox: BBox
    score: float


def _new_filter(bbox):
    cx, cy = bbox_center(bbox)
    kf = KalmanFilter(dim_x=6, dim_z=4)
    kf.F = np.eye(6)
    kf.F[0, 4] = 1.0
    kf.F[1, 5] = 1.0
    kf.H = np.zeros((4, 6))
    kf.H[:, :4] = np.eye(4)
    kf.R = np.eye(4)
    kf.P = np.diag([10.0, 10.0, 10.0, 10.0, 1000.0, 1000.0])
    kf.Q = np.diag([1.0, 1.0, 1.0, 1.0, 0.01, 0.01])
    kf.x[:4, 0] = [cx, cy, bbox.width, bbox.height]
    return kf


def _measurement(bbox):
    cx, cy = bbox_center(bbox)
    return np.array([[cx], [cy], [bbox.width], [bbox.height]])


class Track:
    def __init__(self, track_id, detection):
        self.id = track_id
        self.history = [TrackPoint(detection.frame_idx, detection.bbox, detection.score)]
        self.status = TrackStatus.TENTATIVE
        self.kf = _new_filter(detection.bbox)
        self.hits = 1
        self.hit_streak = 1
        self.time_since_update = 0
        self.lost_step = None

    @property
    def first(self):
        return self.history[0]

    @property
    def last(self):
        return self.history[-1]

    @property
    def boxes(self):
        return [p.bbox for p in self.history]

    def predicted_box(self):
        cx, cy, w, h = self.kf.x[:4, 0]
        return BBox.from_center(cx, cy, w, h)

    def predict(self):
        self.kf.predict()
        self.time_since_update += 1
        return self.predicted_box()

    def update(self, detection, min_hits):
        if detection.frame_idx <= self.last.frame_idx:
            raise ValueError(
                f"Track {self.id}: frame {detection.frame_idx} not after {self.last.frame_idx}"
            )
        self.kf.update(_measurement(detection.bbox))
        self.history.append(TrackPoint(detection.frame_idx, detection.bbox, detection.score))
        self.hits += 1
        self.hit_streak += 1
        self.time_since_update = 0
        if self.status == TrackStatus.TENTATIVE and self.hit_streak >= min_hits:
            self.status = TrackStatus.CONFIRMED

    def absorb(self, other):
        """Continue this (lost) track with the history of a newly spawned one."""
        self.history.extend(other.history)
        self.kf = _new_filter(other.last.bbox)
        self.status = TrackStatus.CONFIRMED
        self.hits += other.hits
        self.hit_streak = other.hit_streak
        self.time_since_update = 0

    def __repr__(self):
        return f"Track(id={self.id}, status={self.status.value}, points={len(self.history)})"


def retrieve_id(lost_tracks, new_track, thresh=0.3):
    """Id of the lost track whose last box best overlaps the new track's first box."""
    best = None
    for lost in lost_tracks:
        if lost.last.frame_idx >= new_track.first.frame_idx:
            continue
        overlap = iou(lost.last.bbox, new_track.first.bbox)
        if overlap < thresh:
            continue
        key = (-overlap, lost.id)
        if best is None or key < best[0]:
            best = (key, lost.id)
    return None if best is None else best[1]


def associate(tracks, predicted, detections, gate):
    """Optimal IoU assignment; pairs under the gate are never matched."""
    if not tracks or not detections:
        return [], list(range(len(tracks))), list(range(len(detections)))
    iou_matrix = np.array([[iou(p, d.bbox) for d in detections] for p in predicted])
    rows, cols = linear_sum_assignment(-iou_matrix)
    matches = [(r, c) for r, c in zip(rows, cols) if iou_matrix[r, c] >= gate and iou_matrix[r, c] > 0]
    matched_t = {r for r, _ in matches}
    matched_d = {c for _, c in matches}
    unmatched_tracks = [i for i in range(len(tracks)) if i not in matched_t]
    unmatched_dets = [j for j in range(len(detections)) if j not in matched_d]
    return matches, unmatched_tracks, unmatched_dets


class BoxTracker:
    """SORT-style tracker stepped once per frame of its stream.

    Lost tracks stay eligible for id retrieval for `retrieve_gap` steps after
    they were lost, then move to `expired`.
    """

    def __init__(self, params=None, retrieve_thresh=0.3):
        self.params = params or TrackerParams()
        self.retrieve_thresh = retrieve_thresh
        self.active = []
        self.lost = []
        self.expired = []
        self.steps = 0
        self._next_id = 1
        self.last_frame = None

    def _allocate_id(self):
        track_id = self._next_id
        self._next_id += 1
        return track_id

    def step(self, detections, frame_idx):
        """Advance one frame: predict, associate, update, spawn and age tracks."""
        if self.last_frame is not None and frame_idx <= self.last_frame:
            raise ValueError(f"Frames must be strictly increasing: {frame_idx} after {self.last_frame}")
        self.last_frame = frame_idx
        self.steps += 1
        self._expire_lost()
        detections = sorted(detections, key=lambda d: (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2))

        predicted = [t.predict() for t in self.active]
        matches, unmatched_tracks, unmatched_dets = associate(
            self.active, predicted, detections, self.params.iou_gate
        )
        for t_idx, d_idx in matches:
            self.active[t_idx].update(detections[d_idx], self.params.min_hits)

        survivors = []
        for i, track in enumerate(self.active):
            if i in unmatched_tracks:
                track.hit_streak = 0
                if track.status == TrackStatus.TENTATIVE:
                    logger.debug(f"Dropped tentative track {track.id} at frame {frame_idx}")
                    continue
                if track.time_since_update >= self.params.max_age:
                    track.status = TrackStatus.LOST
                    track.lost_step = self.steps
                    self.lost.append(track)
                    logger.debug(f"Track {track.id} lost at frame {frame_idx}")
                    continue
            survivors.append(track)
        self.active = survivors

        for d_idx in unmatched_dets:
            self._spawn(detections[d_idx])
        return self.active

    def _expire_lost(self):
        gap = self.params.retrieve_gap
        if not self.lost or self.steps - self.lost[0].lost_step <= gap:
            return
        self.expired.extend(t for t in self.lost if self.steps - t.lost_step > gap)
        self.lost = [t for t in self.lost if self.steps - t.lost_step <= gap]

    def _spawn(self, detection):
        candidate = Track(0, detection)
        if self.params.min_hits <= 1:
            candidate.status = TrackStatus.CONFIRMED
        lost_id = retrieve_id(self.lost, candidate, self.retrieve_thresh)
        if lost_id is not None:
            previous = next(t for t in self.lost if t.id == lost_id)
            self.lost.remove(previous)
            previous.absorb(candidate)
            self.active.append(previous)
            logger.debug(f"Retrieved id {lost_id} at frame {detection.frame_idx}")
            return previous
        candidate.id = self._allocate_id()
        self.active.append(candidate)
        return candidate

    def run(self, detection_set, frame_indices=None):
        """Step every index in `frame_indices`, so tracks age on frames without detections.

        Without `frame_indices` only the frames that carry detections are stepped.
        """
        frames = detection_set.frames() if frame_indices is None else frame_indices
        for idx in frames:
            self.step(detection_set.at(idx), idx)
        return self.tracks()

    def tracks(self):
        """Every track that was ever confirmed, ordered by id."""
        kept = [t for t in self.active + self.lost + self.expired if t.status != TrackStatus.TENTATIVE]
        return sorted(kept, key=lambda t: t.id)


def tracker_step(tracker, detections_at_frame, frame_idx):
    return tracker.step(detections_at_frame, frame_idx)


def _stable_spans(points, std_max):
    """Maximal spans, scanned from each start, whose centre std stays under std_max."""
    centers = [bbox_center(p.bbox) for p in points]
    n = len(centers)
    i = 0
    while i < n - 1:
        sx = sy = sxx = syy = 0.0
        end = i
        for j in range(i, n):
            x, y = centers[j]
            sx, sy, sxx, syy = sx + x, sy + y, sxx + x * x, syy + y * y
            m = j - i + 1
            var_x = max(0.0, sxx / m - (sx / m) ** 2)
            var_y = max(0.0, syy / m - (sy / m) ** 2)
            if var_x >= std_max ** 2 or var_y >= std_max ** 2:
                break
            end = j
        if end > i:
            yield i, end
        i += 1


def _windows_present(points, end_frame, criteria, fps):
    frames = np.array([p.frame_idx for p in points])
    width = criteria.window_s * fps
    present = 0
    for w in range(criteria.window_count):
        hi = end_frame - w * width
        lo = hi - width
        if np.any((frames > lo) & (frames <= hi)):
            present += 1
    return present


def classify_box_anomalies(tracks, road_mask, criteria, fps, video_id):
    events = []
    for track in tracks:
        points = track.history
        if len(points) < 2:
            continue
        for i, j in _stable_spans(points, criteria.center_std_max):
            span = points[i:j + 1]
            duration = (span[-1].frame_idx - span[0].frame_idx) / fps
            if duration < criteria.min_duration_s:
                continue
            present = _windows_present(points, span[-1].frame_idx, criteria, fps)
            if present < criteria.min_windows_present:
                logger.debug(f"Track {track.id}: present in {present}/{criteria.window_count} windows")
                continue
            coords = np.median(np.array([p.bbox.as_tuple() for p in span]), axis=0)
            box = BBox(*(float(c) for c in coords))
            cx, cy = bbox_center(box)
            if road_mask is not None and not road_mask.contains_point(cx, cy):
                logger.debug(f"Track {track.id}: static off-road at ({cx:.0f}, {cy:.0f})")
                break
            confidence = float(np.clip(np.mean([p.score for p in span]), 0.0, 1.0))
            events.append(AnomalyEvent(
                video_id=video_id,
                start_time=TimeStamp.from_frame(span[0].frame_idx, fps),
                bbox=box,
                confidence=confidence,
                branch=Branch.BOX,
                history=(f"box: track {track.id} static {duration:.1f}s",),
            ))
            break
    logger.info(f"Box branch: {len(events)} candidate events from {len(tracks)} tracks")
    return events


def write_tracks(tracks, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for track in tracks:
            for p in track.history:
                b = p.bbox
                f.write(f"{track.id}\t{p.frame_idx}\t{b.x1:.2f}\t{b.y1:.2f}\t{b.x2:.2f}\t{b.y2:.2f}\n")
    return path

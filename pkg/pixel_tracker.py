import logging
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy import ndimage

from core import AnomalyEvent, BBox, Branch, ConfigError, TimeStamp, bbox_slices, iou

logger = logging.getLogger(__name__)


class PixelState(IntEnum):
    NORMAL = 0
    SUSPICIOUS = 1
    ANOMALOUS = 2


@dataclass(frozen=True)
class PixelTrackerParams:
    min_abnormal_duration_s: float = 60.0
    suspicious_duration_s: float = 40.0
    miss_tolerance_s: float = 2.0
    score_floor: float = 0.3
    dedup_iou: float = 0.5

    def __post_init__(self):
        if self.suspicious_duration_s >= self.min_abnormal_duration_s:
            raise ConfigError("pixel: suspicious_duration_s must be below min_abnormal_duration_s")

    def miss_tolerance_updates(self, fps, update_interval):
        return max(1, math.ceil(self.miss_tolerance_s * fps / update_interval))


class PixelStateGrid:
    """Six per-pixel matrices: detected, undetected, state, score, start, end."""

    def __init__(self, height, width):
        self.detected = np.zeros((height, width), dtype=np.int32)
        self.undetected = np.zeros((height, width), dtype=np.int32)
        self.state = np.zeros((height, width), dtype=np.uint8)
        self.score = np.zeros((height, width), dtype=np.float64)
        self.start = np.full((height, width), -1, dtype=np.int64)
        self.end = np.full((height, width), -1, dtype=np.int64)

    @property
    def shape(self):
        return self.detected.shape

    def reset(self, where):
        self.detected[where] = 0
        self.undetected[where] = 0
        self.state[where] = PixelState.NORMAL
        self.score[where] = 0.0
        self.start[where] = -1
        self.end[where] = -1


def coverage(detections, shape, score_floor):
    """Highest qualifying detection score covering each pixel (0 where uncovered)."""
    scores = np.zeros(shape, dtype=np.float64)
    for det in detections:
        if det.score < score_floor:
            continue
        rows, cols = bbox_slices(det.bbox, *shape)
        np.maximum(scores[rows, cols], det.score, out=scores[rows, cols])
    return scores


def pixel_update(grid, detections, frame_idx, params, fps, update_interval=1):
    covered_scores = coverage(detections, grid.shape, params.score_floor)
    covered = covered_scores > 0

    grid.detected[covered] += 1
    grid.undetected[covered] = 0
    fresh = covered & (grid.detected == 1)
    grid.start[fresh] = frame_idx
    n = np.maximum(grid.detected, 1)
    grid.score[covered] += (covered_scores[covered] - grid.score[covered]) / n[covered]
    grid.end[covered] = frame_idx

    grid.undetected[~covered] += 1
    expired = ~covered & (grid.undetected > params.miss_tolerance_updates(fps, update_interval))
    if expired.any():
        grid.reset(expired)

    running = grid.start >= 0
    elapsed = np.where(running, (frame_idx - grid.start) / fps, 0.0)
    suspicious = running & (elapsed >= params.suspicious_duration_s) & (grid.state < PixelState.SUSPICIOUS)
    grid.state[suspicious] = PixelState.SUSPICIOUS
    grid.state[running & (elapsed >= params.min_abnormal_duration_s)] = PixelState.ANOMALOUS
    return grid


def extract_pixel_anomalies(grid, road_mask, frame_idx, fps, video_id, recent_detections=()):
    anomalous = grid.state == PixelState.ANOMALOUS
    if road_mask is not None:
        anomalous &= road_mask.mask
    labels, count = ndimage.label(anomalous)
    events = []
    for i, slc in enumerate(ndimage.find_objects(labels), start=1):
        if slc is None:
            continue
        rows, cols = slc
        component = labels == i
        rect = BBox(float(cols.start), float(rows.start), float(cols.stop), float(rows.stop))
        best, best_iou = rect, 0.0
        for det in recent_detections:
            overlap = iou(det.bbox, rect)
            if overlap > best_iou:
                best, best_iou = det.bbox, overlap
        start_frame = int(grid.start[component].min())
        confidence = float(np.clip(grid.score[component].mean(), 0.0, 1.0))
        events.append(AnomalyEvent(
            video_id=video_id,
            start_time=TimeStamp.from_frame(max(start_frame, 0), fps),
            bbox=best,
            confidence=confidence,
            branch=Branch.PIXEL,
            history=(f"pixel: region {int(component.sum())} px anomalous at frame {frame_idx}",),
        ))
    return events


class PixelTracker:
    """Runs the grid over the sampled background stream and keeps every event seen."""

    def __init__(self, height, width, fps, update_interval, params=None, video_id=''):
        self.params = params or PixelTrackerParams()
        self.grid = PixelStateGrid(height, width)
        self.fps = fps
        self.update_interval = update_interval
        self.video_id = video_id
        self.recent = ()
        self.events = []

    def update(self, detections, frame_idx):
        self.recent = tuple(detections)
        pixel_update(self.grid, detections, frame_idx, self.params, self.fps, self.update_interval)

    def harvest(self, road_mask, frame_idx):
        """Extract current anomalies, skipping ones already reported."""
        tolerance = self.update_interval / self.fps
        added = []
        for event in extract_pixel_anomalies(self.grid, road_mask, frame_idx, self.fps,
                                             self.video_id, self.recent):
            duplicate = any(
                iou(event.bbox, seen.bbox) >= self.params.dedup_iou
                and abs(event.start_seconds - seen.start_seconds) <= tolerance
                for seen in self.events
            )
            if not duplicate:
                self.events.append(event)
                added.append(event)
        if added:
            logger.debug(f"Pixel branch: {len(added)} new events at frame {frame_idx}")
        return added

"""Shared geometric and temporal primitives."""
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class CrashTraceError(Exception):
    """Base class for every error raised by the pipeline"""


class IngestError(CrashTraceError):
    pass


class DimensionError(CrashTraceError, ValueError):
    pass


class InsufficientHistoryError(CrashTraceError, ValueError):
    pass


class ConfigError(CrashTraceError):
    pass


class ScenarioError(CrashTraceError):
    pass


class PipelineError(CrashTraceError):
    """A stage failure, tagged with where it happened"""

    def __init__(self, stage, video_id, frame_idx, cause):
        self.stage = stage
        self.video_id = video_id
        self.frame_idx = frame_idx
        self.cause = cause
        where = f"frame {frame_idx}" if frame_idx is not None else "no frame"
        super().__init__(f"[{stage}] video '{video_id}' failed at {where}: {cause}")


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"Non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"Box corners out of order: {coords}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def scaled(self, s):
        return BBox(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)

    def translated(self, dx, dy):
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_center(cls, cx, cy, w, h):
        w, h = max(w, 0.0), max(h, 0.0)
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a, b):
    """Intersection over union; zero-area pairs never match."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def bbox_center(b):
    return ((b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2)


def center_stability(track_window):
    """Population standard deviation of box centres along x and y."""
    boxes = list(track_window)
    if len(boxes) < 2:
        raise InsufficientHistoryError(
            f"Stability needs at least 2 boxes, got {len(boxes)}"
        )
    centers = np.array([bbox_center(b) for b in boxes], dtype=np.float64)
    std = centers.std(axis=0)
    return float(std[0]), float(std[1])


def bbox_slices(b, height, width):
    """Row/column slices covering the pixels a box touches, clipped to the image."""
    r0 = max(0, int(math.floor(b.y1)))
    r1 = min(height, int(math.ceil(b.y2)))
    c0 = max(0, int(math.floor(b.x1)))
    c1 = min(width, int(math.ceil(b.x2)))
    return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))


def clip_bbox(b, height, width):
    x1 = min(max(b.x1, 0.0), width)
    x2 = min(max(b.x2, 0.0), width)
    y1 = min(max(b.y1, 0.0), height)
    y2 = min(max(b.y2, 0.0), height)
    return BBox(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    frame_idx: int
    bbox: BBox
    score: float

    def __post_init__(self):
        if self.frame_idx < 0:
            raise ValueError(f"Negative frame index {self.frame_idx}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class TimeStamp:
    seconds: float

    def __post_init__(self):
        if not self.seconds >= 0:
            raise ValueError(f"Negative timestamp {self.seconds}")

    @classmethod
    def from_frame(cls, frame_idx, fps):
        return cls(frame_idx / fps)

    def to_frame(self, fps):
        return int(round(self.seconds * fps))


class Branch(str, Enum):
    PIXEL = 'pixel'
    BOX = 'box'
    FUSED = 'fused'
    FLOW_REFINED = 'flow-refined'
    TRAJECTORY_REFINED = 'trajectory-refined'


@dataclass(frozen=True)
class AnomalyEvent:
    video_id: str
    start_time: TimeStamp
    bbox: BBox
    confidence: float
    branch: Branch
    history: tuple = field(default=())

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"Event confidence {self.confidence} outside [0, 1]")

    @property
    def start_seconds(self):
        return self.start_time.seconds

    def refined(self, seconds, branch=None, note="", confidence=None):
        """Copy with a new start time, recording the step in the history."""
        entry = f"{note or 'refine'}: {self.start_time.seconds:.3f}s -> {seconds:.3f}s"
        return replace(
            self,
            start_time=TimeStamp(max(0.0, seconds)),
            branch=branch or self.branch,
            confidence=self.confidence if confidence is None else confidence,
            history=self.history + (entry,),
        )

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from core import ConfigError, DimensionError, bbox_slices
from ingest import as_gray_array

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MotionMaskParams:
    """Frame-difference settings.

    max_change_area bounds the changed area of one difference (camera shake
    guard, None means half the frame); min_region_area drops small blobs;
    area_filter rejects difference frames whose total change is too large.
    """
    k: int = 3
    binarize_thresh: int = 15
    max_change_area: float = None
    min_region_area: int = 30
    area_filter: int = 6000
    frame_stride: int = 1

    def __post_init__(self):
        if self.k < 1 or self.frame_stride < 1:
            raise ConfigError("motion: k and frame_stride must be >= 1")
        if self.min_region_area < 0:
            raise ConfigError("motion: min_region_area must be >= 0")
        if self.max_change_area is not None and self.max_change_area <= self.min_region_area:
            raise ConfigError("motion: max_change_area must exceed min_region_area")

    def change_limit(self, height, width):
        limit = 0.5 * height * width if self.max_change_area is None else self.max_change_area
        if self.area_filter:
            limit = min(limit, self.area_filter)
        return limit


@dataclass(frozen=True)
class RoadMaskParams:
    min_hits: int = 5
    dilate_iters: int = 2
    erode_iters: int = 2
    kernel_size: int = 5
    min_on_road_fraction: float = 0.5


@dataclass(frozen=True, eq=False)
class RoadMask:
    mask: np.ndarray
    motion_hits: np.ndarray
    trajectory_hits: np.ndarray

    @property
    def shape(self):
        return self.mask.shape

    @property
    def area(self):
        return int(np.count_nonzero(self.mask))

    def contains_point(self, x, y):
        r, c = int(np.floor(y)), int(np.floor(x))
        h, w = self.mask.shape
        return 0 <= r < h and 0 <= c < w and bool(self.mask[r, c])

    def fraction_inside(self, points):
        points = list(points)
        if not points:
            return 0.0
        return sum(self.contains_point(x, y) for x, y in points) / len(points)

    def covers_box(self, bbox, min_fraction=0.5):
        rows, cols = bbox_slices(bbox, *self.mask.shape)
        patch = self.mask[rows, cols]
        if patch.size == 0:
            return False
        return patch.mean() >= min_fraction

    def write_pgm(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(path), self.mask.astype(np.uint8) * 255)
        return path

    def save(self, path):
        np.savez_compressed(path, mask=self.mask, motion_hits=self.motion_hits,
                            trajectory_hits=self.trajectory_hits)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            return cls(data['mask'].astype(bool), data['motion_hits'], data['trajectory_hits'])


def changed_regions(frame_t, frame_tk, params):
    """Binarized difference with small blobs removed; None when the pair is rejected."""
    a = as_gray_array(frame_t).astype(np.int16)
    b = as_gray_array(frame_tk).astype(np.int16)
    if a.shape != b.shape:
        raise DimensionError(f"Difference of frames shaped {a.shape} and {b.shape}")
    diff = np.abs(a - b) > params.binarize_thresh
    changed = int(np.count_nonzero(diff))
    if changed > params.change_limit(*a.shape):
        return None
    if changed == 0:
        return diff
    labels, count = ndimage.label(diff, structure=EIGHT_CONNECTED)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= params.min_region_area
    keep[0] = False
    return keep[labels]


def motion_mask_update(acc, frame_t, frame_tk, params):
    regions = changed_regions(frame_t, frame_tk, params)
    if regions is None:
        logger.debug("Skipped difference pair over the change-area limit")
        return acc
    if regions.shape != acc.shape:
        raise DimensionError(f"Accumulator {acc.shape} vs frame {regions.shape}")
    acc += regions
    return acc


def trajectory_mask_update(acc, tracks):
    """Add one hit per tracked box footprint."""
    h, w = acc.shape
    for track in tracks:
        for point in track.history:
            rows, cols = bbox_slices(point.bbox, h, w)
            acc[rows, cols] += 1
    return acc


def morph_repair(mask, dilate_iters=2, erode_iters=2, kernel_size=5):
    structure = np.ones((kernel_size, kernel_size), dtype=bool)
    out = np.asarray(mask, dtype=bool)
    if dilate_iters > 0:
        out = ndimage.binary_dilation(out, structure=structure, iterations=dilate_iters)
    if erode_iters > 0:
        out = ndimage.binary_erosion(out, structure=structure, iterations=erode_iters, border_value=1)
    return out


def fuse_masks(motion_acc, traj_acc, min_hits, params=None):
    params = params or RoadMaskParams(min_hits=min_hits)
    if motion_acc.shape != traj_acc.shape:
        raise DimensionError(f"Accumulators differ: {motion_acc.shape} vs {traj_acc.shape}")
    fused = (motion_acc >= min_hits) & (traj_acc >= min_hits)
    repaired = morph_repair(fused, params.dilate_iters, params.erode_iters, params.kernel_size)
    return RoadMask(repaired, motion_acc.copy(), traj_acc.copy())


class RoadMaskBuilder:
    """Single pass accumulation of the motion branch, with tracks added at the end."""

    def __init__(self, height, width, motion_params=None, road_params=None):
        self.motion_params = motion_params or MotionMaskParams()
        self.road_params = road_params or RoadMaskParams()
        self.motion_acc = np.zeros((height, width), dtype=np.int32)
        self.traj_acc = np.zeros((height, width), dtype=np.int32)
        self._recent = deque(maxlen=self.motion_params.k)
        self.pairs = 0
        self.skipped = 0

    def feed(self, frame_idx, frame):
        if frame_idx % self.motion_params.frame_stride:
            return
        gray = as_gray_array(frame)
        if len(self._recent) == self.motion_params.k:
            regions = changed_regions(gray, self._recent[0], self.motion_params)
            self.pairs += 1
            if regions is None:
                self.skipped += 1
            else:
                self.motion_acc += regions
        self._recent.append(gray)

    def add_tracks(self, tracks):
        trajectory_mask_update(self.traj_acc, tracks)

    def build(self):
        mask = fuse_masks(self.motion_acc, self.traj_acc, self.road_params.min_hits, self.road_params)
        if self.skipped:
            logger.info(f"⚠️ Shake guard skipped {self.skipped}/{self.pairs} difference pairs")
        if mask.area == 0:
            logger.warning("⚠️ Road mask is empty; every anomaly will be filtered out")
        else:
            logger.info(f"✅ Road mask covers {mask.area} px")
        return mask

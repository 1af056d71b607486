"""
Backtracking of coarse start times through the original frames.

Background-stream events start late because a stopped vehicle takes a while
to be absorbed by the mixture model. The event box is fixed as a region of
interest and earlier original frames are compared against the patch at the
coarse frame until the scene in the box changes.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core import Branch, ConfigError, DimensionError, bbox_slices, iou

logger = logging.getLogger(__name__)

MAX_PIXEL = 255.0
SSIM_C1 = (0.01 * MAX_PIXEL) ** 2
SSIM_C2 = (0.03 * MAX_PIXEL) ** 2


@dataclass(frozen=True)
class SimilarityThresholds:
    psnr_stop: float = 13.0
    ssim_stop: float = 0.4
    euclid_stop: float = 0.7
    psnr_avg: float = 10.0
    ssim_avg: float = 0.3
    euclid_avg: float = 0.65
    max_backtrack_s: float = 15.0
    roi_iou_thresh: float = 0.9
    max_deviation_s: float = 12.0
    stride: int = 3
    psnr_cap: float = 100.0
    ssim_window: int = 8
    vote_weights: tuple = (1.0, 1.0, 1.0)
    vote_quorum: float = 2.0
    gate_window_s: float = 1.0
    fuse_iou: float = 0.3

    def __post_init__(self):
        pairs = ((self.psnr_stop, self.psnr_avg), (self.ssim_stop, self.ssim_avg),
                 (self.euclid_stop, self.euclid_avg))
        if any(stop < avg for stop, avg in pairs):
            raise ConfigError("backtrack: stop thresholds must be >= average thresholds")
        if self.stride < 1:
            raise ConfigError("backtrack: stride must be >= 1")
        if len(self.vote_weights) != 3:
            raise ConfigError("backtrack: vote_weights needs one weight per metric")


class Verdict(str, Enum):
    SAME = 'same'
    CHANGED = 'changed'


def _pair(patch_a, patch_b):
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"Patch shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(patch_a, patch_b, cap=100.0):
    a, b = _pair(patch_a, patch_b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * math.log10(MAX_PIXEL ** 2 / mse)))


def ssim(patch_a, patch_b, window=8):
    """Mean SSIM over all uniform window positions (population statistics)."""
    a, b = _pair(patch_a, patch_b)
    if a.ndim != 2 or min(a.shape) < window:
        raise DimensionError(f"Patch {a.shape} smaller than the {window}x{window} SSIM window")
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def euclid_similarity(patch_a, patch_b):
    a, b = _pair(patch_a, patch_b)
    if a.size == 0:
        return 1.0
    dist = np.linalg.norm(a - b)
    return float(np.clip(1.0 - dist / (MAX_PIXEL * math.sqrt(a.size)), 0.0, 1.0))


def vote_fuse(psnr_value, ssim_value, euclid_value, thresholds):
    votes = (
        psnr_value > thresholds.psnr_stop,
        ssim_value > thresholds.ssim_stop,
        euclid_value > thresholds.euclid_stop,
    )
    weight = sum(w for w, vote in zip(thresholds.vote_weights, votes) if vote)
    return Verdict.SAME if weight >= thresholds.vote_quorum else Verdict.CHANGED


class _RunningMetrics:
    def __init__(self):
        self.count = 0
        self.totals = np.zeros(3)

    def add(self, values):
        self.count += 1
        self.totals += values

    def holds(self, thresholds):
        p, s, e = self.totals / max(self.count, 1)
        return p >= thresholds.psnr_avg and s >= thresholds.ssim_avg and e >= thresholds.euclid_avg


def compare_patches(reference, patch, thresholds):
    values = (
        psnr(reference, patch, thresholds.psnr_cap),
        ssim(reference, patch, thresholds.ssim_window),
        euclid_similarity(reference, patch),
    )
    return values, vote_fuse(*values, thresholds)


def _roi_gate(event, detections, coarse, fps, thresholds):
    if detections is None:
        return True
    reach = int(round(thresholds.gate_window_s * fps))
    for idx in range(max(0, coarse - reach), coarse + reach + 1):
        if any(iou(det.bbox, event.bbox) >= thresholds.roi_iou_thresh for det in detections.at(idx)):
            return True
    return False


def backtrack_start(event, frames, detections, thresholds, fps):
    """Walk back from the coarse start while the ROI still shows the same scene."""
    if len(frames) == 0:
        return event
    coarse = min(event.start_time.to_frame(fps), len(frames) - 1)
    if not _roi_gate(event, detections, coarse, fps, thresholds):
        logger.warning(f"⚠️ {event.video_id}: no original detection matches the event box "
                       f"near {event.start_seconds:.1f}s, start left unrefined")
        return event

    reference = frames[coarse]
    rows, cols = bbox_slices(event.bbox, *reference.shape[:2])
    ref_patch = reference[rows, cols]
    if min(ref_patch.shape[:2]) < thresholds.ssim_window:
        logger.warning(f"⚠️ {event.video_id}: ROI {ref_patch.shape} too small to compare, start left unrefined")
        return event

    limit = max(0, coarse - int(round(thresholds.max_backtrack_s * fps)))
    running = _RunningMetrics()

    def still_same(idx):
        values, verdict = compare_patches(ref_patch, frames[idx][rows, cols], thresholds)
        running.add(values)
        return verdict == Verdict.SAME and running.holds(thresholds)

    earliest = coarse
    idx = coarse - thresholds.stride
    while idx >= limit and still_same(idx):
        earliest = idx
        idx -= thresholds.stride

    # finer pass over the gap the coarse stride skipped
    idx = earliest - 1
    while idx >= max(limit, earliest - thresholds.stride + 1) and still_same(idx):
        earliest = idx
        idx -= 1

    earliest = max(earliest, limit)
    if earliest == coarse:
        logger.debug(f"{event.video_id}: ROI changes right before the coarse start, nothing to refine")
        return event
    logger.info(f"🔙 {event.video_id}: start {event.start_seconds:.2f}s -> {earliest / fps:.2f}s")
    return event.refined(earliest / fps, note='backtrack')


def refine_events(events, frames, detections, thresholds, fps):
    return [backtrack_start(e, frames, detections, thresholds, fps) for e in events]


def _merge(a, b):
    first, second = (a, b) if a.start_seconds <= b.start_seconds else (b, a)
    return first.refined(
        first.start_seconds,
        branch=Branch.FUSED,
        note=f"fused with {second.branch.value} event at {second.start_seconds:.2f}s",
        confidence=max(a.confidence, b.confidence),
    )


def _close(a, b, thresholds):
    return (iou(a.bbox, b.bbox) >= thresholds.fuse_iou
            and abs(a.start_seconds - b.start_seconds) <= thresholds.max_deviation_s)


def fuse_branch_events(pixel_events, box_events, thresholds=None):
    """Merge matching pixel/box events and collapse per-video duplicates to the earliest."""
    thresholds = thresholds or SimilarityThresholds()
    remaining = list(box_events)
    merged = []
    for p in sorted(pixel_events, key=lambda e: (e.video_id, e.start_seconds)):
        candidates = [b for b in remaining if b.video_id == p.video_id and _close(p, b, thresholds)]
        if not candidates:
            merged.append(p)
            continue
        best = min(candidates, key=lambda b: (abs(b.start_seconds - p.start_seconds), -iou(p.bbox, b.bbox)))
        remaining.remove(best)
        merged.append(_merge(p, best))
    merged.extend(remaining)

    kept = []
    for event in sorted(merged, key=lambda e: (e.video_id, e.start_seconds, -e.confidence)):
        if any(k.video_id == event.video_id and _close(k, event, thresholds) for k in kept):
            continue
        kept.append(event)
    return kept

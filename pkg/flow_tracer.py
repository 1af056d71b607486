"""
Single-vehicle crash localization from sparse optical flow.

Feature points seeded on the stopped vehicle are traced backward through the
original frames with pyramidal Lucas-Kanade. The mean displacement per frame
gives a velocity series whose drastic spikes mark the crash instant.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial import cKDTree

from core import BBox, Branch, ConfigError, DimensionError, InsufficientHistoryError, bbox_slices
from ingest import as_gray_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowParams:
    n_points: int = 50
    trace_len: int = 390
    knn_k: int = 6
    density_thresh: float = 6.6
    suppress_ranks: tuple = (0, 2, 4, 6)
    suppress_tolerance: float = 0.0
    neighbor_len: int = 5
    window_len: int = 60
    scale: float = 2.5
    spike_ratio: float = 2.0
    min_spike: float = 0.5
    win_size: int = 15
    max_level: int = 2
    max_iter: int = 20
    epsilon: float = 0.03
    min_eig: float = 1e-4
    quality_level: float = 0.01
    min_distance: float = 3.0
    block_size: int = 3
    bbox_inset: float = 0.1
    arbitration_s: float = 3.0

    def __post_init__(self):
        if self.n_points < self.knn_k + 1:
            raise ConfigError("flow: n_points must be at least knn_k + 1")
        if self.trace_len < self.window_len:
            raise ConfigError("flow: trace_len must be at least window_len")
        if self.neighbor_len < 1:
            raise ConfigError("flow: neighbor_len must be >= 1")

    def lk_params(self):
        return dict(
            winSize=(self.win_size, self.win_size),
            maxLevel=self.max_level,
            criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, self.max_iter, self.epsilon),
            minEigThreshold=self.min_eig,
        )


@dataclass(frozen=True)
class FlowPoint:
    """Position in the current frame; u, v is the motion that brought it there."""
    x: float
    y: float
    tracked: bool = True
    u: float = 0.0
    v: float = 0.0


@dataclass(frozen=True)
class VelocitySeries:
    """Per-frame mean flow in forward time order.

    Entry i describes the motion between frame_indices[i] - 1 and frame_indices[i].
    """
    frame_indices: tuple = ()
    mean_u: tuple = ()
    mean_v: tuple = ()
    active: tuple = ()

    @property
    def magnitudes(self):
        return np.hypot(np.asarray(self.mean_u, dtype=np.float64), np.asarray(self.mean_v, dtype=np.float64))

    def __len__(self):
        return len(self.frame_indices)


def _positions(points):
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 2).astype(np.float32)
    return np.array([[p.x, p.y] for p in points], dtype=np.float32).reshape(-1, 2)


def lk_step(frame_t, frame_prev, points, params=None):
    """Track points from frame_t into frame_prev.

    Returned u, v are the motion from frame_prev to frame_t, so a scene
    translating by +2 px in x between the two frames yields u = 2.
    """
    params = params or FlowParams()
    cur = as_gray_array(frame_t)
    prev = as_gray_array(frame_prev)
    if cur.shape != prev.shape:
        raise DimensionError(f"Frames differ in size: {cur.shape} vs {prev.shape}")
    pos = _positions(points)
    if len(pos) == 0:
        return []
    new_pos, status, _err = cv2.calcOpticalFlowPyrLK(cur, prev, pos.reshape(-1, 1, 2), None,
                                                     **params.lk_params())
    new_pos = new_pos.reshape(-1, 2)
    h, w = cur.shape
    inside = ((new_pos[:, 0] >= 0) & (new_pos[:, 0] <= w - 1)
              & (new_pos[:, 1] >= 0) & (new_pos[:, 1] <= h - 1))
    ok = (status.reshape(-1) == 1) & inside
    motion = pos - new_pos
    return [FlowPoint(float(x), float(y), bool(s), float(u), float(v))
            for (x, y), s, (u, v) in zip(new_pos, ok, motion)]


def seed_points(bbox, frame, p, params=None):
    """Up to p Shi-Tomasi corners inside the (slightly inset) box."""
    params = params or FlowParams()
    gray = as_gray_array(frame)
    h, w = gray.shape
    if bbox.x2 <= 0 or bbox.y2 <= 0 or bbox.x1 >= w or bbox.y1 >= h:
        raise DimensionError(f"Box {bbox.as_tuple()} lies outside the {w}x{h} frame")
    inset = bbox
    dx, dy = bbox.width * params.bbox_inset, bbox.height * params.bbox_inset
    if bbox.width - 2 * dx >= 1 and bbox.height - 2 * dy >= 1:
        inset = BBox(bbox.x1 + dx, bbox.y1 + dy, bbox.x2 - dx, bbox.y2 - dy)
    rows, cols = bbox_slices(inset, h, w)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[rows, cols] = 255
    corners = cv2.goodFeaturesToTrack(gray, maxCorners=p, qualityLevel=params.quality_level,
                                      minDistance=params.min_distance, mask=mask,
                                      blockSize=params.block_size)
    if corners is None:
        return []
    return [FlowPoint(float(x), float(y)) for x, y in corners.reshape(-1, 2)]


def knn_outlier_filter(displacements, k=6, density_thresh=6.6):
    """Boolean inlier mask: mean distance to the k nearest displacements <= density_thresh."""
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 2)
    if len(d) < k + 1:
        if len(d):
            logger.warning(f"⚠️ KNN filter needs {k + 1} points, got {len(d)}; keeping all")
        return np.ones(len(d), dtype=bool)
    distances, _ = cKDTree(d).query(d, k=k + 1)
    # first column is the point itself (or an exact duplicate, same distance)
    density = distances[:, 1:].mean(axis=1)
    return density <= density_thresh


def backward_trace(bbox, stop_frame, frames, params=None):
    """Trace seeds from the stop frame backward and return the velocity series."""
    params = params or FlowParams()
    stop_frame = min(stop_frame, len(frames) - 1)
    seeds = seed_points(bbox, frames[stop_frame], params.n_points, params)
    if not seeds:
        logger.warning(f"⚠️ No trackable corners in box {bbox.as_tuple()} at frame {stop_frame}")
        return VelocitySeries()

    pos = _positions(seeds)
    frames_out, us, vs, active = [], [], [], []
    for t in range(stop_frame, max(0, stop_frame - params.trace_len), -1):
        if len(pos) == 0:
            break
        stepped = lk_step(frames[t], frames[t - 1], pos, params)
        kept = [p for p in stepped if p.tracked]
        if not kept:
            logger.debug(f"All flow points lost at frame {t}")
            break
        motion = np.array([[p.u, p.v] for p in kept])
        inliers = knn_outlier_filter(motion, params.knn_k, params.density_thresh)
        mean = motion[inliers].mean(axis=0) if inliers.any() else motion.mean(axis=0)
        frames_out.append(t)
        us.append(float(mean[0]))
        vs.append(float(mean[1]))
        active.append(len(kept))
        pos = np.array([[p.x, p.y] for p in kept], dtype=np.float32)

    return VelocitySeries(tuple(reversed(frames_out)), tuple(reversed(us)),
                          tuple(reversed(vs)), tuple(reversed(active)))


def peak_suppress(series, neighbor_len, ranks=(0, 2, 4, 6), tolerance=0.0):
    """Zero isolated impulses among the selected top-ranked values.

    A peak is isolated when every value within `neighbor_len` is below
    `(1 - tolerance) * peak`; with the default 0 that is strictly smaller.
    """
    values = np.asarray(series, dtype=np.float64)
    out = values.copy()
    order = np.argsort(-values, kind='stable')
    for rank in ranks:
        if rank >= len(order):
            break
        i = order[rank]
        peak = values[i]
        if peak <= 0:
            continue
        neighbours = np.concatenate([values[max(0, i - neighbor_len):i], values[i + 1:i + 1 + neighbor_len]])
        if len(neighbours) and np.all(neighbours < peak * (1.0 - tolerance)):
            out[i] = 0.0
    return out


def _normal_half_width(window, scale):
    mean = window.mean()
    mae = np.abs(window - mean).mean()
    return mean, mae + scale * window.std()


def moving_window_detect(series, window_len, scale=2.5, spike_ratio=2.0, min_spike=0.5):
    """Earliest index of a short, drastic spike bounded by normal values in its window.

    The first and last index of the series count as bounds, so spikes touching
    either end of the series are found too.
    """
    values = np.asarray(series, dtype=np.float64)
    if len(values) < window_len:
        raise InsufficientHistoryError(f"Series of {len(values)} shorter than window {window_len}")
    max_run = window_len / 4
    found = None
    for s in range(len(values) - window_len + 1):
        win = values[s:s + window_len]
        mean, half = _normal_half_width(win, scale)
        outlier = np.abs(win - mean) > half + 1e-9
        high = outlier & (win > mean)
        a = 0
        while a < window_len:
            if not high[a]:
                a += 1
                continue
            b = a
            while b < window_len and high[b]:
                b += 1
            left = s + a == 0 or (a > 0 and not outlier[a - 1])
            right = s + b == len(values) or (b < window_len and not outlier[b])
            bounded = left and right
            drastic = np.all(win[a:b] >= spike_ratio * mean) and np.all(win[a:b] >= min_spike)
            if bounded and drastic and (b - a) <= max_run:
                if found is None or s + a < found:
                    found = s + a
                break
            a = b
        if found is not None and found <= s:
            break
    return found


def arbitrate(trajectory_seconds, flow_seconds, tolerance_s=3.0):
    """Pick the crash instant when both dynamic branches may have an answer."""
    if trajectory_seconds is None and flow_seconds is None:
        return None
    if trajectory_seconds is None:
        return flow_seconds, Branch.FLOW_REFINED
    if flow_seconds is None:
        return trajectory_seconds, Branch.TRAJECTORY_REFINED
    if abs(trajectory_seconds - flow_seconds) <= tolerance_s:
        return flow_seconds, Branch.FLOW_REFINED
    if flow_seconds < trajectory_seconds:
        return flow_seconds, Branch.FLOW_REFINED
    return trajectory_seconds, Branch.TRAJECTORY_REFINED


def locate_crash_frame(event, frames, fps, params=None):
    """Crash frame from the backward flow trace, or None when the branch abstains."""
    params = params or FlowParams()
    series = backward_trace(event.bbox, event.start_time.to_frame(fps), frames, params)
    if len(series) < params.window_len:
        logger.warning(f"⚠️ {event.video_id}: velocity series too short ({len(series)} frames)")
        return None, series
    cleaned = peak_suppress(series.magnitudes, params.neighbor_len, params.suppress_ranks,
                            params.suppress_tolerance)
    idx = moving_window_detect(cleaned, params.window_len, params.scale, params.spike_ratio, params.min_spike)
    if idx is None:
        return None, series
    return series.frame_indices[idx], series


def write_series(series, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write("frame\tu\tv\tm\tactive\n")
        for frame, u, v, m, n in zip(series.frame_indices, series.mean_u, series.mean_v,
                                     series.magnitudes, series.active):
            f.write(f"{frame}\t{u:.4f}\t{v:.4f}\t{m:.4f}\t{n}\n")
    return path

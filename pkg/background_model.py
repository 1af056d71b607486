"""
Per-pixel adaptive Gaussian mixture background subtraction.

Every pixel keeps up to K gaussians sorted by weight/sigma. A stopped vehicle
is absorbed into the background after roughly ln(2)/alpha frames, which is the
appearance delay the backtracking stage later removes.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from core import BBox, ConfigError, Detection, DimensionError
from ingest import VideoManifest, as_gray_array, write_frame, write_manifest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackgroundParams:
    n_components: int = 5
    history: int = 120
    var_threshold: float = 16.0
    background_ratio: float = 0.9
    var_init: float = 225.0
    var_min: float = 4.0
    var_max: float = 1125.0
    sample_interval: int = 120
    detect_threshold: int = 170
    detect_min_area: int = 50
    detect_score: float = 0.9

    def __post_init__(self):
        if self.n_components < 1 or self.history < 1 or self.sample_interval < 1:
            raise ConfigError("background: n_components, history and sample_interval must be >= 1")
        if not (0 < self.var_min <= self.var_init <= self.var_max):
            raise ConfigError("background: need 0 < var_min <= var_init <= var_max")
        if self.var_threshold <= 0 or not 0 < self.background_ratio <= 1:
            raise ConfigError("background: var_threshold must be positive, background_ratio in (0, 1]")

    @property
    def learning_rate(self):
        return 1.0 / self.history


class GmmState:
    """Mixture parameters for a whole frame, component-major: shape (K, H, W).

    Weights stay float64 so they sum to one within 1e-9; means and variances
    are float32.
    """

    def __init__(self, height, width, n_components):
        self.height = height
        self.width = width
        self.n_components = n_components
        self.weights = np.zeros((n_components, height, width), dtype=np.float64)
        self.means = np.zeros((n_components, height, width), dtype=np.float32)
        self.variances = np.zeros((n_components, height, width), dtype=np.float32)
        self.n_active = np.zeros((height, width), dtype=np.int64)
        self.n_updates = 0

    @property
    def initialized(self):
        return self.n_updates > 0

    def active_mask(self):
        return np.arange(self.n_components)[:, None, None] < self.n_active[None]


def _sort_components(state):
    """Restore weight/sigma order on the pixels whose order the last update broke."""
    key = state.weights / np.sqrt(np.maximum(state.variances, 1e-12))
    key[~state.active_mask()] = -np.inf
    disorder = (key[1:] > key[:-1]).any(axis=0)
    if not disorder.any():
        return 0
    rows, cols = np.nonzero(disorder)
    order = np.argsort(-key[:, rows, cols], axis=0, kind='stable')
    for values in (state.weights, state.means, state.variances):
        values[:, rows, cols] = np.take_along_axis(values[:, rows, cols], order, axis=0)
    return len(rows)


def gmm_update(state, frame, params):
    """Feed one frame into the mixture; returns the foreground mask (1 = foreground)."""
    x = as_gray_array(frame).astype(np.float32)
    if x.shape != (state.height, state.width):
        raise DimensionError(
            f"Frame is {x.shape[1]}x{x.shape[0]}, model expects {state.width}x{state.height}"
        )

    if not state.initialized:
        state.weights[0] = 1.0
        state.means[0] = x
        state.variances[0] = params.var_init
        state.n_active[:] = 1
        state.n_updates = 1
        return np.zeros(x.shape, dtype=np.uint8)

    alpha = params.learning_rate
    matched = np.zeros(x.shape, dtype=bool)
    background = np.zeros(x.shape, dtype=bool)
    cum_before = np.zeros(x.shape, dtype=np.float64)
    rho = np.empty(x.shape, dtype=np.float32)
    for k in range(state.n_components):
        weight, mean, var = state.weights[k], state.means[k], state.variances[k]
        diff = x - mean
        d2 = np.square(diff)
        # only the first (highest ranked) matching component is updated
        hit = (d2 < params.var_threshold * var) & (state.n_active > k) & ~matched
        # background iff the matched component ranks inside the background ratio
        background |= hit & (cum_before < params.background_ratio)
        cum_before += weight
        matched |= hit
        weight *= 1.0 - alpha
        if not hit.any():
            continue
        np.add(weight, alpha, out=weight, where=hit)
        rho.fill(0.0)
        np.divide(alpha, weight, out=rho, where=hit)
        np.minimum(rho, 1.0, out=rho)
        mean += rho * diff
        updated = var + rho * (d2 - var)
        np.clip(updated, params.var_min, params.var_max, out=updated)
        np.copyto(var, updated, where=hit)

    # no match: a new component takes the next free slot, or replaces the weakest
    spawn = ~matched
    if spawn.any():
        slot = np.minimum(state.n_active, state.n_components - 1)
        for k in range(state.n_components):
            here = spawn & (slot == k)
            np.copyto(state.weights[k], alpha, where=here)
            np.copyto(state.means[k], x, where=here)
            np.copyto(state.variances[k], params.var_init, where=here)
        np.minimum(state.n_active + spawn, state.n_components, out=state.n_active)

    state.weights /= state.weights.sum(axis=0)
    _sort_components(state)
    state.n_updates += 1
    return (~background).astype(np.uint8)


def background_image(state):
    """Mean of the heaviest component per pixel, as an 8-bit image."""
    if not state.initialized:
        raise ValueError("Background model has not seen any frame yet")
    heaviest = np.argmax(state.weights, axis=0)
    mean = np.take_along_axis(state.means, heaviest[None], axis=0)[0]
    return np.clip(np.floor(mean + 0.5), 0, 255).astype(np.uint8)


class BackgroundModel:
    def __init__(self, height, width, params=None):
        self.params = params or BackgroundParams()
        self.state = GmmState(height, width, self.params.n_components)
        self.frame_idx = -1

    def apply(self, frame):
        self.frame_idx += 1
        return gmm_update(self.state, frame, self.params)

    def background(self):
        return background_image(self.state)

    def is_sample_frame(self, idx=None):
        idx = self.frame_idx if idx is None else idx
        return idx % self.params.sample_interval == 0

    def background_stream(self, frames):
        """Consume frames in order, yielding (frame_idx, background) every sample interval."""
        for frame in frames:
            self.apply(frame)
            if self.is_sample_frame():
                logger.debug(f"Background sample at frame {self.frame_idx}")
                yield self.frame_idx, self.background()


def detect_rectangles(image, frame_idx, threshold=170, min_area=50, score=0.9):
    """Bright-blob detector: threshold, label, one box per component."""
    labels, count = ndimage.label(as_gray_array(image) > threshold)
    detections = []
    for i, slc in enumerate(ndimage.find_objects(labels), start=1):
        if slc is None:
            continue
        rows, cols = slc
        area = int(np.count_nonzero(labels[slc] == i))
        if area < min_area:
            continue
        bbox = BBox(float(cols.start), float(rows.start), float(cols.stop), float(rows.stop))
        detections.append(Detection(frame_idx, bbox, score))
    return detections


def write_background_images(samples, output_folder, video_id, fps, sample_interval):
    """Write sampled backgrounds as an image sequence with its own manifest.

    The manifest frame rate is the sampling rate, so frame `i` of the written
    sequence corresponds to original frame `i * sample_interval`.
    """
    output_folder = Path(output_folder)
    frame_dir = output_folder / 'frames'
    count = 0
    height = width = 0
    for i, (_, image) in enumerate(samples):
        write_frame(frame_dir / f"{i:06d}.png", image)
        height, width = image.shape[:2]
        count += 1
    if count == 0:
        logger.warning(f"⚠️ No background samples to write for '{video_id}'")
        return None
    manifest = VideoManifest(
        video_id=f"{video_id}-background",
        frame_dir=frame_dir,
        fps=fps / sample_interval,
        width=width,
        height=height,
        frame_count=count,
    )
    path = write_manifest(manifest, output_folder / 'manifest.txt')
    logger.info(f"✅ Wrote {count} background samples to {frame_dir}")
    return path

import logging
import os
import subprocess
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

from core import BBox, Detection, DimensionError, IngestError

logger = logging.getLogger(__name__)

MANIFEST_KEYS = ('video_id', 'fps', 'width', 'height', 'frame_count', 'frame_pattern')


@dataclass(frozen=True)
class VideoManifest:
    video_id: str
    frame_dir: Path
    fps: float
    width: int
    height: int
    frame_count: int
    frame_pattern: str = '%06d.png'

    @property
    def duration(self):
        return self.frame_count / self.fps

    def frame_path(self, idx):
        return self.frame_dir / (self.frame_pattern % idx)


@dataclass(frozen=True, eq=False)
class Frame:
    idx: int
    pixels: np.ndarray

    @property
    def is_gray(self):
        return self.pixels.ndim == 2

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


class DetectionSource(str, Enum):
    ORIGINAL = 'original'
    BACKGROUND = 'background'


@dataclass(frozen=True)
class DetectionSet:
    source: DetectionSource
    by_frame: dict = field(default_factory=dict)

    def at(self, frame_idx):
        return self.by_frame.get(frame_idx, ())

    def frames(self):
        return sorted(self.by_frame)

    def __iter__(self):
        for idx in self.frames():
            yield from self.by_frame[idx]

    def __len__(self):
        return sum(len(v) for v in self.by_frame.values())

    @classmethod
    def from_detections(cls, detections, source):
        grouped = {}
        for det in detections:
            grouped.setdefault(det.frame_idx, []).append(det)
        return cls(source, {k: tuple(v) for k, v in grouped.items()})


def _parse_key_values(path):
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise IngestError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split('=', 1))
            values[key] = value
    return values


def load_manifest(path):
    """Load and validate a manifest; every frame file must exist."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"Manifest not found: {path}")
    values = _parse_key_values(path)
    missing = [k for k in MANIFEST_KEYS if k not in values]
    if missing:
        raise IngestError(f"{path}: missing manifest keys {missing}")
    try:
        manifest = VideoManifest(
            video_id=values['video_id'],
            frame_dir=(path.parent / values.get('frame_dir', '.')).resolve(),
            fps=float(values['fps']),
            width=int(values['width']),
            height=int(values['height']),
            frame_count=int(values['frame_count']),
            frame_pattern=values['frame_pattern'],
        )
    except ValueError as e:
        raise IngestError(f"{path}: malformed manifest field: {e}") from e

    if manifest.fps <= 0:
        raise IngestError(f"{path}: fps must be positive, got {manifest.fps}")
    if manifest.width <= 0 or manifest.height <= 0 or manifest.frame_count <= 0:
        raise IngestError(f"{path}: width, height and frame_count must be positive")

    ok, message = validate_sequence(manifest)
    if not ok:
        raise IngestError(f"{path}: {message}")
    logger.info(f"✅ Manifest '{manifest.video_id}': {manifest.frame_count} frames, "
                f"{manifest.width}x{manifest.height} @ {manifest.fps} fps")
    return manifest


def validate_sequence(manifest):
    """Check that all frame files exist and the first one has the declared size."""
    for idx in range(manifest.frame_count):
        if not manifest.frame_path(idx).exists():
            logger.error(f"❌ Frame {idx} missing: {manifest.frame_path(idx)}")
            return False, f"frame {idx} missing ({manifest.frame_path(idx)})"

    first = cv2.imread(str(manifest.frame_path(0)), cv2.IMREAD_UNCHANGED)
    if first is None:
        return False, f"frame 0 could not be decoded ({manifest.frame_path(0)})"
    h, w = first.shape[:2]
    if (w, h) != (manifest.width, manifest.height):
        return False, (f"dimension mismatch: manifest says {manifest.width}x{manifest.height}, "
                       f"frame 0 is {w}x{h}")
    return True, f"{manifest.frame_count} frames present"


def write_manifest(manifest, path):
    path = Path(path)
    try:
        frame_dir = os.path.relpath(manifest.frame_dir, path.parent)
    except ValueError:
        frame_dir = str(manifest.frame_dir)
    lines = [
        f"video_id = {manifest.video_id}",
        f"fps = {manifest.fps!r}",
        f"width = {manifest.width}",
        f"height = {manifest.height}",
        f"frame_count = {manifest.frame_count}",
        f"frame_dir = {frame_dir}",
        f"frame_pattern = {manifest.frame_pattern}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding='utf-8')
    return path


def read_frame(manifest, idx):
    if not 0 <= idx < manifest.frame_count:
        raise IngestError(f"Frame index {idx} out of range [0, {manifest.frame_count})")
    frame_path = manifest.frame_path(idx)
    pixels = cv2.imread(str(frame_path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise IngestError(f"Frame {idx} could not be decoded: {frame_path}")
    if pixels.dtype != np.uint8:
        raise IngestError(f"Frame {idx} is {pixels.dtype}, expected 8-bit")
    if pixels.ndim == 3:
        if pixels.shape[2] == 4:
            pixels = cv2.cvtColor(pixels, cv2.COLOR_BGRA2RGB)
        else:
            pixels = cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB)
    if pixels.shape[:2] != (manifest.height, manifest.width):
        raise DimensionError(
            f"Frame {idx} is {pixels.shape[1]}x{pixels.shape[0]}, "
            f"manifest says {manifest.width}x{manifest.height}"
        )
    return Frame(idx, pixels)


def to_grayscale(frame):
    if frame.is_gray:
        return frame
    rgb = frame.pixels.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    luma = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return Frame(frame.idx, luma)


def as_gray_array(frame):
    """Accept a Frame or a raw array and return 8-bit grayscale pixels."""
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    if pixels.ndim == 3:
        pixels = to_grayscale(Frame(0, pixels)).pixels
    return pixels


def write_frame(path, pixels):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pixels.ndim == 3:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), pixels):
        raise IngestError(f"Could not write frame {path}")
    return path


class FrameStore:
    """Random access to grayscale frames with a small LRU cache.

    Indexing returns the raw uint8 array so stores and plain lists of arrays
    are interchangeable wherever frames are consumed.
    """

    def __init__(self, manifest, cache_size=512):
        self.manifest = manifest
        self.cache_size = cache_size
        self._cache = OrderedDict()

    def __len__(self):
        return self.manifest.frame_count

    def __getitem__(self, idx):
        if idx < 0:
            idx += len(self)
        if idx in self._cache:
            self._cache.move_to_end(idx)
            return self._cache[idx]
        pixels = to_grayscale(read_frame(self.manifest, idx)).pixels
        self._cache[idx] = pixels
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return pixels

    def __iter__(self):
        for idx in range(len(self)):
            yield to_grayscale(read_frame(self.manifest, idx)).pixels


def load_detections(path, source, frame_count=None):
    """Parse `frame_idx x1 y1 x2 y2 score` records into a DetectionSet."""
    source = DetectionSource(source)
    detections = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split('\t') if '\t' in line else line.split()
            if len(parts) != 6:
                raise IngestError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                frame_idx = int(parts[0])
                x1, y1, x2, y2, score = (float(p) for p in parts[1:])
            except ValueError as e:
                raise IngestError(f"{path}:{lineno}: malformed field: {e}") from e
            if not 0.0 <= score <= 1.0:
                raise IngestError(f"{path}:{lineno}: score {score} outside [0, 1]")
            if frame_count is not None and frame_idx >= frame_count:
                raise IngestError(f"{path}:{lineno}: frame {frame_idx} beyond frame_count {frame_count}")
            try:
                detections.append(Detection(frame_idx, BBox(x1, y1, x2, y2), score))
            except ValueError as e:
                raise IngestError(f"{path}:{lineno}: {e}") from e
    logger.debug(f"Loaded {len(detections)} {source.value} detections from {path}")
    return DetectionSet.from_detections(detections, source)


def write_detections(detections, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for det in detections:
            b = det.bbox
            f.write(f"{det.frame_idx}\t{b.x1!r}\t{b.y1!r}\t{b.x2!r}\t{b.y2!r}\t{det.score!r}\n")
    return path


def load_ground_truth(path):
    """Ground truth lines `video_id start_time_seconds` grouped per video."""
    truth = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise IngestError(f"{path}:{lineno}: expected 'video_id start_time'")
            try:
                seconds = float(parts[1])
            except ValueError as e:
                raise IngestError(f"{path}:{lineno}: malformed start time: {e}") from e
            truth.setdefault(parts[0], []).append(seconds)
    return truth


def write_ground_truth(truth, path):
    path = Path(path)
    with open(path, 'w', encoding='utf-8') as f:
        for video_id in sorted(truth):
            for seconds in sorted(truth[video_id]):
                f.write(f"{video_id} {seconds:.1f}\n")
    return path


def extract_frames(video_path, output_folder, fps=30.0, video_id=None):
    """Convert an encoded video into a PNG sequence plus manifest with ffmpeg.

    Equivalent shell recipe:
        ffmpeg -i in.mp4 -vf fps=30 -start_number 0 frames/%06d.png
    """
    output_folder = Path(output_folder)
    frame_dir = output_folder / 'frames'
    frame_dir.mkdir(parents=True, exist_ok=True)
    cmd = [
        'ffmpeg',
        '-i', str(video_path),
        '-vf', f'fps={fps}',
        '-start_number', '0',
        '-y',
        '-loglevel', 'error',
        str(frame_dir / '%06d.png'),
    ]
    try:
        logger.info(f"🎞️ Extracting frames from {video_path} at {fps} fps...")
        result = subprocess.run(cmd, capture_output=True, text=True, timeout=3600)
        if result.returncode != 0:
            logger.error(f"❌ ffmpeg failed: {result.stderr}")
            return False, f"ffmpeg failed: {result.stderr}"

        frames = sorted(frame_dir.glob('*.png'))
        if not frames:
            return False, "ffmpeg produced no frames"
        first = cv2.imread(str(frames[0]), cv2.IMREAD_UNCHANGED)
        h, w = first.shape[:2]
        manifest = VideoManifest(
            video_id=video_id or Path(video_path).stem,
            frame_dir=frame_dir,
            fps=float(fps),
            width=w,
            height=h,
            frame_count=len(frames),
            frame_pattern='%06d.png',
        )
        manifest_path = write_manifest(manifest, output_folder / 'manifest.txt')
        logger.info(f"✅ Extracted {len(frames)} frames to {frame_dir}")
        return True, str(manifest_path)
    except FileNotFoundError:
        logger.error("❌ ffmpeg binary not found on PATH")
        return False, "ffmpeg not installed"
    except subprocess.TimeoutExpired:
        logger.error("❌ Frame extraction timed out")
        return False, "ffmpeg timed out"

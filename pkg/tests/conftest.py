import numpy as np
import pytest

from core import BBox, Detection
from ingest import VideoManifest, write_detections, write_frame, write_manifest
from scenario import generate_scenario


def textured(height, width, seed=0, block=4, low=40, high=200):
    """Blocky random texture, smooth enough for corner features and flow."""
    rng = np.random.default_rng(seed)
    coarse = rng.integers(low, high, size=(-(-height // block), -(-width // block)))
    return np.kron(coarse, np.ones((block, block)))[:height, :width].astype(np.uint8)


def write_sequence(folder, frames, fps=30.0, video_id='vid', detections=()):
    """Write frames plus manifest (and optional detection file); returns the manifest path."""
    frame_dir = folder / 'frames'
    for idx, pixels in enumerate(frames):
        write_frame(frame_dir / f"{idx:06d}.png", pixels)
    h, w = frames[0].shape[:2]
    manifest = VideoManifest(video_id, frame_dir, float(fps), w, h, len(frames))
    path = write_manifest(manifest, folder / 'manifest.txt')
    write_detections(list(detections), folder / 'detections_original.txt')
    return path


def det(frame_idx, x1, y1, x2, y2, score=0.9):
    return Detection(frame_idx, BBox(float(x1), float(y1), float(x2), float(y2)), score)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def sequence(tmp_path):
    def build(frames, fps=30.0, video_id='vid', detections=()):
        return write_sequence(tmp_path / video_id, frames, fps, video_id, detections)
    return build


@pytest.fixture
def render(tmp_path):
    def build(scenario):
        return generate_scenario(scenario, tmp_path / 'synthetic')
    return build

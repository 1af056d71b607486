import math

import numpy as np
import pytest

from conftest import det, textured
from core import AnomalyEvent, BBox, Branch, ConfigError, DimensionError, TimeStamp
from ingest import DetectionSet, DetectionSource
from roi_backtracker import (SSIM_C1, SimilarityThresholds, Verdict, backtrack_start, euclid_similarity,
                             fuse_branch_events, psnr, refine_events, ssim, vote_fuse)

ROI = BBox(20, 10, 44, 26)


def _const(value, shape=(16, 16)):
    return np.full(shape, value, np.uint8)


def _event(seconds, bbox=ROI, branch=Branch.PIXEL, video_id='cam', confidence=0.8):
    return AnomalyEvent(video_id, TimeStamp(seconds), bbox, confidence, branch)


def _stall_frames(n, stop_frame, seed=0):
    """Background texture; a bright textured vehicle sits in the ROI from stop_frame on."""
    background = textured(40, 64, seed=seed, low=40, high=110)
    vehicle = textured(16, 24, seed=seed + 1, low=180, high=250)
    frames = []
    for idx in range(n):
        frame = background.copy()
        if idx >= stop_frame:
            frame[10:26, 20:44] = vehicle
        frames.append(frame)
    return frames


def _gate(frame_idx, bbox=ROI):
    return DetectionSet.from_detections([det(frame_idx, *bbox.as_tuple())], DetectionSource.ORIGINAL)


def test_psnr_examples():
    assert psnr(_const(7), _const(7)) == 100.0
    assert psnr(_const(0), _const(255)) == pytest.approx(0.0)
    assert psnr(_const(0), _const(16)) == pytest.approx(10 * math.log10(255 ** 2 / 256), abs=1e-6)
    assert psnr(_const(0), _const(16)) == pytest.approx(24.05, abs=0.01)


def test_ssim_examples(rng):
    patch = rng.integers(0, 256, size=(16, 16))
    assert ssim(patch, patch) == pytest.approx(1.0)
    expected = (2 * 100 * 150 + SSIM_C1) / (100 ** 2 + 150 ** 2 + SSIM_C1)
    assert ssim(_const(100), _const(150)) == pytest.approx(expected, abs=1e-6)
    assert ssim(_const(100), _const(150)) == pytest.approx(0.92309, abs=1e-5)
    for _ in range(100):
        a = rng.integers(0, 256, size=(32, 32))
        b = rng.integers(0, 256, size=(32, 32))
        assert ssim(a, b) < 0.2


def test_euclid_examples():
    assert euclid_similarity(_const(9), _const(9)) == 1.0
    assert euclid_similarity(_const(0), _const(255)) == 0.0
    assert euclid_similarity(_const(0), _const(51)) == pytest.approx(0.8)


def test_metrics_are_symmetric_and_reflexive(rng):
    for _ in range(50):
        a = rng.integers(0, 256, size=(12, 12))
        b = rng.integers(0, 256, size=(12, 12))
        assert psnr(a, b) == pytest.approx(psnr(b, a))
        assert ssim(a, b) == pytest.approx(ssim(b, a))
        assert euclid_similarity(a, b) == pytest.approx(euclid_similarity(b, a))
        assert psnr(a, b) <= psnr(a, a) and ssim(a, b) <= ssim(a, a) + 1e-12
        assert euclid_similarity(a, b) <= euclid_similarity(a, a)


def test_metric_shape_errors():
    with pytest.raises(DimensionError):
        psnr(_const(0, (4, 4)), _const(0, (4, 5)))
    with pytest.raises(DimensionError):
        ssim(_const(0, (6, 6)), _const(0, (6, 6)))


def test_vote_fuse_examples():
    t = SimilarityThresholds()
    assert vote_fuse(100.0, 1.0, 1.0, t) == Verdict.SAME
    assert vote_fuse(5.0, 0.1, 0.2, t) == Verdict.CHANGED
    assert vote_fuse(14.0, 0.35, 0.75, t) == Verdict.SAME


def test_vote_fuse_is_monotone(rng):
    t = SimilarityThresholds()
    for _ in range(1000):
        values = [rng.uniform(0, 30), rng.uniform(-1, 1), rng.uniform(0, 1)]
        before = vote_fuse(*values, t)
        i = int(rng.integers(0, 3))
        values[i] += rng.uniform(0, 10)
        if before == Verdict.SAME:
            assert vote_fuse(*values, t) == Verdict.SAME


def test_threshold_validation():
    with pytest.raises(ConfigError):
        SimilarityThresholds(psnr_stop=9.0)
    with pytest.raises(ConfigError):
        SimilarityThresholds(stride=0)


def test_backtrack_recovers_stop_frame():
    fps = 10.0
    frames = _stall_frames(300, stop_frame=100)
    refined = backtrack_start(_event(11.2), frames, _gate(112), SimilarityThresholds(), fps)
    assert refined.start_seconds == pytest.approx(10.0)
    assert refined.branch == Branch.PIXEL
    assert refined.history[-1].startswith('backtrack')


def test_backtrack_is_clamped_to_fifteen_seconds():
    fps = 10.0
    frames = _stall_frames(400, stop_frame=0)
    refined = backtrack_start(_event(30.0), frames, _gate(300), SimilarityThresholds(), fps)
    assert refined.start_seconds == pytest.approx(15.0)


def test_backtrack_gate_and_small_roi_pass_through():
    fps = 10.0
    frames = _stall_frames(300, stop_frame=100)
    event = _event(11.2)
    elsewhere = _gate(112, BBox(0, 0, 10, 10))
    assert backtrack_start(event, frames, elsewhere, SimilarityThresholds(), fps) is event

    tiny = _event(11.2, bbox=BBox(20, 10, 25, 15))
    assert backtrack_start(tiny, frames, None, SimilarityThresholds(), fps) is tiny
    assert backtrack_start(event, [], None, SimilarityThresholds(), fps) is event


def test_backtrack_is_monotone(rng):
    t = SimilarityThresholds(max_backtrack_s=5.0)
    base = rng.integers(0, 256, size=(10, 10)).astype(np.uint8)
    box = BBox(0, 0, 10, 10)
    for _ in range(1000):
        fps = float(rng.integers(1, 5))
        n = int(rng.integers(2, 40))
        p_same = rng.uniform(0.3, 1.0)
        frames = [base if rng.random() < p_same else rng.integers(0, 256, size=(10, 10)).astype(np.uint8)
                  for _ in range(n)]
        coarse = int(rng.integers(0, n))
        event = _event(coarse / fps, bbox=box)
        refined = backtrack_start(event, frames, None, t, fps)
        assert refined.start_seconds <= event.start_seconds + 1e-9
        assert refined.start_seconds >= event.start_seconds - t.max_backtrack_s - 1e-9


def test_refine_events_keeps_order():
    frames = _stall_frames(300, stop_frame=100)
    events = [_event(11.2), _event(20.0, bbox=BBox(0, 0, 4, 4))]
    refined = refine_events(events, frames, None, SimilarityThresholds(), 10.0)
    assert [e.start_seconds for e in refined] == pytest.approx([10.0, 20.0])


def test_fuse_identical_events():
    fused = fuse_branch_events([_event(100.0)], [_event(100.0, branch=Branch.BOX, confidence=0.9)])
    assert len(fused) == 1
    assert fused[0].branch == Branch.FUSED
    assert fused[0].confidence == 0.9


def test_fuse_keeps_distant_and_disjoint_events():
    far = fuse_branch_events([_event(100.0)], [_event(130.0, branch=Branch.BOX)])
    assert sorted(e.start_seconds for e in far) == [100.0, 130.0]

    apart = fuse_branch_events([_event(100.0)], [_event(100.0, bbox=BBox(100, 100, 130, 120), branch=Branch.BOX)])
    assert len(apart) == 2


def test_fuse_takes_earlier_start_and_collapses_duplicates():
    fused = fuse_branch_events([_event(95.0), _event(99.0)], [_event(104.0, branch=Branch.BOX)])
    assert [e.start_seconds for e in fused] == [95.0]

    other_video = fuse_branch_events([_event(95.0)], [_event(95.0, video_id='other', branch=Branch.BOX)])
    assert len(other_video) == 2

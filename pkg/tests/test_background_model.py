import time

import numpy as np
import pytest

from background_model import (BackgroundModel, BackgroundParams, GmmState, background_image, detect_rectangles,
                              gmm_update, write_background_images)
from conftest import textured
from core import ConfigError, DimensionError
from ingest import load_manifest


def _feed(model, frames):
    mask = None
    for frame in frames:
        mask = model.apply(frame)
    return mask


def test_constant_scene_is_all_background():
    model = BackgroundModel(16, 16)
    mask = _feed(model, [np.full((16, 16), 128, np.uint8)] * 300)
    assert not mask.any()
    assert (model.background() == 128).all()


def test_new_square_is_exact_foreground():
    base = textured(40, 40, seed=3, low=40, high=120)
    model = BackgroundModel(40, 40)
    _feed(model, [base] * 100)
    frame = base.copy()
    frame[10:30, 12:32] = 250
    mask = model.apply(frame)
    expected = np.zeros((40, 40), np.uint8)
    expected[10:30, 12:32] = 1
    assert np.array_equal(mask, expected)


def test_weights_normalized_and_variances_clamped(rng):
    for case in range(1000):
        params = BackgroundParams(n_components=int(rng.integers(1, 6)), history=int(rng.integers(2, 200)))
        state = GmmState(3, 4, params.n_components)
        for _ in range(int(rng.integers(1, 6))):
            gmm_update(state, rng.integers(0, 256, size=(3, 4)).astype(np.uint8), params)
        active = state.active_mask()
        sums = np.where(active, state.weights, 0.0).sum(axis=0)
        assert np.allclose(sums, 1.0, atol=1e-9), case
        var = state.variances[active]
        assert var.min() >= params.var_min and var.max() <= params.var_max
        assert (state.n_active <= params.n_components).all()


def test_components_stay_ranked_by_weight_over_sigma(rng):
    params = BackgroundParams(history=10)
    state = GmmState(6, 7, params.n_components)
    scene = rng.integers(0, 256, size=(6, 7))
    for step in range(300):
        frame = scene if step % 3 else rng.integers(0, 256, size=(6, 7))
        gmm_update(state, frame.astype(np.uint8), params)
        key = np.where(state.active_mask(), state.weights / np.sqrt(np.maximum(state.variances, 1e-12)), -np.inf)
        assert (key[:-1] >= key[1:]).all(), step


@pytest.mark.slow
def test_full_size_update_keeps_pace():
    base = textured(410, 800, seed=2, low=40, high=160)
    model = BackgroundModel(410, 800)
    model.apply(base)
    frames = []
    for i in range(40):
        frame = base.copy()
        frame[180:220, 10 * i:10 * i + 80] = 230
        frames.append(frame)
    started = time.perf_counter()
    _feed(model, frames)
    assert (time.perf_counter() - started) / len(frames) < 0.1


def test_background_image_requires_an_update():
    with pytest.raises(ValueError):
        background_image(GmmState(2, 2, 5))


def test_parked_object_is_background_from_the_start():
    scene = textured(20, 30, seed=1, low=40, high=120)
    scene[5:15, 5:25] = 230
    model = BackgroundModel(20, 30)
    _feed(model, [scene] * 10)
    assert np.array_equal(model.background(), scene)


def test_stopped_object_appears_in_background_stream_late():
    empty = np.full((20, 20), 80, np.uint8)
    parked = empty.copy()
    parked[5:15, 5:15] = 230
    arrival = 600
    frames = (empty if idx < arrival else parked for idx in range(1000))
    model = BackgroundModel(20, 20)
    appeared = next(idx for idx, image in model.background_stream(frames) if image[10, 10] == 230)
    params = BackgroundParams()
    assert arrival < appeared < arrival + 10 * params.sample_interval
    assert appeared % params.sample_interval == 0


def test_dimension_mismatch():
    state = GmmState(4, 4, 5)
    with pytest.raises(DimensionError):
        gmm_update(state, np.zeros((4, 5), np.uint8), BackgroundParams())


def test_invalid_params():
    with pytest.raises(ConfigError):
        BackgroundParams(var_min=300.0)
    with pytest.raises(ConfigError):
        BackgroundParams(sample_interval=0)
    assert BackgroundParams().learning_rate == pytest.approx(1 / 120)


def test_detect_rectangles_boxes_components():
    image = np.full((60, 80), 70, np.uint8)
    image[10:30, 5:45] = 220
    image[40:44, 60:64] = 220  # 16 px, below min area
    dets = detect_rectangles(image, 240)
    assert len(dets) == 1
    assert dets[0].bbox.as_tuple() == (5.0, 10.0, 45.0, 30.0)
    assert dets[0].frame_idx == 240
    assert dets[0].score == 0.9


def test_write_background_images(tmp_path):
    samples = [(i * 120, np.full((8, 10), 50 + i, np.uint8)) for i in range(4)]
    path = write_background_images(samples, tmp_path / 'bg', 'cam', 30.0, 120)
    manifest = load_manifest(path)
    assert manifest.frame_count == 4
    assert manifest.fps == 0.25
    assert manifest.video_id == 'cam-background'
    assert write_background_images([], tmp_path / 'none', 'cam', 30.0, 120) is None

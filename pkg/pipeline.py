"""Stage orchestration: static stage, branch fusion, dynamic stage, outputs.

Per video the order is strict: one frame pass feeds the background model and
the motion branch of the road mask, the original-stream tracker runs on the
detection file, then the two static branches run over the sampled background
stream, their events are backtracked and fused, and the dynamic stage traces
each fused event back to the crash instant. Videos run in parallel threads.
"""
import hashlib
import json
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

from background_model import BackgroundModel, detect_rectangles, write_background_images
from box_tracker import BoxTracker, classify_box_anomalies, write_tracks
from config import PipelineConfig
from core import Branch, ConfigError, CrashTraceError, DimensionError, PipelineError
from evaluation import format_report, predictions_by_video, score, write_predictions
from flow_tracer import arbitrate, locate_crash_frame, write_series
from ingest import (DetectionSet, DetectionSource, FrameStore, load_detections, load_ground_truth,
                    load_manifest, write_detections)
from multi_trajectory import refine_with_trajectories, write_curve_counts
from overlays import emit_overlays, plot_curve_counts, plot_velocity_series
from pixel_tracker import PixelTracker
from road_mask import RoadMask, RoadMaskBuilder
from roi_backtracker import fuse_branch_events, refine_events

logger = logging.getLogger(__name__)

CACHE_DIR = 'cache'
PREDICTIONS_FILE = 'predictions.txt'
EVENTS_FILE = 'events.jsonl'


@dataclass
class VideoResult:
    video_id: str
    manifest: object
    events: list
    static_events: list
    tracks: list
    background_tracks: list
    road_mask: RoadMask
    series: dict = field(default_factory=dict)
    analyses: dict = field(default_factory=dict)


@dataclass
class RunSummary:
    events: list
    results: dict
    report: str = None
    scores: object = None


class _Progress:
    def __init__(self, video_id):
        self.video_id = video_id
        self.stage = None
        self.frame_idx = None


@contextmanager
def _stage(progress, name):
    progress.stage = name
    progress.frame_idx = None
    try:
        yield progress
    except PipelineError:
        raise
    except Exception as e:
        logger.error(f"❌ [{name}] '{progress.video_id}' failed at frame {progress.frame_idx}: {e}")
        raise PipelineError(name, progress.video_id, progress.frame_idx, e) from e


def file_digest(path):
    digest = hashlib.sha1()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


class StageCache:
    """Background detections and road mask of one video, reused across runs.

    The fingerprint covers the manifest, the parameters the cached stages
    depend on, the content of the detection files in `inputs` and the size
    and mtime of every frame file, so re-rendered or re-detected videos are
    recomputed.
    """

    def __init__(self, root, manifest, config, inputs=()):
        self.root = Path(root)
        self.enabled = config.pipeline.cache
        self.background_path = self.root / config.paths.background_detections
        self.mask_path = self.root / 'road_mask.npz'
        self.fingerprint_path = self.root / 'fingerprint.txt'
        self.fingerprint = self._fingerprint(manifest, config, inputs) if self.enabled else None

    @staticmethod
    def _fingerprint(manifest, config, inputs=()):
        parts = (manifest.video_id, manifest.frame_count, manifest.width, manifest.height, manifest.fps,
                 manifest.frame_pattern, config.background, config.motion, config.road, config.tracker)
        digest = hashlib.sha1(repr(parts).encode('utf-8'))
        for path in inputs:
            path = Path(path)
            content = file_digest(path) if path.exists() else 'missing'
            digest.update(f"{path.name}:{content}\n".encode('utf-8'))
        for idx in range(manifest.frame_count):
            path = manifest.frame_path(idx)
            try:
                stat = path.stat()
            except OSError:
                digest.update(f"{idx}:missing\n".encode('utf-8'))
                continue
            digest.update(f"{idx}:{stat.st_size}:{stat.st_mtime_ns}\n".encode('utf-8'))
        return digest.hexdigest()

    def valid(self):
        if not self.enabled or not self.fingerprint_path.exists():
            return False
        if self.fingerprint_path.read_text(encoding='utf-8').strip() != self.fingerprint:
            logger.info(f"⚠️ Stale stage cache in {self.root}, recomputing")
            return False
        return True

    def has_background(self):
        return self.valid() and self.background_path.exists()

    def has_mask(self):
        return self.valid() and self.mask_path.exists()

    def store(self, background_detections=None, road_mask=None):
        if not self.enabled:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        if background_detections is not None:
            write_detections(background_detections, self.background_path)
        if road_mask is not None:
            road_mask.save(self.mask_path)
        self.fingerprint_path.write_text(self.fingerprint + "\n", encoding='utf-8')


def to_sequence_indices(detections, sample_interval):
    """Original frame indices -> background-sequence indices (file layout)."""
    return [replace(d, frame_idx=d.frame_idx // sample_interval) for d in detections]


def to_frame_indices(detection_set, sample_interval):
    """Background-sequence indices -> original frame indices."""
    detections = [replace(d, frame_idx=d.frame_idx * sample_interval) for d in detection_set]
    return DetectionSet.from_detections(detections, DetectionSource.BACKGROUND)


def _external_background(manifest_path, config):
    path = Path(manifest_path).parent / config.paths.background_detections
    return path if path.exists() else None


def static_frame_pass(manifest, frames, config, need_background, need_mask, progress, keep_samples=False):
    """One pass over the frames feeding the background model and the motion branch.

    Returns (background detections in original frame indices, mask builder,
    sampled background images when keep_samples).
    """
    params = config.background
    model = BackgroundModel(manifest.height, manifest.width, params) if need_background else None
    builder = RoadMaskBuilder(manifest.height, manifest.width, config.motion, config.road) if need_mask else None
    detections = []
    samples = []
    for idx, frame in enumerate(frames):
        progress.frame_idx = idx
        if builder is not None:
            builder.feed(idx, frame)
        if model is None:
            continue
        model.apply(frame)
        if model.is_sample_frame(idx):
            image = model.background()
            detections.extend(detect_rectangles(image, idx, params.detect_threshold,
                                                params.detect_min_area, params.detect_score))
            if keep_samples:
                samples.append((idx, image))
        if idx and idx % 1800 == 0:
            logger.debug(f"'{manifest.video_id}': static pass at frame {idx}")
    return detections, builder, samples


def static_branches(manifest, background, road_mask, config):
    """Box and pixel branches over the sampled background stream."""
    fps = manifest.fps
    interval = config.background.sample_interval
    tracker = BoxTracker(config.tracker, config.criteria.iou_retrieve_thresh)
    background_tracks = tracker.run(background, range(0, manifest.frame_count, interval))
    box_events = classify_box_anomalies(background_tracks, road_mask, config.criteria, fps, manifest.video_id)

    pixel = PixelTracker(manifest.height, manifest.width, fps, interval, config.pixel, manifest.video_id)
    for idx in range(0, manifest.frame_count, interval):
        pixel.update(background.at(idx), idx)
        pixel.harvest(road_mask, idx)
    logger.info(f"Pixel branch: {len(pixel.events)} candidate events for '{manifest.video_id}'")
    return box_events, pixel.events, background_tracks


def dynamic_refine(event, tracks, road_mask, frames, fps, config):
    """Trajectory and flow branches on one event, then arbitration between them.

    Returns (event, velocity series or None, curve analysis).
    """
    traj_event, analysis = refine_with_trajectories(event, tracks, road_mask, fps, config.curve)
    traj_seconds = traj_event.start_seconds if traj_event.branch == Branch.TRAJECTORY_REFINED else None
    try:
        crash_frame, series = locate_crash_frame(event, frames, fps, config.flow)
    except DimensionError as e:
        logger.warning(f"⚠️ {event.video_id}: flow trace skipped: {e}")
        crash_frame, series = None, None
    flow_seconds = None if crash_frame is None else crash_frame / fps

    choice = arbitrate(traj_seconds, flow_seconds, config.flow.arbitration_s)
    if choice is None or choice[1] == Branch.TRAJECTORY_REFINED:
        return traj_event, series, analysis
    return traj_event.refined(choice[0], branch=Branch.FLOW_REFINED, note='flow spike'), series, analysis


def _clamp_to_video(event, duration):
    if event.start_seconds <= duration:
        return event
    return event.refined(duration, note='clamp')


def _event_order(event):
    return event.video_id, event.start_seconds, event.bbox.as_tuple()


def process_video(manifest_path, config):
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    video_id = manifest.video_id
    progress = _Progress(video_id)
    output_dir = Path(config.paths.output_dir) / video_id
    interval = config.background.sample_interval
    inputs = (manifest_path.parent / config.paths.original_detections,
              manifest_path.parent / config.paths.background_detections)
    cache = StageCache(Path(config.paths.output_dir) / CACHE_DIR / video_id, manifest, config, inputs)
    frames = FrameStore(manifest)

    logger.info(f"🎞️ Processing '{video_id}' ({manifest.duration:.1f}s)")
    with _stage(progress, 'ingest'):
        original = load_detections(manifest_path.parent / config.paths.original_detections,
                                   DetectionSource.ORIGINAL, manifest.frame_count)

    with _stage(progress, 'box-tracker'):
        tracker = BoxTracker(config.tracker, config.criteria.iou_retrieve_thresh)
        tracks = tracker.run(original, range(manifest.frame_count))
        logger.info(f"'{video_id}': {len(tracks)} tracks on the original stream")

    background = None
    external = _external_background(manifest_path, config)
    if external is not None:
        with _stage(progress, 'ingest'):
            background = to_frame_indices(load_detections(external, DetectionSource.BACKGROUND), interval)
        logger.info(f"'{video_id}': using background detections from {external}")
    elif cache.has_background():
        with _stage(progress, 'cache'):
            background = to_frame_indices(load_detections(cache.background_path, DetectionSource.BACKGROUND),
                                          interval)
        logger.info(f"'{video_id}': background detections from cache")

    road_mask = None
    if cache.has_mask():
        with _stage(progress, 'cache'):
            road_mask = RoadMask.load(cache.mask_path)
        logger.info(f"'{video_id}': road mask from cache")

    keep_samples = config.pipeline.write_background
    if background is None or road_mask is None or keep_samples:
        with _stage(progress, 'background-model'):
            detections, builder, samples = static_frame_pass(
                manifest, frames, config, background is None or keep_samples, road_mask is None, progress,
                keep_samples,
            )
        if background is None:
            background = DetectionSet.from_detections(detections, DetectionSource.BACKGROUND)
            cache.store(background_detections=to_sequence_indices(list(background), interval))
        if builder is not None:
            with _stage(progress, 'road-mask'):
                builder.add_tracks(tracks)
                road_mask = builder.build()
            cache.store(road_mask=road_mask)
        if keep_samples:
            write_background_images(samples, output_dir / 'background', video_id, manifest.fps, interval)

    with _stage(progress, 'static-branches'):
        box_events, pixel_events, background_tracks = static_branches(manifest, background, road_mask, config)

    with _stage(progress, 'roi-backtracker'):
        pixel_events = refine_events(pixel_events, frames, original, config.backtrack, manifest.fps)
        box_events = refine_events(box_events, frames, original, config.backtrack, manifest.fps)
        static_events = fuse_branch_events(pixel_events, box_events, config.backtrack)
        static_events = sorted(static_events, key=_event_order)
    logger.info(f"✅ '{video_id}': {len(static_events)} events after fusion")

    refined = [(e, None, None) for e in static_events]
    if config.pipeline.dynamic_stage:
        with _stage(progress, 'dynamic-stage'):
            refined = [dynamic_refine(e, tracks, road_mask, frames, manifest.fps, config) for e in static_events]
    refined = sorted(((_clamp_to_video(e, manifest.duration), trace, analysis) for e, trace, analysis in refined),
                     key=lambda r: _event_order(r[0]))
    events = [r[0] for r in refined]
    series = {i: r[1] for i, r in enumerate(refined) if r[1] is not None}
    analyses = {i: r[2] for i, r in enumerate(refined) if r[2] is not None}

    result = VideoResult(video_id, manifest, events, static_events, tracks, background_tracks, road_mask,
                         series, analyses)
    with _stage(progress, 'outputs'):
        write_video_outputs(result, frames, output_dir, config)
    return result


def write_video_outputs(result, frames, output_dir, config):
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    fps = result.manifest.fps
    params = config.pipeline
    if params.write_mask:
        result.road_mask.write_pgm(output_dir / 'road_mask.pgm')
    if params.write_tracks:
        write_tracks(result.tracks, output_dir / 'tracks.tsv')
        write_tracks(result.background_tracks, output_dir / 'background_tracks.tsv')
    if params.write_series:
        for i, trace in result.series.items():
            write_series(trace, output_dir / f"series_{i:02d}.tsv")
        for i, analysis in result.analyses.items():
            write_curve_counts(analysis, output_dir / f"curves_{i:02d}.tsv")
    if params.plots:
        for i, trace in result.series.items():
            if len(trace):
                plot_velocity_series(trace, output_dir / f"velocity_{i:02d}.png", fps,
                                     marker_frame=result.events[i].start_time.to_frame(fps))
        for i, analysis in result.analyses.items():
            plot_curve_counts(analysis, output_dir / f"curves_{i:02d}.png")
    if params.overlays:
        by_event = {result.events[i]: trace for i, trace in result.series.items()}
        emit_overlays(frames, result.events, result.tracks, output_dir / 'overlays', fps,
                      params.overlay_stride, by_event)


def event_record(event):
    b = event.bbox
    return {
        'video_id': event.video_id,
        'start_seconds': round(event.start_seconds, 6),
        'bbox': [b.x1, b.y1, b.x2, b.y2],
        'branch': event.branch.value,
        'confidence': round(event.confidence, 6),
        'history': list(event.history),
    }


def write_event_records(events, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for event in sorted(events, key=_event_order):
            f.write(json.dumps(event_record(event), sort_keys=True) + "\n")
    return path


def run_videos(manifest_paths, config):
    """Process every manifest in a bounded pool of worker threads."""
    results = {}
    failures = {}
    lock = threading.Lock()
    slots = threading.Semaphore(config.pipeline.workers)

    def worker(path):
        with slots:
            try:
                result = process_video(path, config)
            except Exception as e:
                with lock:
                    failures[str(path)] = e
                return
            with lock:
                if result.video_id in results:
                    failures[str(path)] = ConfigError(f"Duplicate video id '{result.video_id}' in {path}")
                    return
                results[result.video_id] = result

    threads = [threading.Thread(target=worker, args=(p,), daemon=True) for p in manifest_paths]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    if failures:
        first = sorted(failures)[0]
        logger.error(f"❌ {len(failures)} video(s) failed, first: {first}")
        error = failures[first]
        if isinstance(error, CrashTraceError):
            raise error
        raise PipelineError('pipeline', first, None, error) from error
    return results


def run_pipeline(config=None):
    """Run every configured video; returns a RunSummary with events and the score report."""
    config = config or PipelineConfig()
    if not config.paths.manifests:
        raise ConfigError("paths.manifests is empty: nothing to process")
    results = run_videos([Path(p) for p in config.paths.manifests], config)
    events = sorted((e for r in results.values() for e in r.events), key=_event_order)

    output_dir = Path(config.paths.output_dir)
    write_predictions(events, output_dir / PREDICTIONS_FILE)
    write_event_records(events, output_dir / EVENTS_FILE)
    logger.info(f"✅ {len(events)} events from {len(results)} videos written to {output_dir}")

    summary = RunSummary(events, results)
    if config.paths.ground_truth:
        truth = load_ground_truth(config.paths.ground_truth)
        predictions = predictions_by_video(events)
        for video_id in results:
            predictions.setdefault(video_id, [])
        summary.scores, _ = score(predictions, truth, config.evaluation)
        summary.report = format_report(predictions, truth, config.evaluation)
        logger.info(f"📈 F1 {summary.scores.f1:.4f}  S4 {summary.scores.s4:.4f}")
    return summary


def build_road_mask(manifest_path, config):
    """Road mask of one video without running the anomaly branches."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    progress = _Progress(manifest.video_id)
    with _stage(progress, 'ingest'):
        original = load_detections(manifest_path.parent / config.paths.original_detections,
                                   DetectionSource.ORIGINAL, manifest.frame_count)
    with _stage(progress, 'road-mask'):
        tracker = BoxTracker(config.tracker, config.criteria.iou_retrieve_thresh)
        tracks = tracker.run(original, range(manifest.frame_count))
        _, builder, _ = static_frame_pass(manifest, FrameStore(manifest), config, False, True, progress)
        builder.add_tracks(tracks)
        mask = builder.build()
    return manifest, mask

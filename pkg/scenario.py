"""
Synthetic traffic scenes with exact ground truth.

Vehicles are textured bright blocks moving along horizontal lanes over a
darker blocky background. Every scene is rendered deterministically from its
seed and written in the same layout `ingest` reads: a frame directory, a
manifest, the original-stream detection file and a ground-truth file.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core import BBox, Detection, ScenarioError, clip_bbox
from ingest import VideoManifest, write_detections, write_frame, write_ground_truth, write_manifest

logger = logging.getLogger(__name__)

BACKGROUND_RANGE = (50, 110)
VEHICLE_RANGE = (190, 250)
BACKGROUND_BLOCK = 8
VEHICLE_BLOCK = 4


@dataclass(frozen=True)
class Actor:
    """Scripted vehicle. Speeds are px/frame; times are seconds."""
    actor_id: int
    lane_y: float
    enter_s: float = 0.0
    speed: float = 3.0
    x0: float = None
    width: int = 40
    height: int = 20
    stop_s: float = None
    decel_s: float = 0.0
    swerve_s: float = None
    swerve_dy: float = 40.0
    swerve_frames: int = 5
    curve_amplitude: float = 0.0
    curve_period: float = 200.0
    parked: bool = False

    def start_x(self, frame_width):
        if self.x0 is not None:
            return self.x0
        return -float(self.width) if self.speed >= 0 else float(frame_width)

    def box_at(self, idx, fps, frame_width):
        """Unclipped box at frame idx, or None before the actor enters."""
        x0 = self.start_x(frame_width)
        if self.parked:
            return BBox(x0, self.lane_y, x0 + self.width, self.lane_y + self.height)
        enter = int(round(self.enter_s * fps))
        if idx < enter:
            return None
        n = idx - enter
        if self.stop_s is None:
            x = x0 + self.speed * n
        else:
            stop = int(round(self.stop_s * fps))
            decel = int(round(self.decel_s * fps))
            full = stop - decel - enter
            if idx <= stop - decel:
                x = x0 + self.speed * n
            elif idx < stop:
                k = idx - (stop - decel)
                x = x0 + self.speed * full + self.speed * (k - k * k / (2.0 * decel))
            else:
                x = x0 + self.speed * full + self.speed * decel / 2.0
        y = self.lane_y
        if self.curve_amplitude:
            y += self.curve_amplitude * math.sin(2 * math.pi * (x - x0) / self.curve_period)
        if self.swerve_s is not None:
            swerve = int(round(self.swerve_s * fps))
            if idx >= swerve:
                y += self.swerve_dy * min(1.0, (idx - swerve + 1) / self.swerve_frames)
        x, y = float(round(x)), float(round(y))
        return BBox(x, y, x + self.width, y + self.height)


@dataclass(frozen=True)
class SyntheticScenario:
    video_id: str
    width: int
    height: int
    fps: float
    duration_s: float
    actors: tuple
    lanes: tuple = ()
    noise_sigma: float = 2.0
    shake_frames: tuple = ()
    shake_offset: int = 60
    seed: int = 0
    jitter_px: float = 0.0
    dropout: float = 0.0
    detection_score: float = 0.9
    min_visible_area: float = 50.0
    ground_truth: tuple = ()

    @property
    def frame_count(self):
        return int(round(self.duration_s * self.fps))

    def validate(self):
        if self.width <= 0 or self.height <= 0 or self.fps <= 0 or self.duration_s <= 0:
            raise ScenarioError(f"{self.video_id}: size, fps and duration must be positive")
        for a in self.actors:
            top = a.lane_y - abs(a.curve_amplitude)
            bottom = a.lane_y + a.height + abs(a.curve_amplitude)
            if a.swerve_s is not None:
                top = min(top, a.lane_y + min(0.0, a.swerve_dy))
                bottom = max(bottom, a.lane_y + a.height + max(0.0, a.swerve_dy))
            if top < 0 or bottom > self.height:
                raise ScenarioError(f"{self.video_id}: actor {a.actor_id} leaves the frame vertically")
            if a.enter_s < 0 or a.enter_s >= self.duration_s:
                raise ScenarioError(f"{self.video_id}: actor {a.actor_id} enters outside the video")
            if a.parked or a.stop_s is not None:
                rest = a.box_at(self.frame_count - 1, self.fps, self.width)
                if rest.x1 < 0 or rest.x2 > self.width:
                    raise ScenarioError(
                        f"{self.video_id}: actor {a.actor_id} comes to rest outside the frame at x={rest.x1:.0f}"
                    )
        return self

    def visible_boxes(self, idx):
        boxes = []
        for a in self.actors:
            box = a.box_at(idx, self.fps, self.width)
            if box is None:
                continue
            clipped = clip_bbox(box, self.height, self.width)
            if clipped.area >= self.min_visible_area:
                boxes.append((a, box, clipped))
        return boxes


def _texture(rng, height, width, block, value_range):
    rows = -(-height // block)
    cols = -(-width // block)
    blocks = rng.integers(value_range[0], value_range[1] + 1, size=(rows, cols))
    return np.kron(blocks, np.ones((block, block), dtype=np.int64))[:height, :width].astype(np.float64)


class ScenarioRenderer:
    def __init__(self, scenario):
        self.scenario = scenario
        rng = np.random.default_rng(scenario.seed)
        self.background = _texture(rng, scenario.height, scenario.width, BACKGROUND_BLOCK, BACKGROUND_RANGE)
        self.textures = {
            a.actor_id: _texture(np.random.default_rng((scenario.seed, a.actor_id)),
                                 a.height, a.width, VEHICLE_BLOCK, VEHICLE_RANGE)
            for a in scenario.actors
        }

    def render(self, idx):
        s = self.scenario
        img = self.background.copy()
        for actor, box, clipped in s.visible_boxes(idx):
            r0, c0 = int(box.y1), int(box.x1)
            rr0, rr1 = int(clipped.y1), int(clipped.y2)
            cc0, cc1 = int(clipped.x1), int(clipped.x2)
            img[rr0:rr1, cc0:cc1] = self.textures[actor.actor_id][rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]
        if idx in s.shake_frames:
            img += s.shake_offset
        if s.noise_sigma > 0:
            img += np.random.default_rng((s.seed, idx)).normal(0.0, s.noise_sigma, img.shape)
        return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)

    def detections(self, idx):
        s = self.scenario
        rng = np.random.default_rng((s.seed, idx, 7))
        found = []
        for _, _, clipped in s.visible_boxes(idx):
            if s.dropout and rng.random() < s.dropout:
                continue
            box = clipped
            if s.jitter_px:
                dx1, dy1, dx2, dy2 = rng.normal(0.0, s.jitter_px, 4)
                box = clip_bbox(BBox(clipped.x1 + min(dx1, 0), clipped.y1 + min(dy1, 0),
                                     clipped.x2 + max(dx2, 0), clipped.y2 + max(dy2, 0)),
                                s.height, s.width)
            found.append(Detection(idx, box, s.detection_score))
        return found


@dataclass(frozen=True)
class ScenarioFiles:
    manifest_path: Path
    detections_path: Path
    ground_truth_path: Path
    manifest: VideoManifest = field(compare=False)


def generate_scenario(scenario, output_folder):
    """Render every frame and write manifest, detections and ground truth."""
    scenario.validate()
    root = Path(output_folder) / scenario.video_id
    frame_dir = root / 'frames'
    renderer = ScenarioRenderer(scenario)
    detections = []
    for idx in range(scenario.frame_count):
        write_frame(frame_dir / f"{idx:06d}.png", renderer.render(idx))
        detections.extend(renderer.detections(idx))
    manifest = VideoManifest(
        video_id=scenario.video_id,
        frame_dir=frame_dir,
        fps=float(scenario.fps),
        width=scenario.width,
        height=scenario.height,
        frame_count=scenario.frame_count,
    )
    manifest_path = write_manifest(manifest, root / 'manifest.txt')
    detections_path = write_detections(detections, root / 'detections_original.txt')
    truth_path = write_ground_truth({scenario.video_id: list(scenario.ground_truth)}, root / 'ground_truth.txt')
    logger.info(f"🎬 Rendered '{scenario.video_id}': {scenario.frame_count} frames, "
                f"{len(detections)} detections, truth {list(scenario.ground_truth)}")
    return ScenarioFiles(manifest_path, detections_path, truth_path, manifest)


def road_region(scenario):
    """Union of moving-vehicle footprints: the rendered road of the scene."""
    region = np.zeros((scenario.height, scenario.width), dtype=bool)
    for idx in range(scenario.frame_count):
        for actor, _, clipped in scenario.visible_boxes(idx):
            if actor.parked:
                continue
            region[int(clipped.y1):int(clipped.y2), int(clipped.x1):int(clipped.x2)] = True
    return region


# presets

def _lanes(height, vehicle_h=20):
    lane_a = int(round(0.25 * height))
    lane_b = int(round(0.6 * height))
    return lane_a, lane_b, ((lane_a, lane_a + vehicle_h), (lane_b, lane_b + vehicle_h))


def _enter_for_stop(stop_s, x_stop, speed, decel_s, fps, x0):
    travel = x_stop - x0 - speed * decel_s * fps / 2.0
    enter_s = stop_s - decel_s - travel / speed / fps
    if enter_s < 0:
        raise ScenarioError(f"Vehicle cannot reach x={x_stop} by {stop_s}s at {speed} px/frame")
    return round(enter_s * fps) / fps


def _traffic(lane_y, times, start_id, speed=3.0):
    return [Actor(start_id + i, lane_y, enter_s=t, speed=speed) for i, t in enumerate(times)]


def _spaced(start, end, every):
    times = []
    t = start
    while t < end:
        times.append(round(t, 3))
        t += every
    return times


def stall_scenario(video_id='synth01', stop_s=30.0, duration_s=110.0, width=240, height=120,
                   fps=30.0, seed=0, speed=3.0, noise_sigma=2.0):
    lane_a, lane_b, lanes = _lanes(height)
    x_stop = round(width / 2)
    enter = _enter_for_stop(stop_s, x_stop, speed, 0.0, fps, -40.0)
    crossing_s = (width + 40) / speed / fps
    before = _spaced(2.0, enter - crossing_s - 1.0, 6.0)
    actors = _traffic(lane_a, before, 100, speed)
    actors.append(Actor(1, lane_a, enter_s=enter, speed=speed, stop_s=stop_s))
    actors += _traffic(lane_b, _spaced(1.0, duration_s - crossing_s, 5.0), 200, speed)
    return SyntheticScenario(video_id, width, height, fps, duration_s, tuple(actors), lanes,
                             noise_sigma=noise_sigma, seed=seed, ground_truth=(stop_s,))


def crash_scenario(video_id='crash01', swerve_s=30.0, stop_s=32.0, decel_s=1.0, duration_s=110.0,
                   width=320, height=120, fps=30.0, seed=0, speed=2.0, noise_sigma=2.0):
    """Vehicle swerves into the other lane, brakes and stays there."""
    lane_a, lane_b, lanes = _lanes(height)
    x_stop = round(0.65 * width)
    enter = _enter_for_stop(stop_s, x_stop, speed, decel_s, fps, -40.0)
    if enter >= swerve_s:
        raise ScenarioError(f"{video_id}: vehicle enters after its swerve")
    crossing_s = (width + 40) / speed / fps
    actors = _traffic(lane_a, _spaced(2.0, enter - crossing_s - 1.0, 6.0), 100, speed)
    actors += _traffic(lane_b, _spaced(1.0, swerve_s - crossing_s - 1.0, 5.0), 200, speed)
    actors.append(Actor(1, lane_a, enter_s=enter, speed=speed, stop_s=stop_s, decel_s=decel_s,
                        swerve_s=swerve_s, swerve_dy=lane_b - lane_a, swerve_frames=4))
    return SyntheticScenario(video_id, width, height, fps, duration_s, tuple(actors), lanes,
                             noise_sigma=noise_sigma, seed=seed, ground_truth=(swerve_s,))


def normal_scenario(video_id='normal01', duration_s=60.0, width=240, height=120, fps=30.0, seed=0,
                    speed=3.0, noise_sigma=2.0):
    lane_a, lane_b, lanes = _lanes(height)
    crossing_s = (width + 40) / speed / fps
    actors = _traffic(lane_a, _spaced(1.0, duration_s - crossing_s, 4.0), 100, speed)
    actors += _traffic(lane_b, _spaced(3.0, duration_s - crossing_s, 5.0), 200, speed)
    return SyntheticScenario(video_id, width, height, fps, duration_s, tuple(actors), lanes,
                             noise_sigma=noise_sigma, seed=seed)


def parking_scenario(video_id='parking01', duration_s=90.0, width=240, height=150, fps=30.0, seed=0):
    """Through traffic on the road plus a vehicle parked off-road for the whole video."""
    base = normal_scenario(video_id, duration_s, width, height, fps, seed)
    parked = Actor(1, lane_y=height - 30, x0=width / 2 - 20, parked=True)
    return SyntheticScenario(video_id, width, height, fps, duration_s, base.actors + (parked,), base.lanes,
                             noise_sigma=base.noise_sigma, seed=seed)


def shake_scenario(video_id='shake01', duration_s=60.0, width=240, height=120, fps=30.0, seed=0,
                   shake_every_s=10.0):
    base = normal_scenario(video_id, duration_s, width, height, fps, seed)
    shakes = tuple(int(round(t * fps)) for t in _spaced(shake_every_s, duration_s, shake_every_s))
    return SyntheticScenario(video_id, width, height, fps, duration_s, base.actors, base.lanes,
                             noise_sigma=base.noise_sigma, shake_frames=shakes, seed=seed)


def curved_scenario(video_id='curved01', duration_s=60.0, width=320, height=140, fps=30.0, seed=0,
                    amplitude=25.0, period=90.0, every_s=1.0):
    """Steady traffic along one sinusoidal road; every vehicle curves the same way."""
    lane_y = round(height / 2 - 10)
    crossing_s = (width + 40) / 3.0 / fps
    actors = tuple(Actor(100 + i, lane_y, enter_s=t, curve_amplitude=amplitude, curve_period=period)
                   for i, t in enumerate(_spaced(0.0, duration_s - crossing_s, every_s)))
    lanes = ((int(lane_y - amplitude), int(lane_y + 20 + amplitude)),)
    return SyntheticScenario(video_id, width, height, fps, duration_s, actors, lanes, seed=seed)


def stall_suite(n=10, width=800, height=410, fps=30.0, base_seed=0):
    """Stalls with stop times 20-56 s and durations 95-180 s."""
    rng = np.random.default_rng(base_seed)
    suite = []
    for i in range(n):
        stop_s = float(20 + 4 * i)
        duration_s = float(min(180.0, stop_s + 75 + rng.integers(0, 40)))
        suite.append(stall_scenario(f"stall{i:02d}", stop_s=stop_s, duration_s=duration_s, width=width,
                                    height=height, fps=fps, seed=base_seed + i))
    return suite


def crash_suite(n=5, width=800, height=410, fps=30.0, base_seed=100):
    suite = []
    for i in range(n):
        swerve_s = float(30 + 5 * i)
        suite.append(crash_scenario(f"crash{i:02d}", swerve_s=swerve_s, stop_s=swerve_s + 2.0,
                                    duration_s=swerve_s + 80.0, width=width, height=height, fps=fps,
                                    seed=base_seed + i))
    return suite


PRESETS = {
    'stall': stall_scenario,
    'crash': crash_scenario,
    'normal': normal_scenario,
    'parking': parking_scenario,
    'shake': shake_scenario,
    'curved': curved_scenario,
}


def build_preset(name, **kwargs):
    if name not in PRESETS:
        raise ScenarioError(f"Unknown scenario preset '{name}' (choose from {sorted(PRESETS)})")
    return PRESETS[name](**kwargs)

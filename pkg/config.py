import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from background_model import BackgroundParams
from box_tracker import AnomalyCriteria, TrackerParams
from core import ConfigError
from evaluation import EvaluationParams
from flow_tracer import FlowParams
from multi_trajectory import CurveParams
from pixel_tracker import PixelTrackerParams
from road_mask import MotionMaskParams, RoadMaskParams
from roi_backtracker import SimilarityThresholds

# Runtime Configuration
LOG_LEVEL = os.getenv('CRASHTRACE_LOG_LEVEL', 'INFO')
OUTPUT_DIR = os.getenv('CRASHTRACE_OUTPUT_DIR', 'output')
WORKERS = int(os.getenv('CRASHTRACE_WORKERS', '2'))

# Cache Configuration
CACHE_ENABLED = os.getenv('CRASHTRACE_CACHE', 'true').lower() == 'true'

# Detection files expected next to each manifest
ORIGINAL_DETECTIONS = 'detections_original.txt'
BACKGROUND_DETECTIONS = 'detections_background.txt'


@dataclass(frozen=True)
class PipelineParams:
    dynamic_stage: bool = True
    cache: bool = CACHE_ENABLED
    workers: int = WORKERS
    write_background: bool = False
    write_series: bool = True
    write_tracks: bool = False
    write_mask: bool = True
    plots: bool = False
    overlays: bool = False
    overlay_stride: int = 1

    def __post_init__(self):
        if self.workers < 1 or self.overlay_stride < 1:
            raise ConfigError("pipeline: workers and overlay_stride must be >= 1")


@dataclass(frozen=True)
class PathsConfig:
    manifests: tuple = ()
    ground_truth: str = None
    output_dir: str = OUTPUT_DIR
    original_detections: str = ORIGINAL_DETECTIONS
    background_detections: str = BACKGROUND_DETECTIONS


@dataclass(frozen=True)
class PipelineConfig:
    background: BackgroundParams = field(default_factory=BackgroundParams)
    motion: MotionMaskParams = field(default_factory=MotionMaskParams)
    road: RoadMaskParams = field(default_factory=RoadMaskParams)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    criteria: AnomalyCriteria = field(default_factory=AnomalyCriteria)
    pixel: PixelTrackerParams = field(default_factory=PixelTrackerParams)
    backtrack: SimilarityThresholds = field(default_factory=SimilarityThresholds)
    curve: CurveParams = field(default_factory=CurveParams)
    flow: FlowParams = field(default_factory=FlowParams)
    evaluation: EvaluationParams = field(default_factory=EvaluationParams)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def sections(cls):
        return [f.name for f in dataclasses.fields(cls)]


def _parse_scalar(raw, kind, key):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ('true', 'false'):
                raise ValueError(f"expected true/false, got {raw!r}")
            return lowered == 'true'
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e


def _parse_value(raw, declared, default, key):
    raw = raw.strip()
    if raw.lower() == 'none':
        return None
    if declared.type is tuple:
        if not raw:
            return ()
        kind = type(default[0]) if default else str
        return tuple(_parse_scalar(part.strip(), kind, key) for part in raw.split(','))
    kind = declared.type if declared.type in (bool, int, float) else str
    return _parse_scalar(raw, kind, key)


def _format_value(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(config, pairs):
    """Apply `section.key = value` assignments to a config, returning a new one."""
    updates = {}
    for key, raw in pairs:
        if '.' not in key:
            raise ConfigError(f"Config key {key!r} needs a 'section.' prefix")
        section, name = key.split('.', 1)
        if section not in PipelineConfig.sections():
            raise ConfigError(f"Unknown config section {section!r}")
        current = getattr(config, section)
        declared = {f.name: f for f in dataclasses.fields(current)}
        if name not in declared:
            raise ConfigError(f"Unknown config key {key!r}")
        default = getattr(current, name)
        updates.setdefault(section, {})[name] = _parse_value(raw, declared[name], default, key)
    changed = {}
    for section, values in updates.items():
        try:
            changed[section] = dataclasses.replace(getattr(config, section), **values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid values for section {section!r}: {e}") from e
    return dataclasses.replace(config, **changed)


def parse_config_text(text, base=None):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = line.split('=', 1)
        pairs.append((key.strip(), value))
    return apply_overrides(base or PipelineConfig(), pairs)


def load_config(path=None):
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    return parse_config_text(path.read_text(encoding='utf-8'))


def format_config(config):
    lines = []
    for section in PipelineConfig.sections():
        params = getattr(config, section)
        lines.append(f"# {section}")
        for f in dataclasses.fields(params):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(params, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(config), encoding='utf-8')
    return path

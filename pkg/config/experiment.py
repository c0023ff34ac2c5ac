"""
Experiment Configuration

ExperimentConfig is the per-experiment parameter tree: scenario layout and
object mix, Lidar sweep, pillar grid, attention sizes, oracle detector,
link model, policy comparison and output directory. Files are
line-oriented `key = value` text with `[section]` headers; keys not given
keep their defaults, so a file only needs what it changes.

Angles in files are degrees; poses are written `x y yaw`, spawn zones
`x_min x_max y_min y_max weight`, list entries are separated by `;`.

Usage:
    from config.experiment import ExperimentConfig
    config = ExperimentConfig.resolve('roundabout')
    config.scenario.frames = 200
"""

import configparser
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple, Union

from config.constants import (
    ATTENTION_DEFAULTS, GRID_DEFAULTS, MATCHING, SCENE_DEFAULTS, PolicyName
)
from config.settings import Config
from utils.errors import ValidationError
from utils.validators import (
    require, validate_count, validate_policy_names, validate_positive,
    validate_probability, validate_range
)

BUCKETS = ('easy', 'moderate', 'hard', 'near', 'far', 'all')
SPLITS = ('train', 'val', 'test', 'all')


# ============= Value Codecs =============

def _floats(count: Optional[int] = None):
    def parse(raw: str) -> Tuple[float, ...]:
        values = tuple(float(v) for v in raw.split())
        if count is not None and len(values) != count:
            raise ValueError(f"expected {count} numbers, got {len(values)}")
        return values
    return parse


def _format_floats(values) -> str:
    return ' '.join(f"{float(v):g}" for v in values)


def _parse_pose(raw: str) -> Tuple[float, float, float]:
    return _floats(3)(raw)


def _parse_pose_list(raw: str) -> List[Tuple[float, float, float]]:
    return [_parse_pose(part) for part in raw.split(';') if part.strip()]


def _format_pose_list(poses) -> str:
    return '; '.join(_format_floats(p) for p in poses)


def _parse_zone_list(raw: str) -> List[Tuple[float, ...]]:
    return [_floats(5)(part) for part in raw.split(';') if part.strip()]


def _parse_names(raw: str) -> List[str]:
    return raw.replace(',', ' ').split()


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _codec(parse, fmt=_format_floats):
    return {'parse': parse, 'format': fmt}


# ============= Sections =============

@dataclass
class ScenarioSettings:
    """Layout, object mix and frame count."""
    name: str = 'roundabout'
    frames: int = 100
    seed: int = 0
    vehicle: Tuple[float, float, float] = field(
        default=(0.0, -20.0, 90.0), metadata=_codec(_parse_pose))
    infrastructures: List[Tuple[float, float, float]] = field(
        default_factory=lambda: [(0.0, 18.0, -90.0), (-15.6, -9.0, 30.0), (15.6, -9.0, 150.0)],
        metadata=_codec(_parse_pose_list, _format_pose_list))
    vehicle_height: float = SCENE_DEFAULTS['VEHICLE_SENSOR_HEIGHT']
    infra_height: float = SCENE_DEFAULTS['INFRA_SENSOR_HEIGHT']
    spawn_zones: List[Tuple[float, ...]] = field(
        default_factory=lambda: [(-38.0, 38.0, -52.0, 14.0, 1.0)],
        metadata=_codec(_parse_zone_list, _format_pose_list))
    min_vehicles: int = 20
    max_vehicles: int = SCENE_DEFAULTS['MAX_VEHICLES']
    min_pedestrians: int = 0
    max_pedestrians: int = SCENE_DEFAULTS['MAX_PEDESTRIANS']
    car_probability: float = SCENE_DEFAULTS['CAR_PROBABILITY']
    running_probability: float = SCENE_DEFAULTS['RUNNING_PROBABILITY']
    size_jitter: float = SCENE_DEFAULTS['SIZE_JITTER']
    placement_retries: int = SCENE_DEFAULTS['PLACEMENT_RETRIES']
    sensor_clearance: float = SCENE_DEFAULTS['SENSOR_CLEARANCE']

    @property
    def num_infrastructures(self) -> int:
        return len(self.infrastructures)


@dataclass
class LidarSettings:
    """Ray sweep of every sensor."""
    angular_resolution: float = 0.25
    max_range: float = 100.0
    vertical_step: float = 0.25


@dataclass
class GridSettings:
    """Pillar grid, pillar capacity and encoder channels."""
    x_range: Tuple[float, float] = field(default=GRID_DEFAULTS['X_RANGE'], metadata=_codec(_floats(2)))
    y_range: Tuple[float, float] = field(default=GRID_DEFAULTS['Y_RANGE'], metadata=_codec(_floats(2)))
    z_range: Tuple[float, float] = field(default=GRID_DEFAULTS['Z_RANGE'], metadata=_codec(_floats(2)))
    pillar_size: Tuple[float, float, float] = field(
        default=GRID_DEFAULTS['PILLAR_SIZE'], metadata=_codec(_floats(3)))
    omega: int = GRID_DEFAULTS['OMEGA']
    channels: int = GRID_DEFAULTS['CHANNELS']
    seed: int = 0


@dataclass
class AttentionSettings:
    """Query/key sizes and surrogate training."""
    query_size: int = ATTENTION_DEFAULTS['QUERY_SIZE']
    key_size: int = ATTENTION_DEFAULTS['KEY_SIZE']
    learning_rate: float = ATTENTION_DEFAULTS['LEARNING_RATE']
    epochs: int = ATTENTION_DEFAULTS['EPOCHS']
    init_scale: float = ATTENTION_DEFAULTS['INIT_SCALE']
    seed: int = 0


@dataclass
class DetectionSettings:
    """Oracle detector and evaluation thresholds."""
    threshold: int = 5
    noise_scale: float = 0.0
    score_kappa: float = 10.0
    iou_threshold: float = MATCHING['EVAL_IOU']
    aib_bucket: str = 'moderate'


@dataclass
class NetworkSettings:
    """Link model shared by every vehicle-infrastructure link."""
    capacity: float = 12.5e6
    latency: float = 0.002
    loss_probability: float = 0.0
    seed: int = 0


@dataclass
class CompareSettings:
    """Policies to compare and the split they run on."""
    policies: List[str] = field(
        default_factory=lambda: [p.value for p in PolicyName],
        metadata=_codec(_parse_names, lambda names: ' '.join(names)))
    split: str = 'test'
    random_seed: int = 0


@dataclass
class OutputSettings:
    directory: str = Config.OUTPUT_DIR


SECTIONS = {
    'scenario': ScenarioSettings,
    'lidar': LidarSettings,
    'grid': GridSettings,
    'attention': AttentionSettings,
    'detection': DetectionSettings,
    'network': NetworkSettings,
    'compare': CompareSettings,
    'output': OutputSettings,
}


def _parse_field(definition, raw: str):
    if 'parse' in definition.metadata:
        return definition.metadata['parse'](raw)
    if definition.type in (bool, 'bool'):
        return _parse_bool(raw)
    if definition.type in (int, 'int'):
        return int(raw)
    if definition.type in (float, 'float'):
        return float(raw)
    return raw.strip()


def _format_field(definition, value) -> str:
    if 'format' in definition.metadata:
        return definition.metadata['format'](value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ============= Experiment Config =============

@dataclass
class ExperimentConfig:
    """Complete parameter tree of one experiment."""
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    lidar: LidarSettings = field(default_factory=LidarSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    attention: AttentionSettings = field(default_factory=AttentionSettings)
    detection: DetectionSettings = field(default_factory=DetectionSettings)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    compare: CompareSettings = field(default_factory=CompareSettings)
    output: OutputSettings = field(default_factory=OutputSettings)
    source: Optional[str] = field(default=None, compare=False)

    # ========== Loading ==========

    @classmethod
    def from_text(cls, text: str, source: Optional[str] = None) -> 'ExperimentConfig':
        """
        Parse experiment file text over the defaults.

        Raises:
            ValidationError: On unknown sections or keys, unparsable values
                or values outside their documented ranges
        """
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#',))
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ValidationError(f"cannot parse experiment file {source or ''}: {e}") from e

        config = cls(source=source)
        for section_name in parser.sections():
            if section_name not in SECTIONS:
                raise ValidationError(
                    f"unknown section [{section_name}]; valid sections: {', '.join(SECTIONS)}"
                )
            section = getattr(config, section_name)
            known = {definition.name: definition for definition in fields(section)}
            for key, raw in parser[section_name].items():
                if key not in known:
                    raise ValidationError(
                        f"unknown key {section_name}.{key}; valid keys: {', '.join(known)}"
                    )
                try:
                    setattr(section, key, _parse_field(known[key], raw))
                except ValueError as e:
                    raise ValidationError(f"{section_name}.{key}: {e}") from e

        config.validate()
        return config

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"experiment file not found: {path}")
        return cls.from_text(path.read_text(encoding='utf-8'), source=str(path))

    @classmethod
    def preset(cls, name: str) -> 'ExperimentConfig':
        path = Path(Config.PRESET_DIR) / f"{name}.conf"
        if not path.is_file():
            available = sorted(p.stem for p in Path(Config.PRESET_DIR).glob('*.conf'))
            raise ValidationError(f"unknown preset {name!r}; available: {', '.join(available)}")
        return cls.load(path)

    @classmethod
    def resolve(cls, name_or_path: Optional[str]) -> 'ExperimentConfig':
        """A file path, a preset name, or None for the built-in defaults."""
        if name_or_path is None:
            return cls()
        if Path(name_or_path).is_file():
            return cls.load(name_or_path)
        return cls.preset(name_or_path)

    # ========== Output ==========

    def to_text(self) -> str:
        lines = []
        for section_name in SECTIONS:
            section = getattr(self, section_name)
            lines.append(f"[{section_name}]")
            for definition in fields(section):
                lines.append(f"{definition.name} = {_format_field(definition, getattr(section, definition.name))}")
            lines.append('')
        return '\n'.join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()

    # ========== Derived Values ==========

    def vehicle_yaw(self) -> float:
        return math.radians(self.scenario.vehicle[2])

    def policy_names(self) -> List[PolicyName]:
        return require('compare.policies', validate_policy_names(self.compare.policies))

    # ========== Validation ==========

    def validate(self) -> None:
        """
        Check every numeric field against its documented range.

        Raises:
            ValidationError: Naming the offending section.key
        """
        s = self.scenario
        require('scenario.frames', validate_count(s.frames))
        require('scenario.vehicle_height', validate_positive(s.vehicle_height))
        require('scenario.infra_height', validate_positive(s.infra_height))
        require('scenario.min_vehicles', validate_count(s.min_vehicles))
        require('scenario.max_vehicles', validate_count(s.max_vehicles, minimum=s.min_vehicles))
        require('scenario.min_pedestrians', validate_count(s.min_pedestrians))
        require('scenario.max_pedestrians', validate_count(s.max_pedestrians, minimum=s.min_pedestrians))
        require('scenario.car_probability', validate_probability(s.car_probability))
        require('scenario.running_probability', validate_probability(s.running_probability))
        require('scenario.size_jitter', validate_positive(s.size_jitter, allow_zero=True))
        require('scenario.placement_retries', validate_count(s.placement_retries, minimum=1))
        require('scenario.sensor_clearance', validate_positive(s.sensor_clearance, allow_zero=True))
        if s.max_vehicles + s.max_pedestrians > SCENE_DEFAULTS['MAX_OBJECTS']:
            raise ValidationError(
                f"scenario: at most {SCENE_DEFAULTS['MAX_OBJECTS']} objects per frame, "
                f"got {s.max_vehicles} vehicles + {s.max_pedestrians} pedestrians"
            )
        if s.max_vehicles + s.max_pedestrians > 0 and not s.spawn_zones:
            raise ValidationError("scenario.spawn_zones: objects requested but no spawn zone given")
        for zone in s.spawn_zones:
            require('scenario.spawn_zones', validate_range(zone[0:2]))
            require('scenario.spawn_zones', validate_range(zone[2:4]))
            require('scenario.spawn_zones', validate_positive(zone[4]))

        require('lidar.angular_resolution', validate_positive(self.lidar.angular_resolution))
        require('lidar.max_range', validate_positive(self.lidar.max_range))
        require('lidar.vertical_step', validate_positive(self.lidar.vertical_step))

        g = self.grid
        for name in ('x_range', 'y_range', 'z_range'):
            require(f'grid.{name}', validate_range(getattr(g, name)))
        for size in g.pillar_size:
            require('grid.pillar_size', validate_positive(size))
        require('grid.omega', validate_count(g.omega, minimum=1))
        require('grid.channels', validate_count(g.channels, minimum=1))

        a = self.attention
        require('attention.query_size', validate_count(a.query_size, minimum=1))
        require('attention.key_size', validate_count(a.key_size, minimum=1))
        require('attention.learning_rate', validate_positive(a.learning_rate))
        require('attention.epochs', validate_count(a.epochs))
        require('attention.init_scale', validate_positive(a.init_scale))

        d = self.detection
        require('detection.threshold', validate_count(d.threshold, minimum=1))
        require('detection.noise_scale', validate_positive(d.noise_scale, allow_zero=True))
        require('detection.score_kappa', validate_positive(d.score_kappa))
        require('detection.iou_threshold', validate_probability(d.iou_threshold))
        require('detection.iou_threshold', validate_positive(d.iou_threshold))
        if d.aib_bucket not in BUCKETS:
            raise ValidationError(f"detection.aib_bucket: must be one of {', '.join(BUCKETS)}")

        n = self.network
        require('network.capacity', validate_positive(n.capacity))
        require('network.latency', validate_positive(n.latency, allow_zero=True))
        require('network.loss_probability', validate_probability(n.loss_probability))

        self.policy_names()
        if self.compare.split not in SPLITS:
            raise ValidationError(f"compare.split: must be one of {', '.join(SPLITS)}")

"""
Scene Records and Dataset Store

SceneFrame and its parts, the line-oriented scene text format, detections
and ground truth as evaluated, and DatasetStore for the on-disk dataset
(frames/, manifest.txt, split lists, experiment.conf, attention/).

Scene text format, one record per line, reals written with full precision:
    frame <frame_id> <seed>
    vehicle <x> <y> <z> <yaw>
    infra <index> <x> <y> <z> <yaw>
    object <id> <class> <x> <y> <z> <w> <l> <h> <yaw> <running> <occlusion> \
        <occlusion level> <range level> <count sensor 0> ... <count sensor N>
    oracle_best <index | -1>

Object boxes are in world coordinates; clouds are stored per sensor in that
sensor's frame as sensor_<k>.bin (k = 0 vehicle, k = i + 1 infrastructure i).
"""

import configparser
import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from config.constants import (
    DETECTED_CLASSES, DIFFICULTY, PATHS, ObjectClass, OcclusionLevel, RangeLevel
)
from models.geometry import Box3D, PointCloud, Pose
from utils.errors import DatasetError, ValidationError
from utils.logging import get_logger


def _fmt(value: float) -> str:
    return repr(float(value))


# ============= Objects and Labels =============

@dataclass(frozen=True)
class DifficultyTag:
    """Occlusion class and range class of one ground-truth object."""
    occlusion: OcclusionLevel
    range: RangeLevel

    @classmethod
    def classify(cls, occlusion_fraction: float, distance: float) -> 'DifficultyTag':
        """
        easy below 0.33 occlusion, hard above 0.67, moderate in between
        (both bounds inclusive); near up to and including 20 m.
        """
        if occlusion_fraction < DIFFICULTY['EASY_MAX_OCCLUSION']:
            occlusion = OcclusionLevel.EASY
        elif occlusion_fraction <= DIFFICULTY['MODERATE_MAX_OCCLUSION']:
            occlusion = OcclusionLevel.MODERATE
        else:
            occlusion = OcclusionLevel.HARD
        near = distance <= DIFFICULTY['NEAR_RANGE']
        return cls(occlusion, RangeLevel.NEAR if near else RangeLevel.FAR)


@dataclass(frozen=True)
class SceneObject:
    """Placed object; box in world coordinates."""
    object_id: int
    box: Box3D
    object_class: ObjectClass
    running: bool = False


@dataclass(frozen=True)
class Detection:
    """Detector output in the vehicle frame."""
    box: Box3D
    object_class: ObjectClass
    score: float
    direction: float = 0.5
    object_id: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"detection score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    """Evaluated ground truth in the vehicle frame."""
    object_id: int
    box: Box3D
    object_class: ObjectClass
    tag: DifficultyTag
    occlusion: float = 0.0


# ============= Frame =============

@dataclass
class SceneFrame:
    """
    One simulation tick.

    Attributes:
        frame_id: Index within the dataset
        seed: Frame seed (derive_seed(master, frame_id))
        vehicle_pose: Vehicle sensor pose in world coordinates
        infra_poses: Infrastructure sensor poses in world coordinates
        objects: Placed objects
        clouds: One cloud per sensor, vehicle first, each in its sensor frame
        visible_counts: (objects, sensors) visible point counts
        occlusion: Per-object occlusion fraction seen from the vehicle
        tags: Per-object difficulty tags
        oracle_best: Label for attention training, None when N = 0
    """
    frame_id: int
    seed: int
    vehicle_pose: Pose
    infra_poses: List[Pose]
    objects: List[SceneObject]
    clouds: List[PointCloud]
    visible_counts: np.ndarray
    occlusion: np.ndarray
    tags: List[DifficultyTag]
    oracle_best: Optional[int] = None

    def __post_init__(self):
        self.visible_counts = np.asarray(self.visible_counts, dtype=np.int64).reshape(
            len(self.objects), self.sensor_count
        )
        self.occlusion = np.asarray(self.occlusion, dtype=np.float64).reshape(len(self.objects))
        if len(self.clouds) != self.sensor_count:
            raise DatasetError(
                f"frame {self.frame_id}: {len(self.clouds)} clouds for {self.sensor_count} sensors"
            )
        if len(self.tags) != len(self.objects):
            raise DatasetError(f"frame {self.frame_id}: {len(self.tags)} tags for {len(self.objects)} objects")

    @property
    def num_infrastructures(self) -> int:
        return len(self.infra_poses)

    @property
    def sensor_count(self) -> int:
        return 1 + len(self.infra_poses)

    @property
    def sensor_poses(self) -> List[Pose]:
        return [self.vehicle_pose] + list(self.infra_poses)

    def union_counts(self, sensors: Iterable[int]) -> np.ndarray:
        """Per-object visible points summed over the given sensor indices."""
        sensors = sorted(set(sensors))
        if not sensors:
            return np.zeros(len(self.objects), dtype=np.int64)
        return self.visible_counts[:, sensors].sum(axis=1)

    def to_vehicle_frame(self, box: Box3D) -> Box3D:
        offset = self.vehicle_pose.xyz
        return Box3D(tuple(np.asarray(box.center) - offset), box.size, box.yaw)

    def ground_truth(self, grid=None) -> List[GroundTruth]:
        """
        Detectable objects (car, truck) in the vehicle frame.

        With a grid, objects whose center lies outside the detection
        rectangle are left out.
        """
        truths = []
        for index, obj in enumerate(self.objects):
            if obj.object_class not in DETECTED_CLASSES:
                continue
            box = self.to_vehicle_frame(obj.box)
            if grid is not None and not _in_rectangle(box, grid):
                continue
            truths.append(GroundTruth(obj.object_id, box, obj.object_class,
                                      self.tags[index], float(self.occlusion[index])))
        return truths

    # ========== Text Format ==========

    def to_text(self) -> str:
        lines = [f"frame {self.frame_id} {self.seed}"]
        lines.append("vehicle " + " ".join(_fmt(v) for v in self.vehicle_pose.as_array()))
        for index, pose in enumerate(self.infra_poses):
            lines.append(f"infra {index} " + " ".join(_fmt(v) for v in pose.as_array()))
        for index, obj in enumerate(self.objects):
            fields = [
                'object', str(obj.object_id), obj.object_class.value,
                *(_fmt(v) for v in obj.box.as_array()),
                '1' if obj.running else '0',
                _fmt(self.occlusion[index]),
                self.tags[index].occlusion.value, self.tags[index].range.value,
                *(str(int(c)) for c in self.visible_counts[index]),
            ]
            lines.append(' '.join(fields))
        lines.append(f"oracle_best {-1 if self.oracle_best is None else self.oracle_best}")
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str, clouds: Sequence[PointCloud]) -> 'SceneFrame':
        frame_id = seed = None
        vehicle = None
        infra: Dict[int, Pose] = {}
        objects, occlusion, tags, counts = [], [], [], []
        oracle_best = None

        for number, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            try:
                record = parts[0]
                if record == 'frame':
                    frame_id, seed = int(parts[1]), int(parts[2])
                elif record == 'vehicle':
                    vehicle = _pose(parts[1:5])
                elif record == 'infra':
                    infra[int(parts[1])] = _pose(parts[2:6])
                elif record == 'object':
                    box = Box3D.from_array([float(v) for v in parts[3:10]])
                    objects.append(SceneObject(int(parts[1]), box, ObjectClass(parts[2]), parts[10] == '1'))
                    occlusion.append(float(parts[11]))
                    tags.append(DifficultyTag(OcclusionLevel(parts[12]), RangeLevel(parts[13])))
                    counts.append([int(c) for c in parts[14:]])
                elif record == 'oracle_best':
                    label = int(parts[1])
                    oracle_best = None if label < 0 else label
                else:
                    raise ValueError(f"unknown record {record!r}")
            except (IndexError, ValueError) as e:
                raise DatasetError(f"scene line {number}: {e}") from e

        if frame_id is None or vehicle is None:
            raise DatasetError("scene text lacks frame or vehicle record")
        infra_poses = [infra[i] for i in sorted(infra)]
        if sorted(infra) != list(range(len(infra))):
            raise DatasetError(f"infrastructure indices must be 0..N-1, got {sorted(infra)}")
        sensors = 1 + len(infra_poses)
        if any(len(row) != sensors for row in counts):
            raise DatasetError(f"object records must carry {sensors} visible counts")

        return cls(
            frame_id=frame_id, seed=seed, vehicle_pose=vehicle, infra_poses=infra_poses,
            objects=objects, clouds=list(clouds),
            visible_counts=np.array(counts, dtype=np.int64).reshape(len(objects), sensors),
            occlusion=np.array(occlusion), tags=tags, oracle_best=oracle_best,
        )


def _pose(values: Sequence[str]) -> Pose:
    x, y, z, yaw = (float(v) for v in values)
    return Pose((x, y, z), yaw)


def _in_rectangle(box: Box3D, grid) -> bool:
    x, y = box.center[0], box.center[1]
    return grid.x_range[0] <= x < grid.x_range[1] and grid.y_range[0] <= y < grid.y_range[1]


# ============= Dataset Store =============

@dataclass
class DatasetManifest:
    """Contents of manifest.txt."""
    scenario: str
    master_seed: int
    infrastructures: int
    frame_seeds: Dict[int, int] = field(default_factory=dict)
    frame_digests: Dict[int, str] = field(default_factory=dict)
    splits: Dict[str, List[int]] = field(default_factory=dict)
    config_digest: str = ''

    @property
    def frame_count(self) -> int:
        return len(self.frame_seeds)

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser['dataset'] = {
            'scenario': self.scenario,
            'master_seed': str(self.master_seed),
            'frames': str(self.frame_count),
            'infrastructures': str(self.infrastructures),
            'config_digest': self.config_digest,
        }
        parser['frames'] = {
            str(frame_id): f"{self.frame_seeds[frame_id]} {self.frame_digests.get(frame_id, '')}".strip()
            for frame_id in sorted(self.frame_seeds)
        }
        parser['splits'] = {name: ' '.join(str(i) for i in ids) for name, ids in self.splits.items()}
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    @classmethod
    def from_text(cls, text: str) -> 'DatasetManifest':
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
            section = parser['dataset']
            manifest = cls(
                scenario=section['scenario'],
                master_seed=int(section['master_seed']),
                infrastructures=int(section['infrastructures']),
                config_digest=section.get('config_digest', ''),
            )
            for key, value in parser['frames'].items():
                parts = value.split()
                manifest.frame_seeds[int(key)] = int(parts[0])
                if len(parts) > 1:
                    manifest.frame_digests[int(key)] = parts[1]
            if parser.has_section('splits'):
                for name, value in parser['splits'].items():
                    manifest.splits[name] = [int(i) for i in value.split()]
        except (configparser.Error, KeyError, ValueError, IndexError) as e:
            raise DatasetError(f"malformed manifest: {e}") from e
        return manifest


class DatasetStore:
    """
    Dataset directory access.

    Layout:
        <root>/manifest.txt
        <root>/experiment.conf
        <root>/{train,val,test}.txt
        <root>/frames/<frame_id:06d>/scene.txt
        <root>/frames/<frame_id:06d>/sensor_<k>.bin
        <root>/attention/
    """

    def __init__(self, root: Union[str, Path], logger: Optional[logging.Logger] = None):
        self.root = Path(root)
        self.logger = logger or get_logger(__name__)

    @property
    def manifest_path(self) -> Path:
        return self.root / PATHS['MANIFEST']

    @property
    def experiment_path(self) -> Path:
        return self.root / PATHS['EXPERIMENT_FILE']

    @property
    def attention_dir(self) -> Path:
        return self.root / PATHS['ATTENTION_DIR']

    def frame_dir(self, frame_id: int) -> Path:
        return self.root / PATHS['FRAMES_DIR'] / PATHS['FRAME_DIR'].format(frame_id=frame_id)

    def exists(self) -> bool:
        return self.manifest_path.exists()

    # ========== Frames ==========

    def write_frame(self, frame: SceneFrame) -> str:
        """Write scene text and clouds; returns the frame digest."""
        directory = self.frame_dir(frame.frame_id)
        directory.mkdir(parents=True, exist_ok=True)
        digest = hashlib.sha256()

        scene_text = frame.to_text().encode('utf-8')
        (directory / PATHS['SCENE_FILE']).write_bytes(scene_text)
        digest.update(scene_text)
        for index, cloud in enumerate(frame.clouds):
            data = cloud.to_bytes()
            (directory / PATHS['CLOUD_FILE'].format(index=index)).write_bytes(data)
            digest.update(data)
        return digest.hexdigest()

    def read_frame(self, frame_id: int) -> SceneFrame:
        directory = self.frame_dir(frame_id)
        scene_path = directory / PATHS['SCENE_FILE']
        if not scene_path.exists():
            raise DatasetError(f"frame {frame_id} missing: {scene_path}")

        text = scene_path.read_text(encoding='utf-8')
        sensors = 1 + sum(1 for line in text.splitlines() if line.startswith('infra '))
        clouds = []
        for index in range(sensors):
            cloud_path = directory / PATHS['CLOUD_FILE'].format(index=index)
            if not cloud_path.exists():
                raise DatasetError(f"frame {frame_id} missing cloud {cloud_path.name}")
            try:
                clouds.append(PointCloud.read_bin(cloud_path))
            except ValueError as e:
                raise DatasetError(f"frame {frame_id}: {e}") from e
        return SceneFrame.from_text(text, clouds)

    # ========== Manifest and Splits ==========

    def write_manifest(self, manifest: DatasetManifest) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(manifest.to_text(), encoding='utf-8')
        for name, ids in manifest.splits.items():
            split_path = self.root / PATHS['SPLIT_FILE'].format(split=name)
            split_path.write_text(''.join(f"{i}\n" for i in ids), encoding='utf-8')
        self.logger.info(f"Wrote manifest for {manifest.frame_count} frames to {self.root}")

    def read_manifest(self) -> DatasetManifest:
        if not self.manifest_path.exists():
            raise DatasetError(f"no dataset manifest at {self.manifest_path}")
        return DatasetManifest.from_text(self.manifest_path.read_text(encoding='utf-8'))

    def split(self, name: str) -> List[int]:
        manifest = self.read_manifest()
        if name == 'all':
            return sorted(manifest.frame_seeds)
        if name not in manifest.splits:
            raise DatasetError(f"dataset has no split {name!r}; available: {', '.join(manifest.splits)}")
        return list(manifest.splits[name])

    def manifest_digest(self) -> str:
        return hashlib.sha256(self.manifest_path.read_bytes()).hexdigest()

"""
Scene Generator

Seeded synthetic scenes: object placement inside spawn zones, a BEV ray
sweep per sensor with vertical sampling on every hit, per-object visible
point counts, difficulty tags, the oracle detector and the oracle-best
infrastructure label.

Seeds:
    frame f of a dataset    derive_seed(master, f)
    placement of a frame    derive_seed(frame seed, 0)
    sensor k of a frame     derive_seed(frame seed, k + 1), k = 0 vehicle
    detector noise          derive_seed(frame seed, DETECTOR_STREAM, object id)
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.constants import DETECTED_CLASSES, SCENE_DEFAULTS, ObjectClass
from config.experiment import ExperimentConfig, ScenarioSettings
from config.settings import Config
from models.geometry import Box3D, PointCloud, Pose, bev_intersection_area, transform_cloud
from models.scene import DifficultyTag, Detection, SceneFrame, SceneObject
from services.pillars import PillarGrid
from utils.common import derive_seed
from utils.decorators import log_execution_time
from utils.errors import SceneGenerationError, ValidationError
from utils.logging import get_logger

logger = get_logger(__name__)

DETECTOR_STREAM = 0xD37EC7

_MIN_DIRECTION = 1e-15

_CLASS_SIZES = {
    ObjectClass.CAR: SCENE_DEFAULTS['CAR_SIZE'],
    ObjectClass.TRUCK: SCENE_DEFAULTS['TRUCK_SIZE'],
    ObjectClass.PEDESTRIAN: SCENE_DEFAULTS['PEDESTRIAN_SIZE'],
}


# ============= Frames of Reference =============

def world_to_sensor(cloud: PointCloud, vehicle_pose: Pose, infra_pose: Optional[Pose] = None) -> PointCloud:
    """
    World cloud into the vehicle frame, or into an infrastructure frame
    when infra_pose is given.
    """
    shifted = cloud.with_xyz(cloud.xyz - vehicle_pose.xyz)
    if infra_pose is None:
        return shifted
    return transform_cloud(shifted, infra_pose, vehicle_pose, inverse=True)


def sensor_to_world(cloud: PointCloud, vehicle_pose: Pose, infra_pose: Optional[Pose] = None) -> PointCloud:
    """Inverse of world_to_sensor."""
    if infra_pose is not None:
        cloud = transform_cloud(cloud, infra_pose, vehicle_pose)
    return cloud.with_xyz(cloud.xyz + vehicle_pose.xyz)


# ============= Lidar =============

@dataclass
class LidarSweep:
    """
    One sensor's sweep.

    Attributes:
        cloud: Returns in world coordinates
        point_counts: Visible points per object
        ray_hits: Rays whose nearest hit is the object
        ray_reach: Rays that would hit the object with every other object removed
    """
    cloud: PointCloud
    point_counts: np.ndarray
    ray_hits: np.ndarray
    ray_reach: np.ndarray

    def occlusion(self) -> np.ndarray:
        """1 - visible rays / reachable rays; 1 for objects no ray reaches."""
        fraction = np.ones(len(self.ray_reach), dtype=np.float64)
        reached = self.ray_reach > 0
        fraction[reached] = 1.0 - self.ray_hits[reached] / self.ray_reach[reached]
        return fraction


def _ray_distances(
    origin: np.ndarray,
    directions: np.ndarray,
    objects: Sequence[SceneObject],
    max_range: float
) -> np.ndarray:
    """(rays, objects) entry distance of every ray into every box; inf on a miss."""
    centers = np.array([obj.box.center[:2] for obj in objects])
    yaws = np.array([obj.box.yaw for obj in objects])
    half = 0.5 * np.array([(obj.box.length, obj.box.width) for obj in objects])

    c, s = np.cos(yaws), np.sin(yaws)
    rel = origin - centers
    local_origin = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=1)
    dx, dy = directions[:, :1], directions[:, 1:]
    local_dir = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=2)
    local_dir = np.where(np.abs(local_dir) < _MIN_DIRECTION, _MIN_DIRECTION, local_dir)

    t1 = (-half - local_origin) / local_dir
    t2 = (half - local_origin) / local_dir
    t_near = np.minimum(t1, t2).max(axis=2)
    t_far = np.maximum(t1, t2).min(axis=2)

    hit = (t_near <= t_far) & (t_near > 0.0) & (t_near <= max_range)
    return np.where(hit, t_near, np.inf)


def _vertical_samples(box: Box3D, step: float) -> np.ndarray:
    bottom = box.center[2] - 0.5 * box.height
    return bottom + np.arange(0.5 * step, box.height, step)


def simulate_lidar(
    scene: Union[SceneFrame, Sequence[SceneObject]],
    sensor_pose: Pose,
    angular_resolution: float,
    seed: int,
    max_range: float = 100.0,
    vertical_step: float = 0.25
) -> LidarSweep:
    """
    Sweep rays around a sensor in the x-y plane.

    Ray k leaves at sensor yaw + k * resolution. Each ray stops at the
    nearest box it enters; the hit yields one point per vertical sample
    of that box's height, at the hit's x-y. Reflectance is uniform in
    [0, 1) from a generator seeded with `seed`.

    Args:
        scene: A frame or a list of objects (world coordinates)
        sensor_pose: Sensor pose in world coordinates
        angular_resolution: Degrees between rays
        seed: Reflectance seed
        max_range: Farthest hit distance in meters
        vertical_step: Spacing of vertical samples in meters

    Returns:
        LidarSweep with the cloud in world coordinates
    """
    if angular_resolution <= 0:
        raise ValidationError(f"angular resolution must be > 0, got {angular_resolution}")
    objects = list(getattr(scene, 'objects', scene))
    count = len(objects)
    if count == 0:
        empty = np.zeros(0, dtype=np.int64)
        return LidarSweep(PointCloud(), empty, empty.copy(), empty.copy())

    rays = int(round(360.0 / angular_resolution))
    angles = sensor_pose.yaw + np.arange(rays) * math.radians(angular_resolution)
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    origin = sensor_pose.xyz[:2]

    distances = _ray_distances(origin, directions, objects, max_range)
    reach = np.isfinite(distances).sum(axis=0)
    nearest = np.argmin(distances, axis=1)
    hit_rays = np.flatnonzero(np.isfinite(distances[np.arange(rays), nearest]))
    hit_objects = nearest[hit_rays]
    ray_hits = np.bincount(hit_objects, minlength=count)

    samples = [_vertical_samples(obj.box, vertical_step) for obj in objects]
    per_ray = np.array([len(samples[j]) for j in hit_objects], dtype=np.int64)
    point_counts = ray_hits * np.array([len(z) for z in samples], dtype=np.int64)

    rng = np.random.default_rng(seed)
    if len(hit_rays) == 0 or per_ray.sum() == 0:
        return LidarSweep(PointCloud(), point_counts, ray_hits, reach)

    hit_xy = origin + distances[hit_rays, hit_objects][:, None] * directions[hit_rays]
    xy = np.repeat(hit_xy, per_ray, axis=0)
    z = np.concatenate([samples[j] for j in hit_objects])
    reflectance = rng.uniform(0.0, 1.0, size=len(z))
    cloud = PointCloud(np.column_stack([xy, z, reflectance]))
    return LidarSweep(cloud, point_counts, ray_hits, reach)


# ============= Difficulty =============

def _classify_objects(objects: Sequence[SceneObject], occlusion: np.ndarray, vehicle_pose: Pose) -> List[DifficultyTag]:
    tags = []
    for obj, fraction in zip(objects, occlusion):
        distance = float(np.hypot(*(np.asarray(obj.box.center[:2]) - vehicle_pose.xyz[:2])))
        tags.append(DifficultyTag.classify(float(fraction), distance))
    return tags


def tag_difficulty(frame: SceneFrame) -> List[DifficultyTag]:
    """
    Tag every object from its occlusion seen by the vehicle sensor and its
    BEV distance to the vehicle (20 m counts as near).
    """
    return _classify_objects(frame.objects, frame.occlusion, frame.vehicle_pose)


# ============= Oracle =============

def _in_grid(frame: SceneFrame, obj: SceneObject, grid: Optional[PillarGrid]) -> bool:
    if grid is None:
        return True
    x, y, _ = frame.to_vehicle_frame(obj.box).center
    return grid.x_range[0] <= x < grid.x_range[1] and grid.y_range[0] <= y < grid.y_range[1]


def _perturb(box: Box3D, rng: np.random.Generator, scale: float) -> Box3D:
    center = np.asarray(box.center) + rng.normal(0.0, scale, 3)
    size = np.asarray(box.size) * np.clip(1.0 + rng.normal(0.0, scale, 3), 0.5, 1.5)
    return Box3D(tuple(center), tuple(size), box.yaw + rng.normal(0.0, scale))


def oracle_detect(
    frame: SceneFrame,
    sensors: Iterable[int],
    threshold: int,
    noise_scale: float = 0.0,
    kappa: float = 10.0,
    grid: Optional[PillarGrid] = None
) -> List[Detection]:
    """
    Detect every car and truck seen by at least `threshold` points in total
    over the participating sensors.

    Boxes are ground truth in the vehicle frame, perturbed by Gaussian
    noise of `noise_scale` (center in meters, relative size, yaw in
    radians); the noise of an object does not depend on which sensors
    took part. Scores saturate as c / (c + kappa).

    Args:
        frame: Scene frame
        sensors: Sensor indices (0 vehicle, i + 1 infrastructure i)
        threshold: Minimum union point count
        noise_scale: Box noise standard deviation
        kappa: Score half-saturation count
        grid: Optional detection rectangle

    Returns:
        Detections in object order
    """
    if threshold < 1:
        raise ValidationError(f"detection threshold must be >= 1, got {threshold}")
    counts = frame.union_counts(sensors)
    detections = []
    for index, obj in enumerate(frame.objects):
        if obj.object_class not in DETECTED_CLASSES or counts[index] < threshold:
            continue
        if not _in_grid(frame, obj, grid):
            continue
        box = frame.to_vehicle_frame(obj.box)
        if noise_scale > 0:
            rng = np.random.default_rng(derive_seed(frame.seed, DETECTOR_STREAM, obj.object_id))
            box = _perturb(box, rng, noise_scale)
        count = float(counts[index])
        detections.append(Detection(
            box=box,
            object_class=obj.object_class,
            score=count / (count + kappa),
            direction=1.0 if box.yaw > 0 else 0.0,
            object_id=obj.object_id,
        ))
    return detections


def oracle_best_infrastructure(frame: SceneFrame, threshold: int, grid: Optional[PillarGrid] = None) -> int:
    """
    Infrastructure adding the most points on cars and trucks the vehicle
    sees with fewer than `threshold` points; lowest index on ties.
    """
    if frame.num_infrastructures == 0:
        raise ValidationError(f"frame {frame.frame_id} has no infrastructure to choose from")
    candidates = [
        index for index, obj in enumerate(frame.objects)
        if obj.object_class in DETECTED_CLASSES
        and frame.visible_counts[index, 0] < threshold
        and _in_grid(frame, obj, grid)
    ]
    if not candidates:
        return 0
    gains = frame.visible_counts[candidates, 1:].sum(axis=0)
    return int(np.argmax(gains))


# ============= Placement =============

def draw_object_classes(
    rng: np.random.Generator,
    vehicles: int,
    pedestrians: int,
    car_probability: float
) -> List[ObjectClass]:
    """Vehicles first, each a car with car_probability, else a truck."""
    draws = rng.random(vehicles)
    classes = [ObjectClass.CAR if d < car_probability else ObjectClass.TRUCK for d in draws]
    return classes + [ObjectClass.PEDESTRIAN] * pedestrians


def _world_bounds(zones: np.ndarray) -> Tuple[float, float, float, float]:
    return zones[:, 0].min(), zones[:, 1].max(), zones[:, 2].min(), zones[:, 3].max()


def _overlaps(box: Box3D, placed: Sequence[Box3D]) -> bool:
    return any(bev_intersection_area(box, other) > 1e-9 for other in placed)


def place_objects(
    settings: ScenarioSettings,
    rng: np.random.Generator,
    sensor_xy: np.ndarray,
    log: Optional[logging.Logger] = None
) -> List[SceneObject]:
    """
    Place the frame's objects without BEV overlap.

    Each object draws a spawn zone by weight, then a uniform position and
    heading inside it. A candidate is rejected when its footprint leaves
    the world bounds, overlaps a placed object or comes within the
    clearance margin of a sensor.

    Raises:
        SceneGenerationError: When an object finds no place within the retry budget
    """
    log = log or logger
    vehicles = int(rng.integers(settings.min_vehicles, settings.max_vehicles + 1))
    pedestrians = int(rng.integers(settings.min_pedestrians, settings.max_pedestrians + 1))
    classes = draw_object_classes(rng, vehicles, pedestrians, settings.car_probability)
    if not classes:
        return []

    zones = np.asarray(settings.spawn_zones, dtype=np.float64)
    weights = zones[:, 4] / zones[:, 4].sum()
    x_min, x_max, y_min, y_max = _world_bounds(zones)

    objects: List[SceneObject] = []
    for object_id, object_class in enumerate(classes):
        jitter = 1.0 + rng.uniform(-settings.size_jitter, settings.size_jitter, 3)
        size = tuple(np.asarray(_CLASS_SIZES[object_class]) * jitter)
        running = object_class is ObjectClass.PEDESTRIAN and rng.random() < settings.running_probability

        for attempt in range(settings.placement_retries):
            zone = zones[rng.choice(len(zones), p=weights)]
            x = rng.uniform(zone[0], zone[1])
            y = rng.uniform(zone[2], zone[3])
            yaw = rng.uniform(-math.pi, math.pi)
            box = Box3D((x, y, 0.5 * size[2]), size, yaw)

            corners = box.bev_corners()
            if (corners[:, 0].min() < x_min or corners[:, 0].max() > x_max
                    or corners[:, 1].min() < y_min or corners[:, 1].max() > y_max):
                continue
            if box.contains_bev(sensor_xy, margin=settings.sensor_clearance).any():
                continue
            if _overlaps(box, [o.box for o in objects]):
                continue

            if attempt:
                log.debug(f"Placed object {object_id} after {attempt} retries")
            objects.append(SceneObject(object_id, box, object_class, running))
            break
        else:
            raise SceneGenerationError(
                f"could not place object {object_id} ({object_class.value}) "
                f"in {settings.placement_retries} attempts; lower the object counts or widen the spawn zones"
            )
    return objects


# ============= Generator =============

class SceneGenerator:
    """
    Generates the frames of one experiment.

    Frames are independent: frame f depends only on the configuration and
    derive_seed(master, f), so they are produced in parallel and returned
    in frame order.
    """

    def __init__(self, config: ExperimentConfig, logger: Optional[logging.Logger] = None,
                 workers: Optional[int] = None):
        self.config = config
        self.logger = logger or get_logger(__name__)
        self.workers = workers or Config.COOPDET_THREADS
        g = config.grid
        self.grid = PillarGrid(g.x_range, g.y_range, g.z_range, g.pillar_size)
        self.threshold = config.detection.threshold

    def sensor_poses(self) -> Tuple[Pose, List[Pose]]:
        s = self.config.scenario
        x, y, yaw = s.vehicle
        vehicle = Pose((x, y, s.vehicle_height), math.radians(yaw))
        infra = [Pose((ix, iy, s.infra_height), math.radians(iyaw)) for ix, iy, iyaw in s.infrastructures]
        return vehicle, infra

    def generate_frame(self, frame_id: int, frame_seed: int) -> SceneFrame:
        vehicle_pose, infra_poses = self.sensor_poses()
        poses = [vehicle_pose] + infra_poses
        sensor_xy = np.array([p.xyz[:2] for p in poses])

        rng = np.random.default_rng(derive_seed(frame_seed, 0))
        objects = place_objects(self.config.scenario, rng, sensor_xy, self.logger)

        lidar = self.config.lidar
        sweeps = [
            simulate_lidar(objects, pose, lidar.angular_resolution, derive_seed(frame_seed, k + 1),
                           lidar.max_range, lidar.vertical_step)
            for k, pose in enumerate(poses)
        ]
        counts = np.stack([sweep.point_counts for sweep in sweeps], axis=1) if objects else \
            np.zeros((0, len(poses)), dtype=np.int64)
        occlusion = sweeps[0].occlusion()
        clouds = [world_to_sensor(sweeps[0].cloud, vehicle_pose)]
        clouds += [world_to_sensor(sweep.cloud, vehicle_pose, pose) for sweep, pose in zip(sweeps[1:], infra_poses)]

        frame = SceneFrame(
            frame_id=frame_id,
            seed=frame_seed,
            vehicle_pose=vehicle_pose,
            infra_poses=infra_poses,
            objects=objects,
            clouds=clouds,
            visible_counts=counts,
            occlusion=occlusion,
            tags=_classify_objects(objects, occlusion, vehicle_pose),
        )
        if infra_poses:
            frame.oracle_best = oracle_best_infrastructure(frame, self.threshold, self.grid)
        self.logger.debug(
            f"Frame {frame_id}: {len(objects)} objects, {sum(len(c) for c in clouds)} points, "
            f"oracle best {frame.oracle_best}"
        )
        return frame

    @log_execution_time()
    def generate(self, seed: int, frames: Optional[int] = None) -> List[SceneFrame]:
        """Frames 0..frames-1 under the master seed."""
        count = self.config.scenario.frames if frames is None else frames
        if count < 0:
            raise ValidationError(f"frame count must be >= 0, got {count}")
        ids = list(range(count))
        seeds = [derive_seed(seed, f) for f in ids]
        self.logger.info(f"Generating {count} {self.config.scenario.name} frames with {self.workers} workers")
        if self.workers <= 1 or count <= 1:
            return [self.generate_frame(f, s) for f, s in zip(ids, seeds)]
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix='scenegen') as pool:
            return list(pool.map(self.generate_frame, ids, seeds))


def generate_scene(config: ExperimentConfig, seed: int) -> List[SceneFrame]:
    """Generate config.scenario.frames frames under the master seed."""
    return SceneGenerator(config).generate(seed)

"""Shared fixtures for the CoopDet test suite."""

import math

import numpy as np
import pytest

from config.experiment import ExperimentConfig
from models.geometry import PointCloud, Pose
from models.scene import SceneFrame
from models.tensors import PseudoImage
from services.netsim import FrameImages, LinkModel

ROUNDABOUT_VEHICLE = Pose((0.0, -20.0, 1.73), math.pi / 2)
ROUNDABOUT_INFRA = [
    Pose((0.0, 18.0, 2.0), -math.pi / 2),
    Pose((-15.6, -9.0, 2.0), math.radians(30)),
    Pose((15.6, -9.0, 2.0), math.radians(150)),
]


def empty_frame(num_infrastructures: int, frame_id: int = 0) -> SceneFrame:
    """Frame without objects or points; enough for message-level tests."""
    infra = ROUNDABOUT_INFRA[:num_infrastructures]
    sensors = 1 + num_infrastructures
    return SceneFrame(
        frame_id=frame_id, seed=frame_id, vehicle_pose=ROUNDABOUT_VEHICLE, infra_poses=infra,
        objects=[], clouds=[PointCloud() for _ in range(sensors)],
        visible_counts=np.zeros((0, sensors)), occlusion=np.zeros(0), tags=[],
    )


def random_images(num_infrastructures: int, shape=(4, 8, 8), seed: int = 0) -> FrameImages:
    rng = np.random.default_rng(seed)
    return FrameImages(
        PseudoImage(rng.uniform(0, 1, shape)),
        [PseudoImage(rng.uniform(0, 1, shape)) for _ in range(num_infrastructures)],
    )


@pytest.fixture
def frame_factory():
    return empty_frame


@pytest.fixture
def images_factory():
    return random_images


@pytest.fixture
def fast_link():
    return LinkModel(capacity=12.5e6, latency=0.002)


@pytest.fixture
def small_experiment():
    """Short roundabout experiment on a coarse grid so scenes generate quickly."""
    experiment = ExperimentConfig.preset('roundabout')
    experiment.scenario.frames = 10
    experiment.scenario.min_vehicles = 6
    experiment.scenario.max_vehicles = 10
    experiment.scenario.max_pedestrians = 2
    experiment.lidar.angular_resolution = 1.0
    experiment.lidar.vertical_step = 0.5
    experiment.grid.channels = 8
    experiment.grid.omega = 16
    experiment.attention.query_size = 4
    experiment.attention.key_size = 16
    experiment.attention.epochs = 20
    experiment.validate()
    return experiment

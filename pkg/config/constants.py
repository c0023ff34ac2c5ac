"""
Application Constants

This module contains immutable constants used throughout the simulator.
These are not configuration values but fixed protocol, unit and model
constants; experiment files may override the *_DEFAULTS groups.
"""

from enum import Enum, IntEnum


# ============= Object Classes =============
class ObjectClass(Enum):
    """Object classes present in generated scenes."""
    CAR = "car"
    TRUCK = "truck"
    PEDESTRIAN = "pedestrian"


# Classes the detector reports and the evaluation scores
DETECTED_CLASSES = (ObjectClass.CAR, ObjectClass.TRUCK)


# ============= Wire Message Kinds =============
class MessageKind(IntEnum):
    """Message kinds of the vehicle/infrastructure handshake."""
    QUERY_BROADCAST = 1
    SCORE_REPLY = 2
    FEATURE_REQUEST = 3
    FEATURE_PAYLOAD = 4


# ============= Communication Policies =============
class PolicyName(Enum):
    """Names accepted by --policies and experiment files."""
    LOC_VEHICLE = "LocVehicle"
    RAND_SELECT = "RandSelect"
    COMB_ALL = "CombAll"
    LEARN2COM = "Learn2com"


# ============= Difficulty Levels =============
class OcclusionLevel(Enum):
    """Occlusion classes of a ground-truth object."""
    EASY = "easy"
    MODERATE = "moderate"
    HARD = "hard"


class RangeLevel(Enum):
    """Range classes of a ground-truth object."""
    NEAR = "near"
    FAR = "far"


# ============= Wire Format =============
WIRE = {
    'MAGIC': b'CP3D',
    'VERSION': 1,
    # magic, version, kind, frame id, sender id, payload length
    'HEADER_FORMAT': '<4sBBIHI',
    'HEADER_SIZE': 16,
    'REAL_SIZE': 4,
    'POSE_REALS': 4,
    'FEATURE_DIMS_SIZE': 12,
    'VEHICLE_SENDER_ID': 0,
}


# ============= Units =============
UNITS = {
    'KB': 1024,
    'MB': 1024 * 1024,
}


# ============= Pillar Grid Defaults =============
GRID_DEFAULTS = {
    'X_RANGE': (-40.32, 40.32),
    'Y_RANGE': (-35.84, 35.84),
    'Z_RANGE': (-3.0, 1.0),
    'PILLAR_SIZE': (0.56, 0.56, 4.0),
    'OMEGA': 100,
    'CHANNELS': 64,
    'AUGMENTED_DIM': 9,
    'DIVISIBILITY_TOLERANCE': 1e-6,
}


# ============= Attention Defaults =============
ATTENTION_DEFAULTS = {
    'QUERY_SIZE': 16,
    'KEY_SIZE': 128,
    'LEARNING_RATE': 0.1,
    'EPOCHS': 200,
    'INIT_SCALE': 0.01,
    'MAX_STEP_HALVINGS': 30,
}


# ============= Anchors =============
# width, length, height, z center
ANCHOR_SPECS = {
    ObjectClass.CAR: {'size': (1.6, 3.9, 1.56), 'z_center': -1.78},
    ObjectClass.TRUCK: {'size': (1.9, 4.9, 2.05), 'z_center': -1.5},
}

ANCHOR_ORIENTATIONS = (0.0, 90.0)  # degrees


# ============= Anchor Matching / Evaluation Thresholds =============
MATCHING = {
    'POSITIVE_IOU': 0.6,
    'NEGATIVE_IOU': 0.45,
    'EVAL_IOU': 0.7,
}


# ============= Loss Defaults =============
LOSS_DEFAULTS = {
    'FOCAL_ETA': 0.25,
    'FOCAL_GAMMA': 2.0,
    'BETA_CLS': 1.0,
    'BETA_LOC': 2.0,
    'BETA_DIR': 0.2,
}


# ============= Difficulty Thresholds =============
DIFFICULTY = {
    'EASY_MAX_OCCLUSION': 0.33,
    'MODERATE_MAX_OCCLUSION': 0.67,
    'NEAR_RANGE': 20.0,
}


# ============= Scene Generation =============
SCENE_DEFAULTS = {
    'MAX_OBJECTS': 60,
    'MAX_VEHICLES': 50,
    'MAX_PEDESTRIANS': 10,
    'CAR_PROBABILITY': 0.8,
    'RUNNING_PROBABILITY': 0.8,
    'VEHICLE_SENSOR_HEIGHT': 1.73,
    'INFRA_SENSOR_HEIGHT': 2.0,
    'PEDESTRIAN_SIZE': (0.6, 0.8, 1.73),
    'TRUCK_SIZE': (1.9, 4.9, 2.05),
    'CAR_SIZE': (1.6, 3.9, 1.56),
    'SIZE_JITTER': 0.1,
    'PLACEMENT_RETRIES': 200,
    'SENSOR_CLEARANCE': 2.0,
}


# ============= Dataset Splits =============
SPLIT_RATIOS = {
    'train': 6,
    'val': 2,
    'test': 2,
}


# ============= Exit Codes =============
EXIT_CODES = {
    'SUCCESS': 0,
    'USAGE_ERROR': 1,
    'DATA_ERROR': 2,
}


# ============= File Names =============
PATHS = {
    'MANIFEST': 'manifest.txt',
    'FRAMES_DIR': 'frames',
    'FRAME_DIR': '{frame_id:06d}',
    'EXPERIMENT_FILE': 'experiment.conf',
    'SPLIT_FILE': '{split}.txt',
    'SCENE_FILE': 'scene.txt',
    'CLOUD_FILE': 'sensor_{index}.bin',
    'ATTENTION_DIR': 'attention',
    'LOSS_CURVE': 'loss_curve.csv',
    'DETECTION_REPORT': 'detection_ap.csv',
    'MAP_REPORT': 'map.csv',
    'BANDWIDTH_REPORT': 'bandwidth.csv',
    'PLOT_DATA': 'plot_data.csv',
    'LEDGER_REPORT': 'ledger.csv',
    'ABLATION_REPORT': 'ablation.csv',
    'TRACE_FILE': 'trace_{policy}.bin',
}

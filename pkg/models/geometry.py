"""
Geometry

Poses, coordinate transforms between sensor frames and the vehicle frame,
and oriented-box geometry including rotated IoU.

Conventions:
    - Yaw is counter-clockwise positive about +z, yaw 0 along +x.
    - A box's length l lies along its heading, width w across it.
    - Pitch and roll are zero everywhere.
    - The vehicle frame shares world axes, translated to C_v. An
      infrastructure frame is whatever maps onto the vehicle frame by the
      literal transform C_jv = R C_ji + C_i - C_v (R from rotation_matrix);
      scenegen builds its clouds in exactly these frames.
"""

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from models.pointcloud import LidarPoint, PointCloud
from utils.errors import GeometryError

__all__ = [
    'LidarPoint', 'PointCloud', 'Pose', 'Box3D', 'normalize_yaw',
    'rotation_matrix', 'transform_point_to_vehicle',
    'transform_point_to_infrastructure', 'transform_cloud',
    'bev_iou', 'iou_3d', 'bev_iou_matrix', 'polygon_area', 'clip_polygon',
]


def normalize_yaw(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(float(angle), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def _vector3(values: Sequence[float], name: str) -> Tuple[float, float, float]:
    if len(values) != 3:
        raise GeometryError(f"{name} must have 3 components, got {len(values)}")
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class Pose:
    """Sensor pose: position C in meters and yaw alpha in radians."""
    position: Tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'position', _vector3(self.position, 'position'))
        object.__setattr__(self, 'yaw', normalize_yaw(self.yaw))

    @property
    def xyz(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)

    def as_array(self) -> np.ndarray:
        """(x, y, z, yaw) as carried by QueryBroadcast."""
        return np.array([*self.position, self.yaw], dtype=np.float64)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (x, y, z), size (w, l, h) and yaw theta."""
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'center', _vector3(self.center, 'center'))
        size = _vector3(self.size, 'size')
        if not all(math.isfinite(s) and s > 0 for s in size):
            raise GeometryError(f"box sizes must be > 0, got {size}")
        object.__setattr__(self, 'size', size)
        object.__setattr__(self, 'yaw', normalize_yaw(self.yaw))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'Box3D':
        """Build from (x, y, z, w, l, h, yaw)."""
        x, y, z, w, l, h, yaw = (float(v) for v in values)
        return cls((x, y, z), (w, l, h), yaw)

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.size[0]

    @property
    def length(self) -> float:
        return self.size[1]

    @property
    def height(self) -> float:
        return self.size[2]

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    @property
    def bev_area(self) -> float:
        return self.size[0] * self.size[1]

    @property
    def bev_radius(self) -> float:
        """Radius of the circle circumscribing the footprint."""
        return 0.5 * math.hypot(self.size[0], self.size[1])

    @property
    def z_bounds(self) -> Tuple[float, float]:
        half = 0.5 * self.size[2]
        return self.center[2] - half, self.center[2] + half

    def bev_corners(self) -> np.ndarray:
        """Footprint corners (4, 2), counter-clockwise, front-left first."""
        w, l = self.size[0], self.size[1]
        local = np.array([
            [0.5 * l, 0.5 * w],
            [-0.5 * l, 0.5 * w],
            [-0.5 * l, -0.5 * w],
            [0.5 * l, -0.5 * w],
        ])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])

    def corners(self) -> np.ndarray:
        """All 8 corners (8, 3): bottom ring then top ring, same order."""
        footprint = self.bev_corners()
        z_low, z_high = self.z_bounds
        bottom = np.column_stack([footprint, np.full(4, z_low)])
        top = np.column_stack([footprint, np.full(4, z_high)])
        return np.vstack([bottom, top])

    @classmethod
    def from_corners(cls, corners: np.ndarray) -> 'Box3D':
        """Inverse of corners()."""
        corners = np.asarray(corners, dtype=np.float64)
        if corners.shape != (8, 3):
            raise GeometryError(f"expected (8, 3) corners, got {corners.shape}")
        center = corners.mean(axis=0)
        heading = corners[0, :2] - corners[1, :2]
        across = corners[1, :2] - corners[2, :2]
        height = corners[4, 2] - corners[0, 2]
        yaw = math.atan2(heading[1], heading[0])
        return cls(
            tuple(center),
            (float(np.hypot(*across)), float(np.hypot(*heading)), float(height)),
            yaw,
        )

    def to_local_bev(self, points_xy: np.ndarray) -> np.ndarray:
        """Express x-y points in the box frame (length along +x)."""
        offset = np.asarray(points_xy, dtype=np.float64) - np.asarray(self.center[:2])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return offset @ np.array([[c, -s], [s, c]])

    def contains_bev(self, points_xy: np.ndarray, margin: float = 0.0) -> np.ndarray:
        local = self.to_local_bev(points_xy)
        return (
            (np.abs(local[:, 0]) <= 0.5 * self.size[1] + margin)
            & (np.abs(local[:, 1]) <= 0.5 * self.size[0] + margin)
        )


# ============= Coordinate Transforms =============

def rotation_matrix(yaw_v: float, yaw_i: float) -> np.ndarray:
    """
    Rotation between an infrastructure frame and the vehicle frame.

    Args:
        yaw_v: Vehicle yaw alpha_v
        yaw_i: Infrastructure yaw alpha_i

    Returns:
        3x3 matrix [[cos d, -sin d, 0], [sin d, cos d, 0], [0, 0, 1]],
        d = alpha_v - alpha_i
    """
    delta = yaw_v - yaw_i
    c, s = math.cos(delta), math.sin(delta)
    return np.array([
        [c, -s, 0.0],
        [s, c, 0.0],
        [0.0, 0.0, 1.0],
    ])


def transform_point_to_vehicle(
    point: Sequence[float],
    infra_pose: Pose,
    vehicle_pose: Pose
) -> np.ndarray:
    """
    Map a point from an infrastructure frame into the vehicle frame.

    Implements C_jv = R C_ji + C_i - C_v literally: the translation offset
    is not rotated.
    """
    rot = rotation_matrix(vehicle_pose.yaw, infra_pose.yaw)
    return rot @ np.asarray(point, dtype=np.float64) + infra_pose.xyz - vehicle_pose.xyz


def transform_point_to_infrastructure(
    point: Sequence[float],
    infra_pose: Pose,
    vehicle_pose: Pose
) -> np.ndarray:
    """Exact inverse of transform_point_to_vehicle."""
    rot = rotation_matrix(vehicle_pose.yaw, infra_pose.yaw)
    shifted = np.asarray(point, dtype=np.float64) - infra_pose.xyz + vehicle_pose.xyz
    return rot.T @ shifted


def transform_cloud(
    cloud: PointCloud,
    infra_pose: Pose,
    vehicle_pose: Pose,
    inverse: bool = False
) -> PointCloud:
    """
    Transform every point of a cloud between infrastructure and vehicle frames.

    Reflectance and point order are preserved.

    Args:
        cloud: Input cloud
        infra_pose: Pose of the infrastructure sensor
        vehicle_pose: Pose of the vehicle sensor
        inverse: Map vehicle -> infrastructure instead

    Returns:
        Transformed cloud
    """
    if len(cloud) == 0:
        return PointCloud()

    rot = rotation_matrix(vehicle_pose.yaw, infra_pose.yaw)
    offset = infra_pose.xyz - vehicle_pose.xyz
    if inverse:
        xyz = (cloud.xyz - offset) @ rot
    else:
        xyz = cloud.xyz @ rot.T + offset
    return cloud.with_xyz(xyz)


# ============= Polygon Helpers =============

def polygon_area(polygon: Sequence[Sequence[float]]) -> float:
    """Shoelace area of a simple polygon (absolute value)."""
    if len(polygon) < 3:
        return 0.0
    pts = np.asarray(polygon, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))


def clip_polygon(subject: Sequence, clip: Sequence) -> List[Tuple[float, float]]:
    """
    Sutherland-Hodgman clipping of a polygon by a convex polygon.

    Both polygons must be counter-clockwise. Returns the vertices of the
    intersection, empty when they do not overlap.
    """
    def inside(p, a, b):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0

    def intersection(s, e, a, b):
        dc = (a[0] - b[0], a[1] - b[1])
        dp = (s[0] - e[0], s[1] - e[1])
        n1 = a[0] * b[1] - a[1] * b[0]
        n2 = s[0] * e[1] - s[1] * e[0]
        denom = dc[0] * dp[1] - dc[1] * dp[0]
        if denom == 0.0:
            return e
        n3 = 1.0 / denom
        return ((n1 * dp[0] - n2 * dc[0]) * n3, (n1 * dp[1] - n2 * dc[1]) * n3)

    output = [tuple(p) for p in subject]
    a = tuple(clip[-1])
    for vertex in clip:
        b = tuple(vertex)
        if not output:
            break
        candidates, output = output, []
        s = candidates[-1]
        for e in candidates:
            if inside(e, a, b):
                if not inside(s, a, b):
                    output.append(intersection(s, e, a, b))
                output.append(e)
            elif inside(s, a, b):
                output.append(intersection(s, e, a, b))
            s = e
        a = b
    return output


# ============= IoU =============

def _check_area(box: Box3D) -> None:
    if not box.bev_area > 0.0 or not box.volume > 0.0:
        raise GeometryError(f"degenerate box {box}")


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Footprint intersection area of two boxes."""
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    if math.hypot(dx, dy) > a.bev_radius + b.bev_radius:
        return 0.0
    overlap = clip_polygon(a.bev_corners().tolist(), b.bev_corners().tolist())
    return polygon_area(overlap)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """
    Bird's-eye-view IoU of two oriented boxes.

    Raises:
        GeometryError: If either box has zero footprint area
    """
    _check_area(a)
    _check_area(b)
    inter = bev_intersection_area(a, b)
    union = a.bev_area + b.bev_area - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """
    Volumetric IoU: footprint intersection times vertical overlap over union.

    Raises:
        GeometryError: If either box is degenerate
    """
    _check_area(a)
    _check_area(b)
    a_low, a_high = a.z_bounds
    b_low, b_high = b.z_bounds
    overlap_z = min(a_high, b_high) - max(a_low, b_low)
    if overlap_z <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * overlap_z
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def bev_iou_matrix(boxes_a: Sequence[Box3D], boxes_b: Sequence[Box3D]) -> np.ndarray:
    """
    Pairwise BEV IoU, shape (len(boxes_a), len(boxes_b)).

    Pairs whose circumscribed circles are disjoint are skipped without
    clipping, which keeps anchor matching over tens of thousands of anchors
    tractable.
    """
    result = np.zeros((len(boxes_a), len(boxes_b)), dtype=np.float64)
    if not len(boxes_a) or not len(boxes_b):
        return result

    centers_a = np.array([box.center[:2] for box in boxes_a])
    centers_b = np.array([box.center[:2] for box in boxes_b])
    radius_a = np.array([box.bev_radius for box in boxes_a])
    radius_b = np.array([box.bev_radius for box in boxes_b])

    distance = np.linalg.norm(centers_a[:, None, :] - centers_b[None, :, :], axis=2)
    candidates = np.argwhere(distance <= radius_a[:, None] + radius_b[None, :])
    for i, j in candidates:
        result[i, j] = bev_iou(boxes_a[i], boxes_b[j])
    return result

"""
Point Cloud Records

LidarPoint and PointCloud, plus the raw binary cloud format: four IEEE-754
32-bit little-endian reals per point (x, y, z, r), no header.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from utils.errors import ShapeError

CLOUD_DTYPE = np.dtype('<f4')


@dataclass(frozen=True)
class LidarPoint:
    """One Lidar return: coordinates in meters and reflectance in [0, 1]."""
    x: float
    y: float
    z: float
    r: float

    def __post_init__(self):
        if not all(np.isfinite((self.x, self.y, self.z))):
            raise ShapeError(f"LidarPoint coordinates must be finite: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.r], dtype=np.float64)


class PointCloud:
    """
    Ordered set of Lidar returns stored as an (N, 4) float64 array.

    Columns are x, y, z, reflectance. The container never reorders points.
    """

    __slots__ = ('_points',)

    def __init__(self, points: Union[np.ndarray, list, None] = None):
        if points is None:
            array = np.zeros((0, 4), dtype=np.float64)
        else:
            array = np.asarray(points, dtype=np.float64)
            if array.size == 0:
                array = np.zeros((0, 4), dtype=np.float64)
        if array.ndim != 2 or array.shape[1] != 4:
            raise ShapeError(f"point cloud must be (N, 4), got {array.shape}")
        if not np.all(np.isfinite(array[:, :3])):
            raise ShapeError("point cloud coordinates must be finite")
        self._points = array

    @classmethod
    def from_points(cls, points) -> 'PointCloud':
        """Build from an iterable of LidarPoint."""
        return cls([p.as_array() for p in points])

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def xyz(self) -> np.ndarray:
        return self._points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self._points[:, 3]

    def __len__(self) -> int:
        return len(self._points)

    def __iter__(self) -> Iterator[LidarPoint]:
        for x, y, z, r in self._points:
            yield LidarPoint(float(x), float(y), float(z), float(r))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self._points, other._points)

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)})"

    def with_xyz(self, xyz: np.ndarray) -> 'PointCloud':
        """Copy with replaced coordinates and the same reflectance."""
        return PointCloud(np.column_stack([xyz, self.reflectance]))

    def concat(self, other: 'PointCloud') -> 'PointCloud':
        return PointCloud(np.vstack([self._points, other._points]))

    # ========== Binary IO ==========

    def to_bytes(self) -> bytes:
        return self._points.astype(CLOUD_DTYPE).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> 'PointCloud':
        if len(data) % (4 * CLOUD_DTYPE.itemsize):
            raise ShapeError(
                f"cloud byte length {len(data)} is not a multiple of 16"
            )
        values = np.frombuffer(data, dtype=CLOUD_DTYPE).astype(np.float64)
        return cls(values.reshape(-1, 4))

    def write_bin(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read_bin(cls, path: Union[str, Path]) -> 'PointCloud':
        return cls.from_bytes(Path(path).read_bytes())

"""
Pillar Feature Encoder

Turns a point cloud into a C x H x W pseudo-image: points are binned into
vertical pillars on an x-y grid, each pillar is sampled or zero-padded to
exactly omega points, every point is augmented to 9 dimensions, a
simplified PointNet (linear, batch norm, ReLU, max) reduces each pillar to
a C-vector and the vectors are scattered back to their grid cells.

Sampling inside a pillar is made independent of input order by sorting
the pillar's points by a content hash before the seeded draw.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config.constants import GRID_DEFAULTS
from models.geometry import LidarPoint, PointCloud
from models.tensors import PseudoImage, read_tensor, write_tensor
from utils.common import content_hash, derive_seed, uniform_stream
from utils.errors import ShapeError, ValidationError
from utils.logging import get_logger

logger = get_logger(__name__)


# ============= Grid =============

@dataclass(frozen=True)
class PillarGrid:
    """
    Detection rectangle, height span and pillar dimensions.

    Rows run along y and columns along x:
        col = floor((x - x_min) / l_x), row = floor((y - y_min) / l_y)
    """
    x_range: Tuple[float, float] = GRID_DEFAULTS['X_RANGE']
    y_range: Tuple[float, float] = GRID_DEFAULTS['Y_RANGE']
    z_range: Tuple[float, float] = GRID_DEFAULTS['Z_RANGE']
    pillar_size: Tuple[float, float, float] = GRID_DEFAULTS['PILLAR_SIZE']

    def __post_init__(self):
        for name in ('x_range', 'y_range', 'z_range'):
            low, high = getattr(self, name)
            if not low < high:
                raise ValidationError(f"{name} must satisfy low < high, got {(low, high)}")
        if not all(s > 0 for s in self.pillar_size):
            raise ValidationError(f"pillar sizes must be > 0, got {self.pillar_size}")

        tolerance = GRID_DEFAULTS['DIVISIBILITY_TOLERANCE']
        for extent, size, axis in ((self.x_extent, self.pillar_size[0], 'x'),
                                   (self.y_extent, self.pillar_size[1], 'y')):
            cells = extent / size
            if abs(cells - round(cells)) > tolerance * max(1.0, cells) or round(cells) < 1:
                raise ValidationError(
                    f"{axis} range {extent:.6f} m is not divisible by pillar size {size} m"
                )

    @property
    def x_extent(self) -> float:
        return self.x_range[1] - self.x_range[0]

    @property
    def y_extent(self) -> float:
        return self.y_range[1] - self.y_range[0]

    @property
    def width(self) -> int:
        """W, number of columns."""
        return int(round(self.x_extent / self.pillar_size[0]))

    @property
    def height(self) -> int:
        """H, number of rows."""
        return int(round(self.y_extent / self.pillar_size[1]))

    def cell_center(self, row: int, col: int) -> Tuple[float, float]:
        return (
            self.x_range[0] + (col + 0.5) * self.pillar_size[0],
            self.y_range[0] + (row + 0.5) * self.pillar_size[1],
        )

    def in_range(self, xyz: np.ndarray) -> np.ndarray:
        """Mask of points inside the detection rectangle and height span."""
        x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
        return (
            (x >= self.x_range[0]) & (x < self.x_range[1])
            & (y >= self.y_range[0]) & (y < self.y_range[1])
            & (z >= self.z_range[0]) & (z <= self.z_range[1])
        )

    def cell_indices(self, xyz: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of in-range points."""
        cols = np.floor((xyz[:, 0] - self.x_range[0]) / self.pillar_size[0]).astype(np.int64)
        rows = np.floor((xyz[:, 1] - self.y_range[0]) / self.pillar_size[1]).astype(np.int64)
        return np.clip(rows, 0, self.height - 1), np.clip(cols, 0, self.width - 1)


@dataclass
class Pillar:
    """One non-empty grid cell: omega augmented rows, padded rows all zero."""
    grid_index: Tuple[int, int]
    points: np.ndarray
    count: int


# ============= Pillarization =============

def augment_point(
    point: Union[LidarPoint, Sequence[float]],
    pillar_mean: Sequence[float],
    pillar_center_xy: Sequence[float]
) -> np.ndarray:
    """
    Augment a point to (x, y, z, r, x_c, y_c, z_c, x_p, y_p).

    The c terms are offsets from the mean of the pillar's real points and
    the p terms offsets from the pillar's x-y center.
    """
    values = point.as_array() if isinstance(point, LidarPoint) else np.asarray(point, dtype=np.float64)
    return augment_points(values.reshape(1, 4), pillar_mean, pillar_center_xy)[0]


def augment_points(
    points: np.ndarray,
    pillar_mean: Sequence[float],
    pillar_center_xy: Sequence[float]
) -> np.ndarray:
    """Vectorized augment_point over an (n, 4) array."""
    points = np.asarray(points, dtype=np.float64)
    mean = np.asarray(pillar_mean, dtype=np.float64)
    center = np.asarray(pillar_center_xy, dtype=np.float64)
    return np.column_stack([
        points,
        points[:, :3] - mean,
        points[:, :2] - center,
    ])


def pillarize(cloud: PointCloud, grid: PillarGrid, omega: int, seed: int) -> List[Pillar]:
    """
    Bin a cloud into pillars of exactly omega augmented rows.

    Points outside the grid or z span are dropped. Cells holding more than
    omega points are sampled without replacement using a generator seeded
    by derive_seed(seed, row, col); the candidates are first ordered by
    content hash so the draw does not depend on input order.

    Args:
        cloud: Input cloud in the vehicle frame
        grid: Pillar grid
        omega: Points per pillar
        seed: Sampling seed

    Returns:
        Pillars in row-major cell order
    """
    if omega < 1:
        raise ValidationError(f"omega must be >= 1, got {omega}")
    if len(cloud) == 0:
        return []

    points = cloud.points[grid.in_range(cloud.xyz)]
    if len(points) == 0:
        return []

    rows, cols = grid.cell_indices(points[:, :3])
    cells = rows * grid.width + cols
    order = np.lexsort((content_hash(points), cells))
    points, cells = points[order], cells[order]

    unique_cells, starts, counts = np.unique(cells, return_index=True, return_counts=True)
    pillars = []
    for cell, start, count in zip(unique_cells, starts, counts):
        row, col = divmod(int(cell), grid.width)
        members = points[start:start + count]
        if count > omega:
            rng = np.random.default_rng(derive_seed(seed, row, col))
            members = members[np.sort(rng.choice(count, size=omega, replace=False))]

        augmented = np.zeros((omega, GRID_DEFAULTS['AUGMENTED_DIM']), dtype=np.float64)
        augmented[:len(members)] = augment_points(
            members, members[:, :3].mean(axis=0), grid.cell_center(row, col)
        )
        pillars.append(Pillar((row, col), augmented, len(members)))

    logger.debug(f"Pillarized {len(points)} in-range points into {len(pillars)} pillars")
    return pillars


# ============= Simplified PointNet =============

@dataclass
class SPointNetWeights:
    """Linear layer plus inference-mode batch norm statistics."""
    linear_weight: np.ndarray
    linear_bias: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray

    def __post_init__(self):
        self.linear_weight = np.asarray(self.linear_weight, dtype=np.float64)
        channels = self.linear_weight.shape[0]
        for name in ('linear_bias', 'bn_scale', 'bn_shift', 'bn_mean', 'bn_var'):
            vector = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if vector.shape != (channels,):
                raise ShapeError(f"{name} must have {channels} entries, got {vector.shape}")
            setattr(self, name, vector)
        if not np.all(self.bn_var > 0):
            raise ValidationError("batch-norm variances must be > 0")

    @property
    def channels(self) -> int:
        return self.linear_weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.linear_weight.shape[1]

    @classmethod
    def seeded(
        cls,
        channels: int = GRID_DEFAULTS['CHANNELS'],
        input_dim: int = GRID_DEFAULTS['AUGMENTED_DIM'],
        seed: int = 0
    ) -> 'SPointNetWeights':
        """
        Weights drawn uniformly from +-1/sqrt(D) by the SplitMix64 stream;
        batch norm fixed to unit scale, zero shift, mean 0, variance 1.
        """
        bound = 1.0 / math.sqrt(input_dim)
        weight = uniform_stream(derive_seed(seed, 0), channels * input_dim, -bound, bound)
        bias = uniform_stream(derive_seed(seed, 1), channels, -bound, bound)
        return cls(
            linear_weight=weight.reshape(channels, input_dim),
            linear_bias=bias,
            bn_scale=np.ones(channels),
            bn_shift=np.zeros(channels),
            bn_mean=np.zeros(channels),
            bn_var=np.ones(channels),
        )

    def save(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_tensor(directory / 'linear_weight.bin', self.linear_weight)
        write_tensor(directory / 'linear_bias.bin', self.linear_bias)
        write_tensor(directory / 'batch_norm.bin', np.vstack([
            self.bn_scale, self.bn_shift, self.bn_mean, self.bn_var
        ]))

    @classmethod
    def load(cls, directory: Union[str, Path]) -> 'SPointNetWeights':
        directory = Path(directory)
        batch_norm = read_tensor(directory / 'batch_norm.bin')
        if batch_norm.shape[0] != 4:
            raise ShapeError(f"batch_norm.bin must have 4 rows, got {batch_norm.shape[0]}")
        return cls(
            linear_weight=read_tensor(directory / 'linear_weight.bin'),
            linear_bias=read_tensor(directory / 'linear_bias.bin'),
            bn_scale=batch_norm[0], bn_shift=batch_norm[1],
            bn_mean=batch_norm[2], bn_var=batch_norm[3],
        )


def spointnet_forward(pillars: Sequence[Pillar], weights: SPointNetWeights) -> np.ndarray:
    """
    Reduce each pillar to a C-vector.

    Linear, batch norm, ReLU per point row, then max over the omega rows.
    Padded rows take part in the max.

    Returns:
        C x Q matrix, one column per pillar
    """
    if not pillars:
        return np.zeros((weights.channels, 0), dtype=np.float64)

    stacked = np.stack([p.points for p in pillars])
    if stacked.shape[2] != weights.input_dim:
        raise ShapeError(
            f"pillar points have dimension {stacked.shape[2]}, weights expect {weights.input_dim}"
        )

    linear = stacked @ weights.linear_weight.T + weights.linear_bias
    normalized = (linear - weights.bn_mean) / np.sqrt(weights.bn_var) * weights.bn_scale + weights.bn_shift
    activated = np.maximum(normalized, 0.0)
    return activated.max(axis=1).T


def scatter(
    features: np.ndarray,
    pillar_indices: Sequence[Tuple[int, int]],
    grid: PillarGrid
) -> PseudoImage:
    """
    Write each feature column to its pillar cell of a zero C x H x W image.

    Raises:
        ShapeError: On a column/index count mismatch, an out-of-grid index
            or a duplicate index
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be C x Q, got shape {features.shape}")
    channels, count = features.shape
    if count != len(pillar_indices):
        raise ShapeError(f"{count} feature columns for {len(pillar_indices)} pillar indices")

    image = np.zeros((channels, grid.height, grid.width), dtype=np.float32)
    if count == 0:
        return PseudoImage(image)

    indices = np.asarray(pillar_indices, dtype=np.int64).reshape(-1, 2)
    rows, cols = indices[:, 0], indices[:, 1]
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= grid.height or cols.max() >= grid.width:
        raise ShapeError(f"pillar index outside the {grid.height} x {grid.width} grid")
    if len(np.unique(rows * grid.width + cols)) != count:
        raise ShapeError("duplicate pillar index in scatter")

    image[:, rows, cols] = features
    return PseudoImage(image)


# ============= Encoder =============

@dataclass
class PillarEncoder:
    """
    Cloud to pseudo-image in one call.

    Examples:
        >>> encoder = PillarEncoder.default(seed=7)
        >>> encoder.encode(PointCloud()).shape
        (64, 128, 144)
    """
    grid: PillarGrid = field(default_factory=PillarGrid)
    omega: int = GRID_DEFAULTS['OMEGA']
    weights: Optional[SPointNetWeights] = None
    sampling_seed: int = 0

    def __post_init__(self):
        if self.weights is None:
            self.weights = SPointNetWeights.seeded(seed=self.sampling_seed)
        if self.weights.input_dim != GRID_DEFAULTS['AUGMENTED_DIM']:
            raise ShapeError(f"S-PointNet input dimension must be 9, got {self.weights.input_dim}")

    @classmethod
    def default(cls, seed: int = 0, channels: int = GRID_DEFAULTS['CHANNELS']) -> 'PillarEncoder':
        return cls(weights=SPointNetWeights.seeded(channels=channels, seed=seed), sampling_seed=seed)

    @property
    def channels(self) -> int:
        return self.weights.channels

    def image_shape(self) -> Tuple[int, int, int]:
        return self.channels, self.grid.height, self.grid.width

    def encode(self, cloud: PointCloud) -> PseudoImage:
        pillars = pillarize(cloud, self.grid, self.omega, self.sampling_seed)
        features = spointnet_forward(pillars, self.weights)
        return scatter(features, [p.grid_index for p in pillars], self.grid)

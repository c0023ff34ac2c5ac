"""
Dense Tensors

PseudoImage (C x H x W feature map) and the binary tensor file used for
attention state and model weights: rows and cols as two 32-bit
little-endian unsigned integers, then rows * cols row-major IEEE-754 32-bit
little-endian reals.
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from utils.errors import ShapeError

TENSOR_DTYPE = np.dtype('<f4')
_DIMS = struct.Struct('<II')


class PseudoImage:
    """
    C x H x W feature map stored as float32.

    Cells with no source pillar hold exactly zero.
    """

    __slots__ = ('data',)

    def __init__(self, data: np.ndarray):
        array = np.asarray(data, dtype=np.float32)
        if array.ndim != 3:
            raise ShapeError(f"pseudo-image must be C x H x W, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ShapeError("pseudo-image entries must be finite")
        self.data = array

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> 'PseudoImage':
        return cls(np.zeros((channels, height, width), dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def nbytes(self) -> int:
        """Payload size as carried on the wire (4 bytes per entry)."""
        return int(self.data.size) * TENSOR_DTYPE.itemsize

    def __eq__(self, other) -> bool:
        if not isinstance(other, PseudoImage):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"PseudoImage(C={self.channels}, H={self.height}, W={self.width})"

    def to_bytes(self) -> bytes:
        return self.data.astype(TENSOR_DTYPE).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, channels: int, height: int, width: int) -> 'PseudoImage':
        expected = channels * height * width * TENSOR_DTYPE.itemsize
        if len(data) != expected:
            raise ShapeError(f"expected {expected} bytes for ({channels}, {height}, {width}), got {len(data)}")
        values = np.frombuffer(data, dtype=TENSOR_DTYPE).reshape(channels, height, width)
        return cls(values.astype(np.float32))


# ============= Tensor File =============

def tensor_to_bytes(matrix: np.ndarray) -> bytes:
    """Serialize a 2-D array (1-D arrays are written as one row)."""
    array = np.asarray(matrix, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"tensor files hold 2-D arrays, got shape {array.shape}")
    rows, cols = array.shape
    return _DIMS.pack(rows, cols) + array.astype(TENSOR_DTYPE).tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    """Parse a tensor file body into a float64 (rows, cols) array."""
    if len(data) < _DIMS.size:
        raise ShapeError(f"tensor file too short: {len(data)} bytes")
    rows, cols = _DIMS.unpack_from(data)
    expected = _DIMS.size + rows * cols * TENSOR_DTYPE.itemsize
    if len(data) != expected:
        raise ShapeError(f"tensor file holds {len(data)} bytes, header says {expected}")
    values = np.frombuffer(data, dtype=TENSOR_DTYPE, offset=_DIMS.size)
    return values.astype(np.float64).reshape(rows, cols)


def write_tensor(path: Union[str, Path], matrix: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(matrix))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())

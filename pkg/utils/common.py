"""
Common Utility Functions

Shared helpers: seeded SplitMix64 streams, seed splitting, content hashing
of point records and byte-size formatting.

Seed splitting rule (documented because datasets record master seeds only):
    derive_seed(master, k1, k2, ...) folds each key into a 64-bit state with
    state = mix64((state XOR key) + GAMMA), starting from state = master.
    Frame f of a dataset uses derive_seed(master, f); sensor s of that frame
    uses derive_seed(master, f, s + 1).
"""

import numpy as np

from config.constants import UNITS

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(value: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z = value & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def derive_seed(master: int, *keys: int) -> int:
    """
    Derive a child seed from a master seed and a key path.

    Args:
        master: Master seed
        *keys: Non-negative integer keys (frame index, sensor index, ...)

    Returns:
        64-bit child seed

    Examples:
        >>> derive_seed(7, 0) != derive_seed(7, 1)
        True
    """
    state = master & MASK64
    for key in keys:
        state = mix64(((state ^ (key & MASK64)) + GAMMA) & MASK64)
    return state


def splitmix64_stream(seed: int, count: int) -> np.ndarray:
    """
    Return the first `count` outputs of a SplitMix64 generator.

    Output k is mix64(seed + (k + 1) * GAMMA), computed vectorized.

    Args:
        seed: Generator seed
        count: Number of outputs

    Returns:
        uint64 array of length count
    """
    steps = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over='ignore'):
        state = steps * np.uint64(GAMMA) + np.uint64(seed & MASK64)
        return _mix64_array(state)


def uniform_stream(seed: int, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """
    Uniform reals in [low, high) from the SplitMix64 stream (53-bit mantissa).

    Args:
        seed: Generator seed
        count: Number of values
        low: Lower bound
        high: Upper bound

    Returns:
        float64 array of length count
    """
    raw = splitmix64_stream(seed, count)
    unit = (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return low + (high - low) * unit


def content_hash(records: np.ndarray) -> np.ndarray:
    """
    Hash each row of a float array by its bit pattern.

    Rows with identical values hash identically regardless of their
    position, so ordering by this hash is independent of input order.

    Args:
        records: (N, K) array of reals

    Returns:
        uint64 array of length N
    """
    rows = np.ascontiguousarray(records, dtype=np.float64)
    if rows.ndim != 2:
        rows = rows.reshape(len(rows), -1)
    bits = rows.view(np.uint64)
    state = np.zeros(len(rows), dtype=np.uint64)
    with np.errstate(over='ignore'):
        for column in range(bits.shape[1]):
            state = _mix64_array((state ^ bits[:, column]) + np.uint64(GAMMA))
    return state


def format_kb(size_bytes: int, digits: int = 2) -> str:
    """
    Format a byte count in KB (1024 bytes) as bandwidth tables show it.

    Args:
        size_bytes: Byte count
        digits: Decimal places

    Returns:
        Formatted string without unit (e.g., "4608.06")

    Examples:
        >>> format_kb(4718656)
        '4608.06'
    """
    return f"{size_bytes / UNITS['KB']:.{digits}f}"


"""
Input Validation Functions

Validation helpers for experiment-file values. Each validator returns a
tuple (is_valid, result) where result is the normalized value on success
or an error message on failure, so they plug into validate_input and into
ExperimentConfig.validate.
"""

import math
from typing import Any, Optional, Sequence, Tuple

from config.constants import PolicyName
from utils.errors import ValidationError


def validate_positive(value: Any, allow_zero: bool = False) -> Tuple[bool, Optional[Any]]:
    """
    Validate a strictly positive (or non-negative) finite number.

    Examples:
        >>> validate_positive(0.56)
        (True, 0.56)
        >>> validate_positive(0)
        (False, 'must be > 0, got 0')
    """
    try:
        number = float(value)
    except (TypeError, ValueError):
        return False, f"not a number: {value!r}"

    if not math.isfinite(number):
        return False, f"must be finite, got {value!r}"
    if allow_zero and number < 0:
        return False, f"must be >= 0, got {value!r}"
    if not allow_zero and number <= 0:
        return False, f"must be > 0, got {value!r}"
    return True, value


def validate_count(value: Any, minimum: int = 0) -> Tuple[bool, Optional[Any]]:
    """
    Validate an integer count with a lower bound.

    Examples:
        >>> validate_count(100, minimum=1)
        (True, 100)
    """
    if isinstance(value, bool) or not isinstance(value, (int,)):
        try:
            if float(value) != int(value):
                return False, f"not an integer: {value!r}"
            value = int(value)
        except (TypeError, ValueError):
            return False, f"not an integer: {value!r}"

    if value < minimum:
        return False, f"must be >= {minimum}, got {value}"
    return True, value


def validate_probability(value: Any) -> Tuple[bool, Optional[Any]]:
    """
    Validate a probability in [0, 1].

    Examples:
        >>> validate_probability(0.8)
        (True, 0.8)
    """
    try:
        number = float(value)
    except (TypeError, ValueError):
        return False, f"not a number: {value!r}"

    if not 0.0 <= number <= 1.0:
        return False, f"must be in [0, 1], got {value!r}"
    return True, value


def validate_range(value: Sequence[float]) -> Tuple[bool, Optional[Any]]:
    """
    Validate a (low, high) interval with low < high.

    Examples:
        >>> validate_range((-3.0, 1.0))
        (True, (-3.0, 1.0))
    """
    try:
        low, high = (float(v) for v in value)
    except (TypeError, ValueError):
        return False, f"expected two numbers, got {value!r}"

    if not (math.isfinite(low) and math.isfinite(high)) or low >= high:
        return False, f"expected low < high, got {value!r}"
    return True, (low, high)


def validate_policy_names(names: Sequence[str]) -> Tuple[bool, Optional[Any]]:
    """
    Validate communication policy names.

    Returns:
        (True, list of PolicyName) or (False, message listing valid names)
    """
    valid = {policy.value: policy for policy in PolicyName}
    policies = []
    for name in names:
        if name not in valid:
            return False, (
                f"unknown policy {name!r}; valid names: {', '.join(valid)}"
            )
        policies.append(valid[name])

    if not policies:
        return False, f"no policies given; valid names: {', '.join(valid)}"
    return True, policies


def require(field: str, outcome: Tuple[bool, Optional[Any]]) -> Any:
    """
    Unwrap a validator outcome or raise ValidationError naming the field.

    Examples:
        >>> require('grid.omega', validate_count(100, minimum=1))
        100
    """
    is_valid, result = outcome
    if not is_valid:
        raise ValidationError(f"{field}: {result}")
    return result

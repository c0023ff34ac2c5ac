"""
Reusable Decorators

Timing and argument validation decorators.
"""

import functools
import inspect
import logging
import time
from typing import Callable

from utils.errors import ValidationError


def log_execution_time(
    log_level: str = "INFO",
    include_args: bool = False
):
    """
    Decorator to log function execution time.

    Args:
        log_level: Log level to use (DEBUG, INFO, WARNING, etc.)
        include_args: Whether to include function arguments in log

    Returns:
        Decorated function

    Examples:
        >>> @log_execution_time(log_level="DEBUG")
        ... def generate_frames():
        ...     ...
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            logger = logging.getLogger(func.__module__)
            level = getattr(logging, log_level)
            start_time = time.perf_counter()

            if include_args:
                logger.log(level, f"Starting {func.__name__} with args={args}, kwargs={kwargs}")
            else:
                logger.log(level, f"Starting {func.__name__}")

            try:
                result = func(*args, **kwargs)
            except Exception as e:
                elapsed = time.perf_counter() - start_time
                logger.error(f"Failed {func.__name__} after {elapsed:.2f}s: {str(e)}")
                raise

            elapsed = time.perf_counter() - start_time
            logger.log(level, f"Completed {func.__name__} in {elapsed:.2f}s")
            return result

        return wrapper
    return decorator


def validate_input(**validators):
    """
    Decorator to validate function inputs.

    Args:
        **validators: Mapping of parameter names to validator functions
            returning (is_valid, result)

    Returns:
        Decorated function

    Raises:
        ValidationError: If a validator rejects its argument

    Examples:
        >>> from utils.validators import validate_positive
        >>> @validate_input(lr=validate_positive)
        ... def train(lr: float):
        ...     pass
    """
    def decorator(func: Callable) -> Callable:
        sig = inspect.signature(func)

        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            bound = sig.bind(*args, **kwargs)
            bound.apply_defaults()

            for param_name, validator in validators.items():
                if param_name in bound.arguments:
                    value = bound.arguments[param_name]
                    is_valid, result = validator(value)

                    if not is_valid:
                        raise ValidationError(
                            f"Invalid {param_name} for {func.__name__}: {result}"
                        )

            return func(*bound.args, **bound.kwargs)

        return wrapper
    return decorator

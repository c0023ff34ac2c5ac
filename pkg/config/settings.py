"""
Centralized Configuration for CoopDet

This module contains the runtime settings of the CoopDet simulator.
Settings can be overridden via environment variables.

Experiment parameters (scenario, grid, attention sizes, links, ...) live in
experiment files loaded by config.experiment; this module only holds the
process-wide knobs that do not change the numbers an experiment produces.

Usage:
    from config import Config
    config = Config()
    workers = config.COOPDET_THREADS
"""

import os
from pathlib import Path
from typing import Optional

import psutil

# Base directory of the project
BASE_DIR = Path(__file__).resolve().parent.parent


def detect_worker_count() -> int:
    """
    Work out how many frame workers to run.

    COOPDET_THREADS wins when set; otherwise the physical core count
    reported by psutil, never less than one.
    """
    env_value = os.getenv('COOPDET_THREADS')
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            pass

    cores = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    return max(1, int(cores))


class Config:
    """
    Central configuration class for CoopDet.

    All configuration values have sensible defaults and can be overridden
    via environment variables using the same name.

    Naming Convention:
        - Use UPPER_CASE for configuration constants
        - Prefix with module name for clarity (e.g., LOG_LEVEL, REPORT_FLOAT_FORMAT)
    """

    # ============= Core Paths =============
    OUTPUT_DIR: str = os.getenv('OUTPUT_DIR', 'out')
    PRESET_DIR: str = os.getenv('PRESET_DIR', str(BASE_DIR / 'config' / 'presets'))

    # ============= Logging Configuration =============
    LOG_LEVEL: str = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FORMAT: str = os.getenv('LOG_FORMAT',
        '%(asctime)s - [%(name)s] - %(levelname)s - [%(threadName)s] - %(message)s'
    )
    LOG_DATE_FORMAT: str = '%Y-%m-%d %H:%M:%S'
    LOG_FILE: Optional[str] = os.getenv('LOG_FILE')

    # ============= Parallelism =============
    COOPDET_THREADS: int = detect_worker_count()

    # ============= Reports =============
    REPORT_FLOAT_FORMAT: str = os.getenv('REPORT_FLOAT_FORMAT', '%.6f')

    @classmethod
    def update(cls, key: str, value):
        """
        Update configuration value at runtime.

        Args:
            key: Configuration key to update
            value: New value
        """
        setattr(cls, key, value)


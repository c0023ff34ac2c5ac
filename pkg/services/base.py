"""
Base Service Class

Common foundation for the long-running services of the simulator: an
experiment configuration, a logger and an initialize/shutdown lifecycle.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional

from config.experiment import ExperimentConfig
from config.settings import Config
from utils.logging import setup_logger


class BaseService(ABC):
    """
    Abstract base class for services.

    Attributes:
        experiment: Experiment parameters
        config: Runtime settings
        logger: Service-specific logger
        _initialized: Flag indicating if service is initialized

    Examples:
        >>> class MyService(BaseService):
        ...     def initialize(self):
        ...         self.frames = self.experiment.scenario.frames
    """

    def __init__(
        self,
        experiment: Optional[ExperimentConfig] = None,
        logger: Optional[logging.Logger] = None,
        config: Optional[Config] = None,
        service_name: Optional[str] = None
    ):
        """
        Initialize the base service.

        Args:
            experiment: Experiment parameters (built-in defaults if None)
            logger: Logger instance (creates new if None)
            config: Runtime settings (uses default if None)
            service_name: Service name for logging (uses class name if None)
        """
        self.service_name = service_name or self.__class__.__name__
        self.config = config or Config()
        self.experiment = experiment or ExperimentConfig()

        if logger:
            self.logger = logger
        else:
            self.logger = setup_logger(
                name=f"{__name__}.{self.service_name}",
                log_file=self.config.LOG_FILE,
                level=self.config.LOG_LEVEL
            )

        self._initialized = False
        try:
            self.initialize()
            self._initialized = True
            self.logger.debug(f"{self.service_name} initialized")
        except Exception as e:
            self.logger.error(f"Failed to initialize {self.service_name}: {e}")
            raise

    @abstractmethod
    def initialize(self):
        """Build service-specific components from self.experiment."""
        pass

    def get_status(self) -> Dict[str, Any]:
        return {
            'service': self.service_name,
            'initialized': self._initialized,
            'scenario': self.experiment.scenario.name,
            'config_digest': self.experiment.digest(),
            'workers': self.config.COOPDET_THREADS,
            'log_level': self.config.LOG_LEVEL,
        }

    def shutdown(self):
        self._initialized = False
        self.logger.debug(f"{self.service_name} shutdown complete")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.shutdown()
        return False

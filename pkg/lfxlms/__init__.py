"""Latent FxLMS active noise control simulation toolkit"""

from .errors import (ConfigError, ContainerError, DomainError, InstabilityError, LfxlmsError,
                     NumericError, ShapeError, TrainingError, TuningError, UsageError)

__version__ = "0.1.0"

"""
Exception hierarchy for the Latent FxLMS toolkit.

Every error carries the process exit code the CLI reports for it:
  0 success, 2 config error, 3 numeric failure, 4 tuning failure.
"""

from typing import Optional


class LfxlmsError(Exception):
    """Root of all toolkit errors"""
    exit_code = 1


class ConfigError(LfxlmsError, ValueError):
    """Invalid configuration or violated configuration precondition"""
    exit_code = 2


class DomainError(LfxlmsError, ValueError):
    """Input outside the mathematical domain of an operation"""
    exit_code = 2


class ShapeError(LfxlmsError, ValueError):
    """Length or shape mismatch"""
    exit_code = 2


class UsageError(LfxlmsError, RuntimeError):
    """API used out of order (e.g. gradients without a recorded forward pass)"""


class ContainerError(LfxlmsError, OSError):
    """Malformed binary container or unreadable signal file"""


class NumericError(LfxlmsError, ArithmeticError):
    """Non-finite value encountered; locates where it happened"""
    exit_code = 3

    def __init__(self, message: str, block_index: Optional[int] = None,
                 epoch: Optional[int] = None, batch: Optional[int] = None):
        self.block_index = block_index
        self.epoch = epoch
        self.batch = batch
        where = []
        if block_index is not None:
            where.append(f"block {block_index}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class InstabilityError(NumericError):
    """Adaptive filter diverged (block MSE above 10x the ANC-OFF level)"""


class TrainingError(NumericError):
    """Loss became non-finite during training"""


class TuningError(LfxlmsError):
    """No candidate step size was stable"""
    exit_code = 4

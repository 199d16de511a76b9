"""
Exception Hierarchy for the JointSR Project
Every error raised by the library derives from JointSRError so callers (and the CLI)
can catch one base class and map it to a clean failure.
"""

from typing import Dict, Optional


class JointSRError(Exception):
    """Base exception for all JointSR errors."""
    pass


class ScheduleDomainError(JointSRError, ValueError):
    """Raised when a schedule is evaluated outside t in [0, 1]."""
    pass


class StabilityError(JointSRError, ValueError):
    """Raised when a timestep falls below the numerical stability floor."""
    pass


class OrderingError(JointSRError, ValueError):
    """Raised when a reverse-time step is requested with s >= t."""
    pass


class StepCountError(JointSRError, ValueError):
    """Raised when a sampler, integrator or stratified draw is asked for fewer than one step."""
    pass


class ShapeMismatchError(JointSRError, ValueError):
    """Raised when two image grids that must share a shape do not."""
    pass


class PosteriorContractError(JointSRError, ValueError):
    """Raised when a text posterior violates its normalization contract."""
    pass


class ModelConfigError(JointSRError, ValueError):
    """Raised when a model configuration is invalid or does not match its inputs."""
    pass


class CheckpointError(JointSRError):
    """Raised when a checkpoint archive cannot be read or does not match the config."""
    pass


class ConfigError(JointSRError, ValueError):
    """Raised for unknown keys or uncoercible values in a run configuration."""
    pass


class DatasetError(JointSRError):
    """Raised when synthetic data cannot be generated or read."""
    pass


class DatasetIOError(DatasetError):
    """Raised when a dataset file cannot be written or read."""

    def __init__(self, path: str, message: str = ""):
        self.path = str(path)
        super().__init__(f"I/O failure at {self.path}" + (f": {message}" if message else ""))


class EvaluationError(JointSRError):
    """Raised when an evaluation run cannot proceed."""
    pass


class NonFiniteLossError(JointSRError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, step: int, components: Dict[str, float]):
        self.step = step
        self.components = dict(components)
        detail = ", ".join(f"{name}={value:.6g}" for name, value in self.components.items())
        super().__init__(f"Non-finite loss at step {step} ({detail})")


class NonFiniteOutputError(JointSRError):
    """Raised when the model emits NaN or infinite values during sampling."""

    def __init__(self, step_index: int, which: Optional[str] = None):
        self.step_index = step_index
        self.which = which
        super().__init__(
            f"Non-finite model output at sampler step {step_index}"
            + (f" ({which})" if which else "")
        )

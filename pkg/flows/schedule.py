"""
Noise Schedules for the JointSR Project
Schedules for both diffusion processes and variance-reduced timestep sampling for the text loss.

The absorbing text process keeps a token at time t with probability alpha(t); the
NELBO integrand is weighted by -alpha'(t) / (1 - alpha(t)).
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Union

import torch

from utils.exceptions import ConfigError, ScheduleDomainError, StabilityError, StepCountError

DEFAULT_DELTA = 1e-3

Time = Union[float, torch.Tensor]


def _check_unit_interval(t: Time) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (bool((t < 0).any()) or bool((t > 1).any())):
            raise ScheduleDomainError(
                f"t must lie in [0, 1], got range [{float(t.min())}, {float(t.max())}]"
            )
    elif not 0.0 <= float(t) <= 1.0:
        raise ScheduleDomainError(f"t must lie in [0, 1], got {t}")


class NoiseSchedule(ABC):
    """Keep-probability schedule alpha(t) with alpha(0) = 1 and alpha(1) = 0."""

    name: str = "base"

    @abstractmethod
    def alpha(self, t: Time) -> Time:
        """Probability that a token survives to time t."""

    @abstractmethod
    def alpha_prime(self, t: Time) -> Time:
        """Time derivative of alpha."""

    def __call__(self, t: Time) -> Time:
        return self.alpha(t)


class LogLinearSchedule(NoiseSchedule):
    """
    alpha(t) = 1 - t, alpha'(t) = -1.

    Called log-linear because the implied total noise -log(alpha) is linear in log(1 - t).
    """

    name = "log_linear"

    def alpha(self, t: Time) -> Time:
        _check_unit_interval(t)
        return 1 - t

    def alpha_prime(self, t: Time) -> Time:
        _check_unit_interval(t)
        if isinstance(t, torch.Tensor):
            return -torch.ones_like(t)
        return -1.0


SCHEDULES = {LogLinearSchedule.name: LogLinearSchedule}


def get_schedule(name: str = LogLinearSchedule.name) -> NoiseSchedule:
    """Look up a schedule by name."""
    try:
        return SCHEDULES[name]()
    except KeyError as e:
        raise ConfigError(f"Unknown noise schedule: {name}. Available: {sorted(SCHEDULES)}") from e


def log_linear_alpha(t: float) -> float:
    """
    Evaluate the log-linear keep probability 1 - t.

    Raises:
        ScheduleDomainError: If t is outside [0, 1]
    """
    _check_unit_interval(t)
    return 1.0 - float(t)


def log_linear_alpha_prime(t: float) -> float:
    _check_unit_interval(t)
    return -1.0


def nelbo_weight(schedule: NoiseSchedule, t: Time, delta: float = DEFAULT_DELTA) -> Time:
    """
    NELBO integrand weight -alpha'(t) / (1 - alpha(t)).

    For the log-linear schedule this is 1 / t.

    Args:
        schedule: Noise schedule
        t: Scalar or tensor of timesteps in (0, 1]
        delta: Stability floor; timesteps below it are rejected

    Returns:
        Weight with the same type/shape as t

    Raises:
        StabilityError: If any t < delta (or t <= 0), where the weight is unbounded
    """
    if isinstance(t, torch.Tensor):
        if t.numel() and (bool((t < delta).any()) or bool((t <= 0).any())):
            raise StabilityError(f"Timestep {float(t.min())} below stability floor {delta}")
    elif float(t) < delta or float(t) <= 0.0:
        raise StabilityError(f"Timestep {t} below stability floor {delta}")
    return -schedule.alpha_prime(t) / (1 - schedule.alpha(t))


@dataclass
class TimestepBatch:
    """K stratified timesteps covering (delta, 1]; ``values`` has shape (..., K)."""

    values: torch.Tensor
    delta: float

    @property
    def K(self) -> int:
        return int(self.values.shape[-1])

    def stratum_bounds(self, i: int) -> tuple:
        """Return the [low, high) bounds of stratum i."""
        width = (1.0 - self.delta) / self.K
        return self.delta + width * i, self.delta + width * (i + 1)


def stratified_timesteps(K: int, delta: float = DEFAULT_DELTA, u: Optional[Union[float, torch.Tensor]] = None,
                         generator: Optional[torch.Generator] = None, batch_size: Optional[int] = None,
                         dtype: torch.dtype = torch.float64) -> TimestepBatch:
    """
    Draw K timesteps with one shared uniform offset: t_i = delta + (1 - delta) * (i + u) / K.

    Each value lands in its own stratum of (delta, 1], which keeps the Monte-Carlo
    estimate of the text NELBO low-variance while staying unbiased.

    Args:
        K: Number of strata
        delta: Stability floor
        u: Offset in [0, 1]; drawn from ``generator`` when None. A tensor of shape
            (batch_size,) gives one offset per batch row.
        generator: Source of randomness for u
        batch_size: When given, returns values of shape (batch_size, K) with an
            independent offset per row
        dtype: Floating dtype of the result

    Returns:
        TimestepBatch with values of shape (K,) or (batch_size, K)
    """
    if K < 1:
        raise StepCountError(f"K must be >= 1, got {K}")
    if not 0.0 <= delta < 1.0:
        raise ScheduleDomainError(f"delta must lie in [0, 1), got {delta}")

    shape = (batch_size,) if batch_size is not None else ()
    if u is None:
        device = generator.device if generator is not None else "cpu"
        offsets = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    else:
        offsets = torch.as_tensor(u, dtype=dtype)
        if offsets.dim() == 0 and shape:
            offsets = offsets.expand(shape)
        if bool((offsets < 0).any()) or bool((offsets > 1).any()):
            raise ScheduleDomainError(f"u must lie in [0, 1], got {u}")

    strata = torch.arange(K, dtype=dtype, device=offsets.device)
    values = delta + (1.0 - delta) * (strata + offsets.unsqueeze(-1)) / K
    values = values.clamp(min=delta, max=1.0)
    return TimestepBatch(values=values, delta=delta)

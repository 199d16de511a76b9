"""
Conditional Flow Matching for the JointSR Project
Linear interpolation path, velocity targets, the CFM loss, the model-guided rectified
target, and the Euler ODE step used to integrate from noise (t = 1) to data (t = 0).

Images are (B, C, H, W) tensors. The path runs from data x0 at t = 0 to noise x1 at t = 1.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from flows.schedule import DEFAULT_DELTA
from utils.exceptions import OrderingError, ShapeMismatchError, StepCountError

Time = Union[float, torch.Tensor]


@dataclass
class GuidanceConfig:
    """
    Guidance settings shared by training (model-guided target) and sampling.

    Attributes:
        w: Guidance scale applied to the EMA teacher's conditional/unconditional gap
        psi: Probability of replacing the student's condition with the null condition
        ema_decay: EMA teacher decay per optimizer step
        delta: Stability floor for text timesteps
    """

    w: float = 1.0
    psi: float = 0.1
    ema_decay: float = 0.999
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"guidance scale w must be >= 0, got {self.w}")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must lie in [0, 1], got {self.psi}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")


def _check_same_shape(*grids: torch.Tensor) -> None:
    shapes = {tuple(g.shape) for g in grids}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"Image grids must share a shape, got {sorted(shapes)}")


def _broadcast_time(t: Time, reference: torch.Tensor) -> torch.Tensor:
    """Reshape a scalar or per-item (B,) time so it broadcasts over (B, C, H, W)."""
    t = torch.as_tensor(t, dtype=reference.dtype, device=reference.device)
    if t.dim() == 1 and reference.dim() > 1:
        t = t.view(-1, *([1] * (reference.dim() - 1)))
    return t


def sample_noise(shape: Sequence[int], generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float32, device: Union[str, torch.device] = "cpu") -> torch.Tensor:
    """I.i.d. standard normal noise x1."""
    return torch.randn(tuple(shape), generator=generator, dtype=dtype, device=device)


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: Time) -> torch.Tensor:
    """
    Point on the straight path: (1 - t) * x0 + t * x1.

    Args:
        x0: Data grid
        x1: Noise grid with the same shape
        t: Scalar time or per-item times of shape (B,)

    Raises:
        ShapeMismatchError: If x0 and x1 differ in shape
    """
    _check_same_shape(x0, x1)
    t = _broadcast_time(t, x0)
    return (1 - t) * x0 + t * x1


def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Constant velocity x1 - x0 of the straight path."""
    _check_same_shape(x0, x1)
    return x1 - x0


def cfm_loss(v_pred: torch.Tensor, u_target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and target velocities."""
    _check_same_shape(v_pred, u_target)
    return F.mse_loss(v_pred, u_target)


def rectified_target(u_t: torch.Tensor, v_ema_cond: torch.Tensor, v_ema_uncond: torch.Tensor,
                     w: float) -> torch.Tensor:
    """
    Model-guided target u_t + w * (v_cond - v_uncond).

    Teacher outputs are detached here; callers are still expected to evaluate the
    teacher under ``torch.no_grad``.
    """
    _check_same_shape(u_t, v_ema_cond, v_ema_uncond)
    if w == 0:
        return u_t
    return u_t + w * (v_ema_cond.detach() - v_ema_uncond.detach())


def euler_step(x_t: torch.Tensor, v_hat: torch.Tensor, t: float, s: float) -> torch.Tensor:
    """
    One Euler step of the probability-flow ODE from t down to s < t: x_s = x_t - (t - s) * v_hat.

    Raises:
        OrderingError: If s >= t
        ShapeMismatchError: If x_t and v_hat differ in shape
    """
    if not s < t:
        raise OrderingError(f"euler_step needs s < t, got s={s}, t={t}")
    _check_same_shape(x_t, v_hat)
    return x_t - (t - s) * v_hat


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance v_uncond + w * (v_cond - v_uncond); returns v_cond at w = 1."""
    _check_same_shape(v_cond, v_uncond)
    if w == 1:
        return v_cond
    return v_uncond + w * (v_cond - v_uncond)


def time_grid(steps: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Uniform partition 1 = t_0 > t_1 > ... > t_steps = 0."""
    if steps < 1:
        raise StepCountError(f"steps must be >= 1, got {steps}")
    grid = torch.linspace(1.0, 0.0, steps + 1, dtype=dtype)
    grid[0], grid[-1] = 1.0, 0.0
    return grid


def euler_integrate(velocity_fn: Callable[[torch.Tensor, float], torch.Tensor], x_start: torch.Tensor,
                    steps: int) -> torch.Tensor:
    """
    Image-only flow sampler: integrate dx/dt = v from t = 1 to t = 0 on a uniform grid.

    Args:
        velocity_fn: Maps (x_t, t) to the velocity
        x_start: Noise at t = 1
        steps: Number of Euler steps

    Returns:
        Sample at t = 0
    """
    grid = time_grid(steps).tolist()
    x = x_start
    for t, s in zip(grid[:-1], grid[1:]):
        x = euler_step(x, velocity_fn(x, t), t, s)
    return x

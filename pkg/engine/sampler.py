"""
Joint Sampler for the JointSR Project
Synchronized inference: an Euler step of the image ODE and a reverse unmasking step of
the text chain per time interval, both driven by one model forward.
"""

import logging
import os
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import torch

from flows.imageflow import cfg_combine, euler_step, sample_noise, time_grid
from flows.schedule import LogLinearSchedule, NoiseSchedule
from flows.textdiff import TextPosterior, reverse_text_step
from utils.exceptions import ModelConfigError, NonFiniteOutputError, OrderingError, StepCountError
from utils.image_io import save_image
from utils.seeding import resolve_generator

TIME_TOL = 1e-12

logger = logging.getLogger(__name__)


@dataclass
class SampleConfig:
    """
    Sampling settings (sample.* keys).

    Attributes:
        steps: Number of synchronized steps over [1, 0]
        cfg_scale: Image-velocity guidance scale; 1.0 means a single conditional forward
        use_ema: Sample with the EMA weights of a checkpoint
    """

    steps: int = 4
    cfg_scale: float = 1.0
    use_ema: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"sample.steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"sample.cfg_scale must be >= 0, got {self.cfg_scale}")


@dataclass
class SamplerState:
    """
    Joint inference state at time t.

    Attributes:
        x_img: (B, C, H, W) image interpolant
        x_txt: (B, L) partially masked tokens
        t: Current time
        text_logits: Logits of the forward that produced this state (None at init)
    """

    x_img: torch.Tensor
    x_txt: torch.Tensor
    t: float
    text_logits: Optional[torch.Tensor] = None

    def masked_fraction(self, mask_id: int) -> float:
        return float((self.x_txt == mask_id).to(torch.float64).mean())


StepCallback = Callable[[int, SamplerState], None]


def init_state(lr: torch.Tensor, L: int, mask_id: int, hr_size: Tuple[int, int],
               generator: Optional[torch.Generator] = None, seed: Optional[int] = None) -> SamplerState:
    """
    Pure-noise image and all-MASK text at t = 1.

    Args:
        lr: (B, C, h, w) LR condition; fixes batch size, channels, dtype and device
        L: Text length
        mask_id: MASK id
        hr_size: (H, W) of the generated image
        generator: Source of noise; built from ``seed`` when None
        seed: Seed used when no generator is passed
    """
    generator = resolve_generator(generator, seed)
    batch_size, channels = lr.shape[0], lr.shape[1]
    x_img = sample_noise((batch_size, channels, *hr_size), generator=generator, dtype=lr.dtype, device=lr.device)
    x_txt = torch.full((batch_size, L), mask_id, dtype=torch.long, device=lr.device)
    return SamplerState(x_img=x_img, x_txt=x_txt, t=1.0)


def _check_finite(tensor: torch.Tensor, step_index: int, which: str) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteOutputError(step_index, which)


def joint_step(state: SamplerState, model, lr: torch.Tensor, t: float, s: float, cfg: SampleConfig,
               generator: Optional[torch.Generator] = None, schedule: Optional[NoiseSchedule] = None,
               step_index: int = 0) -> SamplerState:
    """
    Advance the joint state from t to s < t.

    One conditional forward gives the velocity and the text logits. With
    ``cfg.cfg_scale != 1`` a second, unconditional forward is combined into the
    velocity; the text branch is never guided.

    Raises:
        OrderingError: If s >= t or the state is not at time t
        NonFiniteOutputError: If the model emits NaN/Inf
    """
    if not s < t:
        raise OrderingError(f"joint_step needs s < t, got s={s}, t={t}")
    if abs(state.t - t) > TIME_TOL:
        raise OrderingError(f"State is at t={state.t}, step starts at t={t}")
    schedule = schedule or LogLinearSchedule()
    mask_id = model.config.mask_id

    out = model(state.x_img, t, state.x_txt, t, cond_lr=lr)
    velocity = out.velocity
    if cfg.cfg_scale != 1:
        null_text = torch.full_like(state.x_txt, mask_id)
        v_uncond = model(state.x_img, t, null_text, 1.0, cond_lr=None).velocity
        velocity = cfg_combine(velocity, v_uncond, cfg.cfg_scale)
    _check_finite(velocity, step_index, "velocity")
    _check_finite(out.text_logits, step_index, "text_logits")

    x_img = euler_step(state.x_img, velocity, t, s)
    posterior = TextPosterior.from_logits(out.text_logits)
    x_txt = reverse_text_step(state.x_txt, posterior, t, s, schedule, mask_id, generator=generator)
    return SamplerState(x_img=x_img, x_txt=x_txt, t=s, text_logits=out.text_logits)


def finalize_text(state: SamplerState, mask_id: int) -> torch.Tensor:
    """Reveal any position still MASK with the argmax of the last posterior."""
    remaining = state.x_txt == mask_id
    if not bool(remaining.any()) or state.text_logits is None:
        return state.x_txt
    argmax = state.text_logits.argmax(dim=-1).to(state.x_txt.dtype)
    return torch.where(remaining, argmax, state.x_txt)


@torch.no_grad()
def sample(model, lr: torch.Tensor, steps: int, cfg: Optional[SampleConfig] = None, seed: Optional[int] = None,
           generator: Optional[torch.Generator] = None, callback: Optional[StepCallback] = None,
           schedule: Optional[NoiseSchedule] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Run the joint sampler over the uniform partition 1 = t_0 > ... > t_steps = 0.

    Args:
        model: Denoiser with a ``config`` (seq_len, mask_id, image_size)
        lr: (B, C, h, w) LR condition
        steps: Number of steps (>= 1)
        cfg: Sampling settings; ``cfg.steps`` is ignored in favour of ``steps``
        seed: Seed when no generator is passed
        generator: Source of randomness for noise and token draws
        callback: Called with (k, state) for k = 0 (init) .. steps
        schedule: Text noise schedule

    Returns:
        (image clamped to [-1, 1], tokens without MASK)
    """
    if steps < 1:
        raise StepCountError(f"steps must be >= 1, got {steps}")
    cfg = cfg or SampleConfig(steps=steps)
    config = model.config
    if lr.dim() != 4:
        raise ModelConfigError(f"LR condition must be (B, C, h, w), got {tuple(lr.shape)}")
    if hasattr(model, "eval"):
        model.eval()

    generator = resolve_generator(generator, seed)
    state = init_state(lr, config.seq_len, config.mask_id, tuple(config.image_size), generator=generator)
    if callback is not None:
        callback(0, state)

    grid = time_grid(steps).tolist()
    for k, (t, s) in enumerate(zip(grid[:-1], grid[1:]), start=1):
        state = joint_step(state, model, lr, t, s, cfg, generator=generator, schedule=schedule, step_index=k)
        if k == steps:
            state.x_txt = finalize_text(state, config.mask_id)
        if callback is not None:
            callback(k, state)

    return state.x_img.clamp(-1.0, 1.0), state.x_txt


class TrajectoryRecorder:
    """
    Step callback writing one PNG and one decoded token line per sampler step
    for the first batch item.
    """

    def __init__(self, output_dir: str, decode: Callable[[List[int]], str]):
        self.output_dir = output_dir
        self.decode = decode
        self.lines: List[str] = []
        self.image_paths: List[str] = []
        os.makedirs(output_dir, exist_ok=True)

    def __call__(self, step_index: int, state: SamplerState) -> None:
        path = os.path.join(self.output_dir, f"step_{step_index:03d}.png")
        save_image(path, state.x_img[0].clamp(-1.0, 1.0))
        self.image_paths.append(path)
        self.lines.append(f"{step_index}\t{state.t:.6f}\t{self.decode(state.x_txt[0].tolist())}")

    def write_tokens(self, filename: str = "trajectory.txt") -> str:
        path = os.path.join(self.output_dir, filename)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.lines) + "\n")
        logger.info(f"Trajectory written: {len(self.image_paths)} frames in {self.output_dir}")
        return path

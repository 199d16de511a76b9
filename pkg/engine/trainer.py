"""
Joint Trainer for the JointSR Project
The three training objectives (guided image flow, text NELBO, guided joint corruption),
one optimization step with EMA teacher update, and the checkpointing training loop.
"""

import copy
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from flows.imageflow import GuidanceConfig, cfm_loss, interpolate, rectified_target, sample_noise, velocity_target
from flows.schedule import DEFAULT_DELTA, LogLinearSchedule, NoiseSchedule, stratified_timesteps
from flows.textdiff import TextPosterior, forward_mask, masked_cross_entropy, text_nelbo_loss
from models.checkpoint import load_checkpoint, save_checkpoint
from models.mmformer import ModelConfig, build_model
from utils.exceptions import DatasetError, NonFiniteLossError
from utils.logger import MetricsWriter, timed
from utils.seeding import make_generator, substream_seed

CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.pt"
METRICS_FILE = "metrics.jsonl"


@dataclass
class TrainConfig:
    """Optimization hyperparameters (train.* keys)."""

    batch_size: int = 32
    steps: int = 20000
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_steps: int = 500
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 1000
    device: str = "cpu"

    def __post_init__(self):
        for name in ("batch_size", "steps", "log_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"train.lr must be > 0, got {self.lr}")
        if self.warmup_steps < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("train.warmup_steps and train.weight_decay must be >= 0, train.grad_clip > 0")


@dataclass
class TextConfig:
    """Text-loss settings (text.* keys); K stratified timesteps per sequence."""

    K: int = 8

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"text.K must be >= 1, got {self.K}")


@dataclass
class TrainTriple:
    """
    A batch of (HR image, LR image, clean text).

    Attributes:
        hr: (B, C, H, W) in [-1, 1]
        lr: (B, C, H / scale, W / scale) in [-1, 1]
        text: (B, L) long ids without MASK
    """

    hr: torch.Tensor
    lr: torch.Tensor
    text: torch.Tensor

    @property
    def batch_size(self) -> int:
        return int(self.hr.shape[0])

    def validate(self, scale: int, mask_id: int) -> None:
        """
        Raises:
            DatasetError: If sizes disagree with the scale factor or the text contains MASK
        """
        if self.batch_size == 0:
            raise DatasetError("Empty training batch")
        if self.lr.shape[0] != self.batch_size or self.text.shape[0] != self.batch_size:
            raise DatasetError("hr, lr and text must share the batch dimension")
        if tuple(self.hr.shape[2:]) != (self.lr.shape[2] * scale, self.lr.shape[3] * scale):
            raise DatasetError(f"hr {tuple(self.hr.shape)} and lr {tuple(self.lr.shape)} differ by more than x{scale}")
        if bool((self.text == mask_id).any()):
            raise DatasetError("Training text must not contain MASK ids")

    def to(self, device) -> "TrainTriple":
        return TrainTriple(self.hr.to(device), self.lr.to(device), self.text.to(device))


@dataclass
class LossComponents:
    loss_img: float
    loss_txt: float
    loss_joint: float

    @property
    def total(self) -> float:
        return self.loss_img + self.loss_txt + self.loss_joint

    def as_dict(self) -> Dict[str, float]:
        return {"loss_img": self.loss_img, "loss_txt": self.loss_txt,
                "loss_joint": self.loss_joint, "loss_total": self.total}


@dataclass
class TrainState:
    """
    Everything a training step reads and mutates.

    ``ema_model`` is the teacher: same architecture, never receives gradients.
    """

    model: nn.Module
    ema_model: nn.Module
    optimizer: Optional[torch.optim.Optimizer]
    scheduler: Optional[torch.optim.lr_scheduler.LRScheduler]
    generator: Optional[torch.Generator]
    step: int = 0
    schedule: NoiseSchedule = field(default_factory=LogLinearSchedule)
    last_losses: Optional[LossComponents] = None

    @property
    def mask_id(self) -> int:
        return self.model.config.mask_id

    @property
    def params(self) -> Dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    @property
    def ema_params(self) -> Dict[str, torch.Tensor]:
        return dict(self.ema_model.named_parameters())

    @property
    def rng_state(self) -> Optional[torch.Tensor]:
        return self.generator.get_state() if self.generator is not None else None

    @property
    def current_lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"]) if self.optimizer is not None else 0.0


def warmup_cosine(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to 1, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: nn.Module, hyper: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)


def build_scheduler(optimizer: torch.optim.Optimizer, hyper: TrainConfig) -> torch.optim.lr_scheduler.LambdaLR:
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: warmup_cosine(step, hyper.warmup_steps, hyper.steps)
    )


def make_ema(model: nn.Module) -> nn.Module:
    """Frozen deep copy used as the EMA teacher."""
    ema_model = copy.deepcopy(model)
    ema_model.requires_grad_(False)
    return ema_model


@torch.no_grad()
def update_ema(ema_model: nn.Module, model: nn.Module, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * params; buffers are copied."""
    for ema_param, param in zip(ema_model.parameters(), model.parameters()):
        ema_param.mul_(decay).add_(param.detach(), alpha=1.0 - decay)
    for ema_buffer, buffer in zip(ema_model.buffers(), model.buffers()):
        ema_buffer.copy_(buffer)


def init_train_state(model_config: ModelConfig, hyper: TrainConfig, seed: int) -> TrainState:
    """Fresh model (init substream), EMA copy, AdamW, warmup-cosine schedule, train-substream generator."""
    model = build_model(model_config, generator=make_generator(substream_seed(seed, "init")))
    model.to(hyper.device)
    optimizer = build_optimizer(model, hyper)
    return TrainState(
        model=model,
        ema_model=make_ema(model),
        optimizer=optimizer,
        scheduler=build_scheduler(optimizer, hyper),
        generator=make_generator(substream_seed(seed, "train"), device=hyper.device),
    )


def condition_keep(batch_size: int, psi: float, generator: Optional[torch.Generator],
                   device: torch.device) -> torch.Tensor:
    """Per-item bool mask; False (probability psi) means the student sees the null condition."""
    return torch.rand(batch_size, generator=generator, device=device) >= psi


def _null_text(text: torch.Tensor, mask_id: int) -> torch.Tensor:
    return torch.full_like(text, mask_id)


def _drop_text(text: torch.Tensor, t_txt: torch.Tensor, keep: torch.Tensor,
               mask_id: int) -> Tuple[torch.Tensor, torch.Tensor]:
    dropped_text = torch.where(keep.unsqueeze(-1), text, _null_text(text, mask_id))
    dropped_t = torch.where(keep, t_txt, torch.ones_like(t_txt))
    return dropped_text, dropped_t


def _per_item_time(t, batch: TrainTriple, generator: Optional[torch.Generator]) -> torch.Tensor:
    device, dtype = batch.hr.device, batch.hr.dtype
    if t is None:
        return torch.rand(batch.batch_size, generator=generator, device=device, dtype=dtype)
    return torch.as_tensor(t, device=device, dtype=dtype).expand(batch.batch_size).clone()


def _guided_target(state: TrainState, x_t: torch.Tensor, t: torch.Tensor, cond_text: torch.Tensor,
                   cond_t_txt: torch.Tensor, batch: TrainTriple, u: torch.Tensor, w: float) -> torch.Tensor:
    if w == 0:
        return u
    ones = torch.ones_like(t)
    with torch.no_grad():
        v_cond = state.ema_model(x_t, t, cond_text, cond_t_txt, cond_lr=batch.lr).velocity
        v_uncond = state.ema_model(x_t, t, _null_text(cond_text, state.mask_id), ones, cond_lr=None).velocity
    return rectified_target(u, v_cond, v_uncond, w)


def loss_img_mg(state: TrainState, batch: TrainTriple, cfg: GuidanceConfig,
                generator: Optional[torch.Generator] = None, t=None,
                noise: Optional[torch.Tensor] = None, keep: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Model-guided image flow loss conditioned on the LR image and the clean text.

    Args:
        state: Train state (student and EMA teacher)
        batch: Training triple batch
        cfg: Guidance settings (w, psi)
        generator: Source of randomness
        t: Optional forced time (scalar or (B,)); drawn uniformly otherwise
        noise: Optional noise x1 shared with the joint loss
        keep: Optional forced dropout mask

    Returns:
        Scalar MSE between the student velocity and the rectified target
    """
    t = _per_item_time(t, batch, generator)
    if noise is None:
        noise = sample_noise(batch.hr.shape, generator=generator, dtype=batch.hr.dtype, device=batch.hr.device)
    if keep is None:
        keep = condition_keep(batch.batch_size, cfg.psi, generator, batch.hr.device)

    x_t = interpolate(batch.hr, noise, t)
    clean_t_txt = torch.zeros_like(t)
    target = _guided_target(state, x_t, t, batch.text, clean_t_txt, batch, velocity_target(batch.hr, noise), cfg.w)

    student_text, student_t_txt = _drop_text(batch.text, clean_t_txt, keep, state.mask_id)
    v_pred = state.model(x_t, t, student_text, student_t_txt, cond_lr=batch.lr, lr_keep=keep).velocity
    return cfm_loss(v_pred, target)


def loss_txt(state: TrainState, batch: TrainTriple, K: int, delta: float = DEFAULT_DELTA,
             generator: Optional[torch.Generator] = None, u=None) -> torch.Tensor:
    """
    Text NELBO over K stratified timesteps, conditioned on the clean HR and the LR image.

    The HR image enters as a clean interpolant (t_img = 0).
    """
    timesteps = stratified_timesteps(K, delta, u=u, generator=generator, batch_size=batch.batch_size)
    clean_t_img = torch.zeros(batch.batch_size, device=batch.hr.device, dtype=batch.hr.dtype)

    def posterior_fn(x_t: torch.Tensor, t: torch.Tensor) -> TextPosterior:
        logits = state.model(batch.hr, clean_t_img, x_t, t.to(batch.hr.dtype), cond_lr=batch.lr).text_logits
        return TextPosterior.from_logits(logits)

    return text_nelbo_loss(posterior_fn, batch.text, timesteps, state.schedule, state.mask_id, generator=generator)


def joint_loss_terms(state: TrainState, batch: TrainTriple, cfg: GuidanceConfig,
                     generator: Optional[torch.Generator] = None, t=None,
                     noise: Optional[torch.Tensor] = None,
                     keep: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Image and text terms of the joint loss at one shared time per item.

    The text term is the masked-position cross-entropy of the conditional forward
    (LR image + noisy HR); it is 0 for items with nothing masked.
    """
    t = _per_item_time(t, batch, generator)
    if noise is None:
        noise = sample_noise(batch.hr.shape, generator=generator, dtype=batch.hr.dtype, device=batch.hr.device)

    x_t = interpolate(batch.hr, noise, t)
    text_t = forward_mask(batch.text, t.to(torch.float64), state.schedule, state.mask_id, generator=generator)
    if keep is None:
        keep = condition_keep(batch.batch_size, cfg.psi, generator, batch.hr.device)

    target = _guided_target(state, x_t, t, text_t, t, batch, velocity_target(batch.hr, noise), cfg.w)

    student_text, student_t_txt = _drop_text(text_t, t, keep, state.mask_id)
    student_out = state.model(x_t, t, student_text, student_t_txt, cond_lr=batch.lr, lr_keep=keep)
    image_term = cfm_loss(student_out.velocity, target)

    conditional_out = student_out if bool(keep.all()) else state.model(x_t, t, text_t, t, cond_lr=batch.lr)
    log_probs = F.log_softmax(conditional_out.text_logits, dim=-1)
    text_term = masked_cross_entropy(log_probs, batch.text, text_t, state.mask_id).mean()
    return image_term, text_term


def loss_joint_mg(state: TrainState, batch: TrainTriple, cfg: GuidanceConfig,
                  generator: Optional[torch.Generator] = None, t=None,
                  noise: Optional[torch.Tensor] = None, keep: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sum of the guided image term and the text term under one shared corruption time."""
    image_term, text_term = joint_loss_terms(state, batch, cfg, generator=generator, t=t, noise=noise, keep=keep)
    return image_term + text_term


def train_step(state: TrainState, batch: TrainTriple, cfg: GuidanceConfig, hyper: TrainConfig,
               text: Optional[TextConfig] = None) -> TrainState:
    """
    One optimization step on the unweighted sum of the three losses, then an EMA update.

    One noise draw per item is shared by the image and joint losses.

    Raises:
        NonFiniteLossError: If any loss component is NaN or infinite; parameters are left untouched
    """
    text = text or TextConfig()
    generator = state.generator
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)

    noise = sample_noise(batch.hr.shape, generator=generator, dtype=batch.hr.dtype, device=batch.hr.device)
    l_img = loss_img_mg(state, batch, cfg, generator=generator, noise=noise)
    l_txt = loss_txt(state, batch, text.K, cfg.delta, generator=generator)
    l_joint = loss_joint_mg(state, batch, cfg, generator=generator, noise=noise)
    total = l_img + l_txt + l_joint

    components = LossComponents(float(l_img.detach()), float(l_txt.detach()), float(l_joint.detach()))
    if not all(math.isfinite(v) for v in components.as_dict().values()):
        raise NonFiniteLossError(state.step, components.as_dict())

    total.backward()
    nn.utils.clip_grad_norm_(state.model.parameters(), hyper.grad_clip)
    state.optimizer.step()
    if state.scheduler is not None:
        state.scheduler.step()
    update_ema(state.ema_model, state.model, cfg.ema_decay)

    state.step += 1
    state.last_losses = components
    return state


BatchFn = Callable[[int], TrainTriple]


class Trainer:
    """
    Training loop: pulls the batch for each global step, logs per-step metrics,
    and writes periodic and final checkpoints (raw + EMA weights).
    """

    def __init__(self, model_config: ModelConfig, hyper: TrainConfig, guidance: GuidanceConfig,
                 text: TextConfig, batch_fn: BatchFn, output_dir: str, seed: int):
        """
        Args:
            model_config: Network sizing
            hyper: Optimization hyperparameters
            guidance: Guidance settings
            text: Text-loss settings
            batch_fn: Maps a global step index to its batch
            output_dir: Run directory receiving checkpoints/ and metrics.jsonl
            seed: Root seed
        """
        self.model_config = model_config
        self.hyper = hyper
        self.guidance = guidance
        self.text = text
        self.batch_fn = batch_fn
        self.output_dir = output_dir
        self.seed = seed
        self.logger = logging.getLogger(self.__class__.__name__)
        self.state: Optional[TrainState] = None

    @property
    def checkpoint_dir(self) -> str:
        return os.path.join(self.output_dir, CHECKPOINT_DIR)

    def init_state(self, resume: Optional[str] = None) -> TrainState:
        """Build a fresh state, or restore model, EMA, optimizer, scheduler, step and RNG from a checkpoint."""
        state = init_train_state(self.model_config, self.hyper, self.seed)
        if resume:
            checkpoint = load_checkpoint(resume, expected_config=self.model_config, map_location=self.hyper.device)
            state.model.load_state_dict(checkpoint.params)
            state.ema_model.load_state_dict(checkpoint.ema_params or checkpoint.params)
            if checkpoint.optimizer_state is not None:
                state.optimizer.load_state_dict(checkpoint.optimizer_state)
            if checkpoint.scheduler_state is not None:
                state.scheduler.load_state_dict(checkpoint.scheduler_state)
            if checkpoint.rng_state is not None:
                state.generator.set_state(checkpoint.rng_state)
            state.step = checkpoint.step
            self.logger.info(f"Resumed from {resume} at step {state.step}")
        parameter_count = sum(p.numel() for p in state.model.parameters())
        self.logger.info(f"Model parameters: {parameter_count:,}")
        self.state = state
        return state

    def save(self, name: str) -> str:
        state = self.state
        return save_checkpoint(
            os.path.join(self.checkpoint_dir, name), state.model, state.step,
            ema_model=state.ema_model, optimizer=state.optimizer, scheduler=state.scheduler,
            rng_state=state.rng_state, extra={"seed": self.seed},
        )

    def fit(self, resume: Optional[str] = None) -> TrainState:
        """
        Train until ``hyper.steps`` global steps have run.

        Returns:
            Final train state; the final checkpoint is at checkpoints/final.pt
        """
        state = self.init_state(resume)
        metrics_path = os.path.join(self.output_dir, METRICS_FILE)
        remaining = max(0, self.hyper.steps - state.step)

        with timed("training", self.logger), MetricsWriter(metrics_path, append=bool(resume)) as metrics:
            progress = tqdm(total=remaining, initial=0, desc="train", unit="step", dynamic_ncols=True)
            try:
                while state.step < self.hyper.steps:
                    batch = self.batch_fn(state.step).to(self.hyper.device)
                    batch.validate(self.model_config.lr_scale, self.model_config.mask_id)
                    lr = state.current_lr
                    train_step(state, batch, self.guidance, self.hyper, self.text)

                    record = {"step": state.step, **state.last_losses.as_dict(), "lr": lr}
                    metrics.write(record)
                    progress.update(1)
                    if state.step % self.hyper.log_every == 0:
                        progress.set_postfix(loss=f"{state.last_losses.total:.4f}")
                        self.logger.info(
                            f"step {state.step}: total={state.last_losses.total:.4f} "
                            f"img={state.last_losses.loss_img:.4f} txt={state.last_losses.loss_txt:.4f} "
                            f"joint={state.last_losses.loss_joint:.4f} lr={lr:.2e}"
                        )
                    if state.step % self.hyper.checkpoint_every == 0:
                        self.save(f"step_{state.step:07d}.pt")
            except NonFiniteLossError:
                self.logger.error(f"Aborting: non-finite loss at step {state.step}")
                raise
            finally:
                progress.close()

        self.save(FINAL_CHECKPOINT)
        return state

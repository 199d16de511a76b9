"""
Absorbing-State Text Diffusion for the JointSR Project
Forward masking corruption, the masked NELBO loss, and the reverse unmasking transition.

Token sequences are long tensors of shape (..., L) over ids [0, N]; id N is MASK.
Posteriors cover the N real ids only, so the model can never predict MASK.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from flows.schedule import NoiseSchedule, TimestepBatch, Time, nelbo_weight
from utils.exceptions import OrderingError, PosteriorContractError

UNMASK_EPS = 1e-8
NORMALIZATION_TOL = 1e-5
LOG_FLOOR = 1e-30


@dataclass
class TextPosterior:
    """
    Denoising distribution over the N real tokens at every position.

    Build it from probabilities (validated) or from logits (normalized by construction).
    """

    probs: Optional[torch.Tensor] = None
    logits: Optional[torch.Tensor] = None

    def __post_init__(self):
        if (self.probs is None) == (self.logits is None):
            raise PosteriorContractError("TextPosterior needs exactly one of probs or logits")
        if self.probs is not None:
            validate_posterior(self.probs)

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "TextPosterior":
        return cls(logits=logits)

    @property
    def log_probs(self) -> torch.Tensor:
        if self.logits is not None:
            return F.log_softmax(self.logits, dim=-1)
        return torch.log(self.probs.clamp_min(LOG_FLOOR))

    def as_probs(self) -> torch.Tensor:
        if self.probs is not None:
            return self.probs
        return F.softmax(self.logits, dim=-1)

    @property
    def vocab_size(self) -> int:
        source = self.probs if self.probs is not None else self.logits
        return int(source.shape[-1])


def validate_posterior(probs: torch.Tensor, tol: float = NORMALIZATION_TOL) -> None:
    """
    Check that every row is a probability vector.

    Raises:
        PosteriorContractError: On negative entries or rows that do not sum to 1 within tol
    """
    if bool((probs < 0).any()):
        raise PosteriorContractError("Posterior contains negative probabilities")
    row_sums = probs.sum(dim=-1)
    worst = float((row_sums - 1).abs().max()) if row_sums.numel() else 0.0
    if worst > tol:
        raise PosteriorContractError(f"Posterior rows must sum to 1 (max deviation {worst:.3g})")


def _as_column(t: Time, reference: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-row time to the leading dims of ``reference``."""
    t = torch.as_tensor(t, dtype=torch.float64, device=reference.device)
    while t.dim() < reference.dim():
        t = t.unsqueeze(-1)
    return t


def forward_mask(x: torch.Tensor, t: Time, schedule: NoiseSchedule, mask_id: int,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Corrupt clean tokens: each position keeps its token with probability alpha(t), else MASK.

    Args:
        x: Clean token ids (..., L) containing no MASK ids
        t: Scalar time or per-row times of shape x.shape[:-1]
        schedule: Noise schedule
        mask_id: Id of the absorbing MASK token
        generator: Source of randomness

    Returns:
        Corrupted token ids with the same shape as x

    Raises:
        PosteriorContractError: If x already contains MASK ids
    """
    if bool((x == mask_id).any()):
        raise PosteriorContractError("forward_mask expects clean text without MASK ids")
    keep_prob = schedule.alpha(_as_column(t, x))
    draws = torch.rand(x.shape, generator=generator, dtype=torch.float64, device=x.device)
    keep = draws < keep_prob
    return torch.where(keep, x, torch.full_like(x, mask_id))


def masked_cross_entropy(log_probs: torch.Tensor, x: torch.Tensor, x_t: torch.Tensor, mask_id: int) -> torch.Tensor:
    """
    Per-sequence mean cross-entropy of the clean tokens over MASKED positions only.

    Args:
        log_probs: (..., L, N) log-probabilities over real tokens
        x: (..., L) clean ids
        x_t: (..., L) corrupted ids
        mask_id: MASK id

    Returns:
        (...,) tensor; sequences with no masked position contribute 0
    """
    token_log_probs = log_probs.gather(-1, x.unsqueeze(-1)).squeeze(-1)
    masked = (x_t == mask_id).to(log_probs.dtype)
    count = masked.sum(dim=-1)
    total = -(token_log_probs * masked).sum(dim=-1)
    return torch.where(count > 0, total / count.clamp_min(1.0), torch.zeros_like(total))


PosteriorFn = Callable[[torch.Tensor, torch.Tensor], TextPosterior]


def text_nelbo_loss(posterior_fn: PosteriorFn, x: torch.Tensor, timesteps: TimestepBatch,
                    schedule: NoiseSchedule, mask_id: int,
                    generator: Optional[torch.Generator] = None,
                    reduction: str = "mean") -> torch.Tensor:
    """
    Stratified Monte-Carlo estimate of the absorbing-diffusion NELBO.

    For every timestep t_i the clean text is corrupted, the posterior is queried, and
    the masked-position cross-entropy is weighted by nelbo_weight(t_i). The K terms
    are averaged (1/K), then the batch is averaged.

    Args:
        posterior_fn: Maps (x_t, t) to a TextPosterior; t has shape x.shape[:-1]
        x: Clean token ids (B, L) or (L,)
        timesteps: K timesteps, shape (K,) shared by the batch or (B, K)
        schedule: Noise schedule
        mask_id: MASK id
        generator: Source of randomness for the corruption
        reduction: "mean" for a scalar, "none" for the per-sequence loss

    Returns:
        Non-negative loss
    """
    batch_shape = x.shape[:-1]
    values = timesteps.values.to(x.device)
    terms = []
    for i in range(timesteps.K):
        t_i = values[..., i].expand(batch_shape) if values.dim() == 1 else values[..., i]
        x_t = forward_mask(x, t_i, schedule, mask_id, generator=generator)
        posterior = posterior_fn(x_t, t_i)
        ce = masked_cross_entropy(posterior.log_probs, x, x_t, mask_id)
        weight = nelbo_weight(schedule, t_i, delta=timesteps.delta).to(ce.dtype)
        terms.append(weight * ce)
    per_sequence = torch.stack(terms, dim=-1).mean(dim=-1)
    if reduction == "none":
        return per_sequence
    return per_sequence.mean()


def unmask_probability(schedule: NoiseSchedule, t: Time, s: Time) -> Time:
    """(alpha(s) - alpha(t)) / (1 - alpha(t) + eps), the chance a MASK is revealed on t -> s."""
    return (schedule.alpha(s) - schedule.alpha(t)) / (1 - schedule.alpha(t) + UNMASK_EPS)


def sample_categorical(probs: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Inverse-CDF sampling of one id per row.

    Args:
        probs: (..., N) probabilities

    Returns:
        (...,) long tensor of ids in [0, N)
    """
    cdf = probs.to(torch.float64).cumsum(dim=-1)
    draws = torch.rand(probs.shape[:-1], generator=generator, dtype=torch.float64, device=probs.device)
    draws = draws * cdf[..., -1]
    ids = (cdf <= draws.unsqueeze(-1)).sum(dim=-1)
    return ids.clamp(max=probs.shape[-1] - 1)


def reverse_text_step(x_t: torch.Tensor, posterior: TextPosterior, t: float, s: float,
                      schedule: NoiseSchedule, mask_id: int,
                      generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Reverse absorbing transition from time t to the earlier time s.

    Each MASK position is revealed with probability unmask_probability(t, s) and
    replaced by a categorical draw from its posterior row; revealed tokens never change.

    Raises:
        OrderingError: If s >= t
    """
    if not s < t:
        raise OrderingError(f"reverse_text_step needs s < t, got s={s}, t={t}")
    p_unmask = float(unmask_probability(schedule, t, s))
    probs = posterior.as_probs()
    reveal_draws = torch.rand(x_t.shape, generator=generator, dtype=torch.float64, device=x_t.device)
    candidates = sample_categorical(probs, generator=generator).to(x_t.dtype)
    reveal = (x_t == mask_id) & (reveal_draws < p_unmask)
    return torch.where(reveal, candidates, x_t)

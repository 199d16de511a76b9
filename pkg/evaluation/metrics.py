"""
Metrics for the JointSR Project
Exact-match accuracy and normalized edit distance for transcriptions, PSNR for images.
"""

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import textdistance
import torch

from synth.degradation import bicubic_resize
from utils.exceptions import EvaluationError, ShapeMismatchError

PSNR_PEAK = 2.0
PSNR_CAP = 99.0


@dataclass
class EvalRecord:
    """One evaluated sample; strings are PAD-stripped transcriptions, images are (C, H, W)."""

    prediction: str
    ground_truth: str
    sr_image: torch.Tensor
    hr_image: torch.Tensor
    record_id: str = ""

    def __post_init__(self):
        if tuple(self.sr_image.shape) != tuple(self.hr_image.shape):
            raise ShapeMismatchError(
                f"SR {tuple(self.sr_image.shape)} and HR {tuple(self.hr_image.shape)} shapes differ"
            )

    @property
    def exact_match(self) -> bool:
        return self.prediction == self.ground_truth


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance (unit insert/delete/substitute costs)."""
    return int(textdistance.levenshtein.distance(a, b))


def ned(prediction: str, ground_truth: str) -> float:
    """
    1 - ED(p, g) / max(|p|, |g|); two empty strings score 1.
    """
    longest = max(len(prediction), len(ground_truth))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(prediction, ground_truth) / longest


def _require_records(records: Sequence[EvalRecord]) -> None:
    if len(records) == 0:
        raise EvaluationError("Metrics need at least one record")


def acc(records: Sequence[EvalRecord]) -> float:
    """Fraction of records whose prediction equals the ground truth."""
    _require_records(records)
    return sum(r.exact_match for r in records) / len(records)


def mean_ned(records: Sequence[EvalRecord]) -> float:
    """Unweighted mean of per-record NED."""
    _require_records(records)
    return sum(ned(r.prediction, r.ground_truth) for r in records) / len(records)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """
    10 * log10(peak^2 / MSE) with peak 2 for [-1, 1] images, capped at 99 dB.

    Raises:
        ShapeMismatchError: If shapes differ
    """
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"PSNR needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    mse = float(torch.mean((a.detach().to(torch.float64) - b.detach().to(torch.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PSNR_PEAK ** 2 / mse))


def bicubic_psnr(lr: torch.Tensor, hr: torch.Tensor) -> float:
    """PSNR of the bicubic upsampling of ``lr`` against ``hr``."""
    return psnr(bicubic_resize(lr, tuple(hr.shape[-2:])), hr)


def mean(values: Iterable[float]) -> float:
    values: List[float] = list(values)
    if not values:
        raise EvaluationError("Cannot average an empty set")
    return sum(values) / len(values)

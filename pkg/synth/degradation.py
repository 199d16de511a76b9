"""
Blind Degradation Pipeline for the JointSR Project
Seeded random composition of Gaussian blur, additive Gaussian noise, block-DCT quantization
(a codec-free compression surrogate) and bicubic downsampling, under one of two severity regimes.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import fft, ndimage

from utils.exceptions import ConfigError
from utils.seeding import make_numpy_rng

BLOCK = 8
LOSSLESS_QUALITY = 100
OPERATIONS = ("blur", "noise", "quantize", "downsample")

JPEG_LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _check_range(name: str, bounds: Tuple[float, float], low: float, high: float) -> Tuple[float, float]:
    lo, hi = (float(b) for b in bounds)
    if not low <= lo <= hi <= high:
        raise ConfigError(f"{name} range must satisfy {low} <= lo <= hi <= {high}, got {bounds}")
    return lo, hi


@dataclass
class DegradeRegime:
    """Parameter ranges of one severity regime; noise std is in [-1, 1] image units."""

    blur_sigma: Tuple[float, float] = (0.0, 0.0)
    noise_std: Tuple[float, float] = (0.0, 0.0)
    quality: Tuple[int, int] = (LOSSLESS_QUALITY, LOSSLESS_QUALITY)

    def __post_init__(self):
        self.blur_sigma = _check_range("blur_sigma", self.blur_sigma, 0.0, 10.0)
        self.noise_std = _check_range("noise_std", self.noise_std, 0.0, 1.0)
        lo, hi = _check_range("quality", self.quality, 1, LOSSLESS_QUALITY)
        self.quality = (int(lo), int(hi))


def mild_regime() -> DegradeRegime:
    return DegradeRegime(blur_sigma=(0.2, 1.0), noise_std=(0.0, 0.02), quality=(60, 95))


def severe_regime() -> DegradeRegime:
    return DegradeRegime(blur_sigma=(0.8, 2.0), noise_std=(0.02, 0.08), quality=(20, 60))


@dataclass
class DegradeSpec:
    """
    Degradation settings.

    Attributes:
        scale: Downsampling factor, 2 or 4
        mild: Regime used with probability 1 - severe_prob
        severe: Regime used with probability severe_prob
        shuffle_order: Randomize the order of the four operations per sample
        severe_prob: Probability of the severe regime
        seed: Default seed when ``degrade`` is called without one
    """

    scale: int = 4
    mild: DegradeRegime = field(default_factory=mild_regime)
    severe: DegradeRegime = field(default_factory=severe_regime)
    shuffle_order: bool = True
    severe_prob: float = 0.5
    seed: Optional[int] = None

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ConfigError(f"Degradation scale must be 2 or 4, got {self.scale}")
        if not 0.0 <= self.severe_prob <= 1.0:
            raise ConfigError(f"severe_prob must lie in [0, 1], got {self.severe_prob}")

    @classmethod
    def identity(cls, scale: int = 4) -> "DegradeSpec":
        """No blur, no noise, lossless quantization: plain bicubic downsampling."""
        return cls(scale=scale, mild=DegradeRegime(), severe=DegradeRegime(), shuffle_order=False)


@dataclass
class DegradeTrace:
    """What one call to ``degrade`` actually applied."""

    regime: str
    order: List[str]
    blur_sigma: float
    noise_std: float
    quality: int


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Blur an (H, W, C) array spatially; sigma 0 is the identity."""
    if sigma <= 0:
        return image
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect")


def add_gaussian_noise(image: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    if std <= 0:
        return image
    return np.clip(image + rng.standard_normal(image.shape) * std, -1.0, 1.0)


def quantization_table(quality: int) -> np.ndarray:
    """Scale the luminance table with the usual quality mapping (1 = coarsest)."""
    quality = int(np.clip(quality, 1, LOSSLESS_QUALITY))
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((JPEG_LUMINANCE_TABLE * scale + 50.0) / 100.0), 1.0)


def block_quantize(image: np.ndarray, quality: int) -> np.ndarray:
    """
    Compression surrogate: quantize 8x8 orthonormal DCT coefficients of each channel.

    Works on (H, W, C) arrays in [-1, 1]; edges are padded to whole blocks and
    cropped back. Quality 100 is treated as lossless.
    """
    if quality >= LOSSLESS_QUALITY:
        return image
    height, width, channels = image.shape
    pad_h, pad_w = -height % BLOCK, -width % BLOCK
    padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    levels = (padded + 1.0) * 127.5 - 128.0

    rows, cols = padded.shape[0] // BLOCK, padded.shape[1] // BLOCK
    blocks = levels.reshape(rows, BLOCK, cols, BLOCK, channels)
    coeffs = fft.dctn(blocks, axes=(1, 3), norm="ortho")
    step = quantization_table(quality)[None, :, None, :, None]
    coeffs = np.round(coeffs / step) * step
    restored = fft.idctn(coeffs, axes=(1, 3), norm="ortho").reshape(padded.shape)

    restored = (restored + 128.0) / 127.5 - 1.0
    return np.clip(restored[:height, :width], -1.0, 1.0)


def bicubic_resize(image: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """
    Bicubic resize of a (C, H, W) or (B, C, H, W) tensor, antialiased when shrinking,
    clamped to [-1, 1].
    """
    batched = image.dim() == 4
    x = image if batched else image.unsqueeze(0)
    shrinking = size[0] < x.shape[-2] or size[1] < x.shape[-1]
    out = F.interpolate(x, size=tuple(size), mode="bicubic", align_corners=False, antialias=shrinking)
    out = out.clamp(-1.0, 1.0)
    return out if batched else out.squeeze(0)


def degrade(hr: torch.Tensor, spec: DegradeSpec, seed: Optional[int] = None,
            return_trace: bool = False):
    """
    Produce the LR counterpart of one HR image.

    Args:
        hr: (C, H, W) tensor in [-1, 1] with H and W divisible by spec.scale
        spec: Degradation settings
        seed: Seed of this sample's randomness (falls back to spec.seed, then 0)
        return_trace: Also return the applied DegradeTrace

    Returns:
        (C, H / scale, W / scale) float32 tensor in [-1, 1], optionally with the trace
    """
    height, width = hr.shape[-2:]
    if height % spec.scale or width % spec.scale:
        raise ConfigError(f"HR size {(height, width)} not divisible by scale {spec.scale}")
    if seed is None:
        seed = spec.seed if spec.seed is not None else 0
    rng = make_numpy_rng(seed)

    severe = rng.random() < spec.severe_prob
    regime = spec.severe if severe else spec.mild
    sigma = float(rng.uniform(*regime.blur_sigma))
    noise_std = float(rng.uniform(*regime.noise_std))
    quality = int(rng.integers(regime.quality[0], regime.quality[1] + 1))
    order = [OPERATIONS[i] for i in rng.permutation(len(OPERATIONS))] if spec.shuffle_order else list(OPERATIONS)

    lr_size = (height // spec.scale, width // spec.scale)
    image = hr.detach().to(torch.float64).cpu().permute(1, 2, 0).numpy()
    for operation in order:
        if operation == "blur":
            image = gaussian_blur(image, sigma)
        elif operation == "noise":
            image = add_gaussian_noise(image, noise_std, rng)
        elif operation == "quantize":
            image = block_quantize(image, quality)
        else:
            tensor = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
            image = bicubic_resize(tensor, lr_size).permute(1, 2, 0).numpy()

    lr = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(torch.float32)
    if return_trace:
        trace = DegradeTrace("severe" if severe else "mild", order, sigma, noise_std, quality)
        return lr, trace
    return lr

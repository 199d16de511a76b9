"""
Seeding Utilities for the JointSR Project
All randomness flows from one root seed through named substreams (data/init/train/sample).
"""

import hashlib
import random
from typing import Optional, Union

import numpy as np
import torch

SUBSTREAMS = ("data", "init", "train", "sample")


def substream_seed(root_seed: int, name: str, *indices: Union[int, str]) -> int:
    """
    Derive a stable 63-bit seed for a named substream.

    Args:
        root_seed: Run-level seed
        name: Substream name, e.g. ``"train"``
        indices: Optional extra keys (sample index, epoch, "split", ...)

    Returns:
        Non-negative integer seed, identical across platforms and Python versions
    """
    parts = [str(int(i)) if isinstance(i, (int, np.integer)) else str(i) for i in indices]
    key = ":".join([str(int(root_seed)), name] + parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(seed: int, device: Union[str, torch.device] = "cpu") -> torch.Generator:
    """Return a torch.Generator seeded with ``seed``."""
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def make_numpy_rng(seed: Union[int, np.random.SeedSequence]) -> np.random.Generator:
    return np.random.default_rng(seed)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """
    Seed the global Python, NumPy and torch generators.

    Args:
        seed: Seed for the global generators
        deterministic: Ask torch for deterministic kernels where available
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def resolve_generator(generator: Optional[torch.Generator], seed: Optional[int] = None) -> Optional[torch.Generator]:
    """Prefer an explicit generator; otherwise build one from ``seed`` when given."""
    if generator is not None:
        return generator
    if seed is not None:
        return make_generator(seed)
    return None

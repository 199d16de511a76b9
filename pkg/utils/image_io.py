"""
Image I/O Helper for the JointSR Project
Lossless PNG read/write for [-1, 1] image tensors, trajectory frames, and retrying writes.
"""

import logging
import os
import time
from functools import wraps
from typing import Callable

import numpy as np
import torch
from PIL import Image

from utils.exceptions import DatasetIOError

MAX_RETRIES = 3
RETRY_DELAY = 0.2

logger = logging.getLogger(__name__)


def retry_on_failure(max_attempts: int = MAX_RETRIES, delay: float = RETRY_DELAY,
                     exceptions: tuple = (OSError,)):
    """
    Decorator to retry file operations on transient failure.

    The wrapped function must take the target path as its first argument after
    ``self``-less positional data; the final failure is raised as DatasetIOError.

    Args:
        max_attempts: Maximum number of attempts
        delay: Delay between attempts in seconds
        exceptions: Exception types that trigger a retry
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(path, *args, **kwargs):
            last_exception = None
            for attempt in range(max_attempts):
                try:
                    return func(path, *args, **kwargs)
                except exceptions as e:
                    last_exception = e
                    logger.warning(f"{func.__name__} failed for {path} (attempt {attempt + 1}/{max_attempts}): {e}")
                    if attempt < max_attempts - 1:
                        time.sleep(delay)
            raise DatasetIOError(path, str(last_exception)) from last_exception
        return wrapper
    return decorator


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """
    Map a (C, H, W) tensor in [-1, 1] to an (H, W, C) uint8 array.

    The mapping is round((x + 1) * 127.5) after clamping, which is deterministic
    across platforms.
    """
    if image.dim() != 3:
        raise ValueError(f"Expected (C, H, W) image, got shape {tuple(image.shape)}")
    array = image.detach().to(torch.float64).clamp(-1.0, 1.0).cpu().numpy()
    array = np.rint((array + 1.0) * 127.5).astype(np.uint8)
    return np.ascontiguousarray(array.transpose(1, 2, 0))


def from_uint8(array: np.ndarray) -> torch.Tensor:
    """Map an (H, W, C) uint8 array back to a float32 (C, H, W) tensor in [-1, 1]."""
    if array.ndim == 2:
        array = array[:, :, None]
    tensor = torch.from_numpy(array.astype(np.float32).transpose(2, 0, 1).copy())
    return tensor / 127.5 - 1.0


@retry_on_failure()
def save_image(path: str, image: torch.Tensor) -> str:
    """
    Save a (C, H, W) [-1, 1] tensor as a lossless PNG.

    Args:
        path: Destination file path (parent directories are created)
        image: Image tensor with 1 or 3 channels

    Returns:
        The path written
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    array = to_uint8(image)
    mode = "L" if array.shape[2] == 1 else "RGB"
    pil_image = Image.fromarray(array[:, :, 0] if mode == "L" else array, mode=mode)
    pil_image.save(path, format="PNG", optimize=False)
    return path


def load_image(path: str, channels: int = 3) -> torch.Tensor:
    """
    Load a PNG as a (C, H, W) float32 tensor in [-1, 1].

    Raises:
        DatasetIOError: If the file is missing or unreadable
    """
    try:
        with Image.open(path) as pil_image:
            pil_image = pil_image.convert("L" if channels == 1 else "RGB")
            array = np.asarray(pil_image)
    except (OSError, ValueError) as e:
        raise DatasetIOError(path, str(e)) from e
    return from_uint8(array)


def clean_filename(filename: str, max_length: int = 100) -> str:
    """
    Clean a string for use in a file name.

    Args:
        filename: Original name

    Returns:
        Name with invalid characters replaced and repeated underscores collapsed
    """
    for char in '<>:"/\\|?* ':
        filename = filename.replace(char, "_")
    while "__" in filename:
        filename = filename.replace("__", "_")
    return filename.strip("_")[:max_length]

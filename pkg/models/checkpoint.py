"""
Checkpoint Archive for the JointSR Project
Self-describing torch archive: format version, serialized ModelConfig, raw and EMA
parameters, optimizer/scheduler state, step counter and generator state.
"""

import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional

import torch

from models.mmformer import JointSRTransformer, ModelConfig
from utils.exceptions import CheckpointError, ModelConfigError

FORMAT_VERSION = 1

logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    """Loaded checkpoint contents."""

    config: ModelConfig
    params: Dict[str, torch.Tensor]
    ema_params: Optional[Dict[str, torch.Tensor]]
    step: int
    optimizer_state: Optional[dict] = None
    scheduler_state: Optional[dict] = None
    rng_state: Optional[torch.Tensor] = None
    extra: Optional[dict] = None

    def build_model(self, use_ema: bool = True) -> JointSRTransformer:
        """Instantiate the network with EMA weights (when present and requested) or raw weights."""
        model = JointSRTransformer(self.config)
        state = self.ema_params if use_ema and self.ema_params is not None else self.params
        try:
            model.load_state_dict(state)
        except RuntimeError as e:
            raise CheckpointError(f"Checkpoint parameters do not match the stored config: {e}") from e
        model.eval()
        return model


def save_checkpoint(path: str, model: JointSRTransformer, step: int,
                    ema_model: Optional[JointSRTransformer] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    scheduler: Optional[Any] = None,
                    rng_state: Optional[torch.Tensor] = None,
                    extra: Optional[dict] = None) -> str:
    """
    Write a checkpoint archive.

    The file is written to a temporary name first and then moved into place, so a
    reader never sees a partial archive.

    Returns:
        The path written
    """
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "ema_params": ({k: v.detach().cpu() for k, v in ema_model.state_dict().items()}
                       if ema_model is not None else None),
        "step": int(step),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    try:
        torch.save(payload, tmp_path)
        os.replace(tmp_path, path)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved: {path} (step {step})")
    return path


def load_checkpoint(path: str, expected_config: Optional[ModelConfig] = None,
                    map_location: str = "cpu") -> Checkpoint:
    """
    Read a checkpoint archive.

    Args:
        path: Archive path
        expected_config: When given, the stored config must equal it
        map_location: Device for loaded tensors

    Raises:
        CheckpointError: On a missing/corrupt file, an unknown format version, or a config mismatch
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e

    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format_version {version} (expected {FORMAT_VERSION})")

    try:
        config = ModelConfig(**payload["model_config"])
    except (TypeError, ModelConfigError) as e:
        raise CheckpointError(f"Invalid model config in {path}: {e}") from e

    if expected_config is not None and config != expected_config:
        diffs = {
            key: (stored, expected)
            for (key, stored), expected in zip(config.to_dict().items(), expected_config.to_dict().values())
            if stored != expected
        }
        raise CheckpointError(f"Checkpoint config mismatch for {path}: {diffs} (stored, expected)")

    return Checkpoint(
        config=config,
        params=payload["params"],
        ema_params=payload.get("ema_params"),
        step=int(payload["step"]),
        optimizer_state=payload.get("optimizer"),
        scheduler_state=payload.get("scheduler"),
        rng_state=payload.get("rng_state"),
        extra=payload.get("extra"),
    )

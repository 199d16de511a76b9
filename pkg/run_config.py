"""
Run Configuration for the JointSR Project
Typed config sections for every package, the flat dotted-key schema, cross-section
validation and the resolved-config echo. Generic loading helpers live in ``utils.config``.
"""

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

from engine.sampler import SampleConfig
from engine.trainer import TextConfig, TrainConfig
from flows.imageflow import GuidanceConfig
from flows.schedule import DEFAULT_DELTA, SCHEDULES
from models.mmformer import ModelConfig
from synth.degradation import DegradeRegime, DegradeSpec
from synth.synthdata import RenderSpec
from synth.vocab import DEFAULT_CHARSET, Vocabulary
from utils.config import RESOLVED_CONFIG_FILE, coerce_value, dump_flat, merge_sources, to_plain
from utils.exceptions import ConfigError, JointSRError


@dataclass
class ScheduleConfig:
    name: str = "log_linear"
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.name not in SCHEDULES:
            raise ValueError(f"schedule.name must be one of {sorted(SCHEDULES)}, got {self.name}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"schedule.delta must lie in (0, 1), got {self.delta}")


@dataclass
class DataConfig:
    """
    Data generation and loading (data.* keys). The HR canvas is model.image_size.

    ``dir`` is a subdirectory of run.output_dir that ``gen`` replaces as a whole.
    """

    dir: str = "data"
    count: int = 1000
    test_fraction: float = 0.1
    on_the_fly: bool = True
    charset: str = DEFAULT_CHARSET
    text_len: Tuple[int, int] = (4, 4)
    fg_range: Tuple[float, float] = (-1.0, -0.5)
    bg_range: Tuple[float, float] = (0.3, 1.0)
    jitter: float = 0.06
    scale: int = 4
    shuffle_order: bool = True
    severe_prob: float = 0.5
    mild_blur_sigma: Tuple[float, float] = (0.2, 1.0)
    mild_noise_std: Tuple[float, float] = (0.0, 0.02)
    mild_quality: Tuple[int, int] = (60, 95)
    severe_blur_sigma: Tuple[float, float] = (0.8, 2.0)
    severe_noise_std: Tuple[float, float] = (0.02, 0.08)
    severe_quality: Tuple[int, int] = (20, 60)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"data.count must be >= 1, got {self.count}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"data.test_fraction must lie in [0, 1), got {self.test_fraction}")
        normalized = os.path.normpath(self.dir) if self.dir else ""
        if (not normalized or normalized == os.curdir or os.path.isabs(normalized)
                or normalized.split(os.sep)[0] == os.pardir):
            raise ValueError(f"data.dir must be a subdirectory of the run output, got {self.dir!r}")

    def render_spec(self, model: ModelConfig) -> RenderSpec:
        return RenderSpec(
            charset=self.charset, canvas=model.image_size, text_len=self.text_len,
            fg_range=self.fg_range, bg_range=self.bg_range, jitter=self.jitter, channels=model.channels,
        )

    def degrade_spec(self) -> DegradeSpec:
        return DegradeSpec(
            scale=self.scale,
            mild=DegradeRegime(self.mild_blur_sigma, self.mild_noise_std, self.mild_quality),
            severe=DegradeRegime(self.severe_blur_sigma, self.severe_noise_std, self.severe_quality),
            shuffle_order=self.shuffle_order,
            severe_prob=self.severe_prob,
        )


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    log_level: str = "INFO"


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "guidance": GuidanceConfig,
    "schedule": ScheduleConfig,
    "text": TextConfig,
    "data": DataConfig,
    "sample": SampleConfig,
    "run": RunSection,
}
# guidance.delta is not a key of its own; it mirrors schedule.delta
HIDDEN_FIELDS = {"guidance": {"delta"}}


def section_fields(section: str) -> List[dataclasses.Field]:
    hidden = HIDDEN_FIELDS.get(section, set())
    return [f for f in dataclasses.fields(SECTIONS[section]) if f.name not in hidden]


def known_keys() -> List[str]:
    return sorted(f"{section}.{f.name}" for section in SECTIONS for f in section_fields(section))


@dataclass
class RunConfig:
    """The full flat key-value schema, grouped by section."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    text: TextConfig = field(default_factory=TextConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any]) -> "RunConfig":
        """
        Build from dotted keys; missing keys take defaults.

        Raises:
            ConfigError: On unknown keys, uncoercible values, or invalid section values
        """
        unknown = sorted(set(flat) - set(known_keys()))
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")

        sections: Dict[str, Any] = {}
        for section, section_cls in SECTIONS.items():
            hints = typing.get_type_hints(section_cls)
            kwargs = {}
            for f in section_fields(section):
                key = f"{section}.{f.name}"
                if key in flat:
                    kwargs[f.name] = coerce_value(flat[key], hints[f.name], key)
            if section == "guidance":
                delta_key = "schedule.delta"
                kwargs["delta"] = coerce_value(flat.get(delta_key, DEFAULT_DELTA), float, delta_key)
            try:
                sections[section] = section_cls(**kwargs)
            except (JointSRError, TypeError, ValueError) as e:
                raise ConfigError(f"Invalid {section} config: {e}") from e

        config = cls(**sections)
        config.validate()
        return config

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
             use_env: bool = True) -> "RunConfig":
        """Merge defaults < file < environment < overrides and build the config."""
        return cls.from_flat(merge_sources(path, overrides, use_env=use_env))

    def validate(self) -> None:
        """
        Cross-section consistency.

        Raises:
            ConfigError: If the data scale, charset or canvas disagree with the model
        """
        if self.data.scale != self.model.lr_scale:
            raise ConfigError(f"data.scale ({self.data.scale}) must equal model.lr_scale ({self.model.lr_scale})")
        if self.model.vocab_size != len(self.data.charset) + 1:
            raise ConfigError(
                f"model.vocab_size ({self.model.vocab_size}) must be len(data.charset) + 1 "
                f"({len(self.data.charset) + 1})"
            )
        if self.data.text_len[1] > self.model.seq_len:
            raise ConfigError(f"data.text_len max {self.data.text_len[1]} exceeds model.seq_len {self.model.seq_len}")
        if self.guidance.delta != self.schedule.delta:
            raise ConfigError("guidance.delta must mirror schedule.delta")
        try:
            self.data.render_spec(self.model)
            self.data.degrade_spec()
        except JointSRError as e:
            raise ConfigError(f"Invalid data config: {e}") from e

    def to_flat(self) -> Dict[str, Any]:
        flat = {}
        for section in SECTIONS:
            values = getattr(self, section)
            for f in section_fields(section):
                flat[f"{section}.{f.name}"] = to_plain(getattr(values, f.name))
        return dict(sorted(flat.items()))

    def dump(self, output_dir: str, filename: str = RESOLVED_CONFIG_FILE) -> str:
        """Write the resolved flat config (sorted keys) next to a command's outputs."""
        return dump_flat(self.to_flat(), output_dir, filename)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(charset=self.data.charset, seq_len=self.model.seq_len)

#!/usr/bin/env python3
"""
Command Runner for the JointSR Project
Binds data generation, training, sampling and evaluation into reproducible runs.

Usage:
    python run_jointsr.py gen   --config configs/toy.yaml --count 1000 --seed 7
    python run_jointsr.py train --config configs/toy.yaml --guidance.w 1.0
    python run_jointsr.py sample --config configs/toy.yaml --lr-image lr.png --steps 4
    python run_jointsr.py eval  --config configs/toy.yaml --steps-sweep 2 40

Precedence of settings: dataclass defaults < --config file < environment (.env,
JOINTSR_OUTPUT_ROOT) < --set key=value < dedicated flags.
Exit code 0 on success, 1 on any handled failure.
"""

import argparse
import logging
import os
import sys
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional

from engine.sampler import TrajectoryRecorder, sample
from engine.trainer import CHECKPOINT_DIR, FINAL_CHECKPOINT, Trainer
from evaluation.evaluator import evaluate, steps_sweep
from flows.schedule import get_schedule
from models.checkpoint import load_checkpoint
from run_config import RunConfig
from synth.synthdata import (
    BatchSource, Manifest, ManifestDataset, SyntheticDataset, TEST_FILE, TRAIN_FILE, make_dataset,
)
from synth.vocab import Vocabulary
from utils.config import parse_overrides
from utils.exceptions import DatasetError, JointSRError
from utils.image_io import clean_filename, load_image, save_image
from utils.logger import setup_logging, timed
from utils.seeding import seed_everything, substream_seed

SAMPLE_DIR = "samples"
EVAL_DIR = "eval"
TRAJECTORY_DIR = "trajectory"
SWEEP_FILE = "steps_sweep.tsv"

# flag attribute -> config key
FLAG_KEYS = {
    "gen": {"seed": "run.seed", "output": "run.output_dir", "count": "data.count"},
    "train": {"seed": "run.seed", "output": "run.output_dir", "train_steps": "train.steps",
              "guidance_w": "guidance.w", "device": "train.device"},
    "sample": {"seed": "run.seed", "output": "run.output_dir", "steps": "sample.steps",
               "cfg_scale": "sample.cfg_scale"},
    "eval": {"seed": "run.seed", "output": "run.output_dir", "steps": "sample.steps",
             "cfg_scale": "sample.cfg_scale"},
}


class RunExecutor:
    """Runs one command against a resolved RunConfig."""

    def __init__(self, config: RunConfig, args: argparse.Namespace):
        self.config = config
        self.args = args
        self.logger = logging.getLogger(self.__class__.__name__)

    @property
    def output_dir(self) -> str:
        return self.config.run.output_dir

    @property
    def data_dir(self) -> str:
        return os.path.join(self.output_dir, self.config.data.dir)

    @property
    def default_checkpoint(self) -> str:
        return os.path.join(self.output_dir, CHECKPOINT_DIR, FINAL_CHECKPOINT)

    def run(self, command: str) -> None:
        seed_everything(self.config.run.seed)
        handler = getattr(self, f"cmd_{command}")
        with timed(command, self.logger):
            handler()

    def cmd_gen(self) -> None:
        """Render and degrade data.count samples into <output>/<data.dir>."""
        cfg = self.config
        manifests = make_dataset(
            cfg.data.count, cfg.data.render_spec(cfg.model), cfg.data.degrade_spec(), cfg.run.seed,
            self.data_dir, cfg.vocabulary(), test_fraction=cfg.data.test_fraction,
        )
        cfg.dump(self.data_dir)
        self.logger.info(
            f"Generated {len(manifests['all'])} samples "
            f"({len(manifests['train'])} train / {len(manifests['test'])} test) in {self.data_dir}"
        )

    def _training_dataset(self):
        cfg = self.config
        vocab = cfg.vocabulary()
        if cfg.data.on_the_fly:
            self.logger.info("Training on online synthetic data")
            # disjoint from the stream `gen` writes, so held-out records are never trained on
            online_seed = substream_seed(cfg.run.seed, "data", "online")
            return SyntheticDataset(cfg.data.render_spec(cfg.model), cfg.data.degrade_spec(), vocab, online_seed)
        manifest_path = self.args.manifest or os.path.join(self.data_dir, TRAIN_FILE)
        manifest = Manifest.load(manifest_path)
        self.logger.info(f"Training on {len(manifest)} records from {manifest_path}")
        return ManifestDataset(manifest, vocab, channels=cfg.model.channels)

    def cmd_train(self) -> None:
        """Train and write checkpoints/ plus metrics.jsonl under the output directory."""
        cfg = self.config
        batch_source = BatchSource(self._training_dataset(), cfg.train.batch_size, cfg.run.seed)
        cfg.dump(self.output_dir)
        trainer = Trainer(cfg.model, cfg.train, cfg.guidance, cfg.text, batch_source, self.output_dir, cfg.run.seed)
        state = trainer.fit(resume=self.args.resume)
        self.logger.info(f"Training finished at step {state.step}; final checkpoint {self.default_checkpoint}")

    def _load_model(self):
        cfg = self.config
        path = self.args.checkpoint or self.default_checkpoint
        checkpoint = load_checkpoint(path, map_location=cfg.train.device)
        model = checkpoint.build_model(use_ema=cfg.sample.use_ema).to(cfg.train.device)
        self.logger.info(f"Loaded {'EMA' if cfg.sample.use_ema else 'raw'} weights from {path} (step {checkpoint.step})")
        return model

    def _vocabulary(self, model) -> Vocabulary:
        return Vocabulary(charset=self.config.data.charset, seq_len=model.config.seq_len)

    def cmd_sample(self) -> None:
        """Super-resolve one LR image and recognize its text."""
        cfg = self.config
        model = self._load_model()
        vocab = self._vocabulary(model)

        lr = load_image(self.args.lr_image, model.config.channels)
        if tuple(lr.shape[-2:]) != tuple(model.config.lr_size):
            raise DatasetError(
                f"LR image {self.args.lr_image} is {tuple(lr.shape[-2:])}, model expects {model.config.lr_size}"
            )

        sample_dir = os.path.join(self.output_dir, SAMPLE_DIR)
        cfg.dump(sample_dir)
        recorder = None
        if self.args.dump_trajectory:
            recorder = TrajectoryRecorder(
                os.path.join(sample_dir, TRAJECTORY_DIR), partial(vocab.decode, show_mask=True)
            )

        image, tokens = sample(
            model, lr.unsqueeze(0).to(cfg.train.device), cfg.sample.steps, cfg.sample,
            seed=substream_seed(cfg.run.seed, "sample", 0), callback=recorder,
            schedule=get_schedule(cfg.schedule.name),
        )
        text = vocab.decode(tokens[0].tolist())

        stem = clean_filename(Path(self.args.lr_image).stem) or "image"
        image_path = save_image(os.path.join(sample_dir, f"{stem}_sr.png"), image[0].cpu())
        text_path = os.path.join(sample_dir, f"{stem}_text.txt")
        with open(text_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text + "\n")
        if recorder is not None:
            recorder.write_tokens()
        self.logger.info(f"SR image: {image_path}")
        print(text)

    def cmd_eval(self) -> None:
        """Evaluate a checkpoint on a manifest; optionally sweep step counts."""
        cfg = self.config
        manifest_path = self.args.manifest or os.path.join(self.data_dir, TEST_FILE)
        manifest = Manifest.load(manifest_path)
        model = self._load_model()
        vocab = self._vocabulary(model)
        eval_dir = os.path.join(self.output_dir, EVAL_DIR)
        cfg.dump(eval_dir)

        if self.args.steps_sweep:
            frame = steps_sweep(manifest, model, self.args.steps_sweep, cfg.sample, seed=cfg.run.seed,
                                vocab=vocab, device=cfg.train.device)
            sweep_path = os.path.join(eval_dir, SWEEP_FILE)
            frame.to_csv(sweep_path, sep="\t", index=False, lineterminator="\n", float_format="%.6f")
            self.logger.info(f"Step sweep written to {sweep_path}\n{frame.to_string(index=False)}")
            return

        report = evaluate(manifest, model, cfg.sample.steps, cfg.sample, seed=cfg.run.seed,
                          vocab=vocab, device=cfg.train.device)
        paths = report.write(eval_dir)
        print(report.format_summary())
        self.logger.info(f"Report written to {paths['report']}")


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file (nested or flat dotted keys)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key; repeatable")
    parser.add_argument("--seed", type=int, help="Root seed (run.seed)")
    parser.add_argument("--output", help="Output directory (run.output_dir)")
    parser.add_argument("--log-level", default=None, help="Console log level (run.log_level)")
    parser.add_argument("--log-file", default=None, help="Also write a DEBUG log to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="JointSR: joint text-image super-resolution",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Settings precedence: defaults < --config < environment < --set < flags",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen", help="Generate a synthetic dataset")
    _add_common_arguments(gen)
    gen.add_argument("--count", type=int, help="Number of samples (data.count)")
    gen.add_argument("--scale", type=int, help="Downsampling factor; sets data.scale and model.lr_scale")

    train = subparsers.add_parser("train", help="Train the joint model")
    _add_common_arguments(train)
    train.add_argument("--steps", dest="train_steps", type=int, help="Total optimizer steps (train.steps)")
    train.add_argument("--guidance.w", dest="guidance_w", type=float, help="Model-guidance scale (guidance.w)")
    train.add_argument("--device", help="Torch device (train.device)")
    train.add_argument("--manifest", help="Training manifest when data.on_the_fly is false")
    train.add_argument("--resume", help="Checkpoint to resume from")

    sample_cmd = subparsers.add_parser("sample", help="Super-resolve one LR image")
    _add_common_arguments(sample_cmd)
    sample_cmd.add_argument("--lr-image", required=True, help="Path of the LR image")
    sample_cmd.add_argument("--checkpoint", help="Checkpoint (default <output>/checkpoints/final.pt)")
    sample_cmd.add_argument("--steps", type=int, help="Sampler steps (sample.steps)")
    sample_cmd.add_argument("--cfg-scale", type=float, help="Sampling guidance scale (sample.cfg_scale)")
    sample_cmd.add_argument("--dump-trajectory", action="store_true", help="Write one image per step")

    eval_cmd = subparsers.add_parser("eval", help="Evaluate a checkpoint on a manifest")
    _add_common_arguments(eval_cmd)
    eval_cmd.add_argument("--manifest", help="Manifest to evaluate (default <output>/<data.dir>/test.tsv)")
    eval_cmd.add_argument("--checkpoint", help="Checkpoint (default <output>/checkpoints/final.pt)")
    eval_cmd.add_argument("--steps", type=int, help="Sampler steps (sample.steps)")
    eval_cmd.add_argument("--cfg-scale", type=float, help="Sampling guidance scale (sample.cfg_scale)")
    eval_cmd.add_argument("--steps-sweep", type=int, nargs="+", help="Evaluate at each of these step counts")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """--set pairs first, then dedicated flags on top."""
    overrides = parse_overrides(args.overrides)
    for attribute, key in FLAG_KEYS[args.command].items():
        value = getattr(args, attribute, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "scale", None) is not None:
        overrides["data.scale"] = args.scale
        overrides["model.lr_scale"] = args.scale
    if args.log_level is not None:
        overrides["run.log_level"] = args.log_level
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level or "INFO", args.log_file)
    logger = logging.getLogger("jointsr")

    try:
        config = RunConfig.load(args.config, collect_overrides(args))
        setup_logging(config.run.log_level, args.log_file)
        RunExecutor(config, args).run(args.command)
    except JointSRError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed with an I/O error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Pytest configuration file for the JointSR Project
Contains command-line options, shared fixtures (tiny model configs, seeded
generators, stub denoisers) and global test configuration.
"""

import pytest
import torch

from models.mmformer import ModelConfig, ModelOutput
from run_config import RunConfig
from synth.vocab import Vocabulary
from utils.seeding import make_generator

DEFAULT_SEED = 1234


def pytest_addoption(parser):
    """Add command line options for pytest."""
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run tests marked slow (Monte-Carlo oracles, end-to-end runs)"
    )
    parser.addoption(
        "--device",
        action="store",
        default="cpu",
        help="Torch device for model tests: cpu, cuda"
    )


@pytest.fixture(scope="session")
def device(request):
    """Get the torch device from the command line option."""
    name = request.config.getoption("--device")
    if name.startswith("cuda") and not torch.cuda.is_available():
        pytest.skip("CUDA requested but not available")
    return torch.device(name)


@pytest.fixture(scope="session")
def tiny_model_config():
    """A model small enough for per-test construction on CPU."""
    return ModelConfig(
        image_size=(8, 16),
        patch_size=4,
        channels=3,
        embed_dim=32,
        depth=1,
        heads=2,
        vocab_size=27,
        seq_len=6,
        lr_scale=4,
        mlp_ratio=2.0,
        time_freq_dim=16,
    )


@pytest.fixture(scope="session")
def tiny_vocab(tiny_model_config):
    return Vocabulary(seq_len=tiny_model_config.seq_len)


@pytest.fixture
def tiny_run_config(tmp_path):
    """
    End-to-end run settings: 16x32 lines of two glyphs, a one-block model and a
    handful of training steps, writing under a temporary directory.
    """
    return RunConfig.from_flat({
        "run.output_dir": str(tmp_path / "run"),
        "run.seed": 7,
        "model.image_size": [16, 32],
        "model.embed_dim": 32,
        "model.depth": 1,
        "model.heads": 2,
        "model.seq_len": 4,
        "model.time_freq_dim": 16,
        "model.mlp_ratio": 2.0,
        "train.batch_size": 4,
        "train.steps": 3,
        "train.warmup_steps": 1,
        "train.log_every": 1,
        "train.checkpoint_every": 2,
        "data.count": 6,
        "data.test_fraction": 0.34,
        "data.text_len": [2, 2],
        "sample.steps": 2,
    })


@pytest.fixture
def generator():
    """Fresh CPU generator with a fixed seed for every test."""
    return make_generator(DEFAULT_SEED)


class StubDenoiser:
    """
    Callable stand-in for the transformer.

    ``velocity_fn(x_img, t_img)`` and ``logits_fn(x_txt, t_txt)`` provide the
    outputs; every call is counted.
    """

    def __init__(self, config: ModelConfig, velocity_fn=None, logits_fn=None):
        self.config = config
        self.velocity_fn = velocity_fn or (lambda x, t: torch.zeros_like(x))
        self.logits_fn = logits_fn or (
            lambda x, t: torch.zeros(*x.shape, config.vocab_size, dtype=torch.float32)
        )
        self.calls = []

    def __call__(self, x_img, t_img, x_txt, t_txt, cond_lr=None, lr_keep=None):
        self.calls.append({"cond_lr": cond_lr, "lr_keep": lr_keep, "t_img": t_img, "x_txt": x_txt.clone()})
        return ModelOutput(self.velocity_fn(x_img, t_img), self.logits_fn(x_txt, t_txt))

    def eval(self):
        return self


@pytest.fixture
def stub_denoiser():
    """Factory for StubDenoiser instances."""
    return StubDenoiser


def pytest_configure(config):
    """Make sure every marker used by the suite is registered."""
    for marker in ("critical", "smoke", "unit", "integration", "regression", "slow",
                   "edge_case", "negative", "statistical"):
        config.addinivalue_line("markers", f"{marker}: see pytest.ini")


def pytest_collection_modifyitems(config, items):
    """Tag tests by name and skip slow ones unless --run-slow is given."""
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    run_slow = config.getoption("--run-slow")
    for item in items:
        name = item.name.lower()
        if "invalid" in name or "rejects" in name or "raises" in name:
            item.add_marker(pytest.mark.negative)
        if "monte_carlo" in name or "empirical" in name:
            item.add_marker(pytest.mark.statistical)
        if "slow" in item.keywords and not run_slow:
            item.add_marker(skip_slow)

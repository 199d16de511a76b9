"""
Sampler Tests for the JointSR Project
Joint Euler/unmasking inference, guidance forwards, text monotonicity and trajectories.
"""

import os

import pytest
import torch

from engine.sampler import (
    SampleConfig, SamplerState, TrajectoryRecorder, finalize_text, init_state, joint_step, sample,
)
from flows.imageflow import euler_integrate
from utils.exceptions import NonFiniteOutputError, OrderingError, StepCountError
from utils.seeding import make_generator


def lr_batch(config, batch_size=2, seed=0):
    h, w = config.lr_size
    return torch.rand(batch_size, config.channels, h, w, generator=make_generator(seed)) * 2 - 1


def delta_logits(config, token: int):
    def logits_fn(x_txt, t_txt):
        logits = torch.zeros(*x_txt.shape, config.vocab_size)
        logits[..., token] = 100.0
        return logits
    return logits_fn


class TestImageBranch:

    @pytest.fixture(autouse=True)
    def setup(self, tiny_model_config, stub_denoiser):
        self.config = tiny_model_config
        self.stub_denoiser = stub_denoiser
        self.lr = lr_batch(tiny_model_config)
        H, W = tiny_model_config.image_size
        self.x0 = torch.rand(2, 3, H, W, generator=make_generator(1)) * 1.8 - 0.9

    @pytest.mark.critical
    @pytest.mark.parametrize("steps", [1, 4, 40])
    def test_oracle_velocity_recovers_data(self, steps):
        model = self.stub_denoiser(self.config, velocity_fn=lambda x, t: (x - self.x0) / t)
        image, _ = sample(model, self.lr, steps, seed=3)
        assert torch.allclose(image, self.x0, atol=1e-5)

    @pytest.mark.critical
    def test_zero_velocity_returns_initial_noise(self):
        model = self.stub_denoiser(self.config, logits_fn=delta_logits(self.config, 3))
        image, tokens = sample(model, self.lr, 4, seed=5)
        noise = init_state(self.lr, self.config.seq_len, self.config.mask_id, self.config.image_size, seed=5).x_img
        assert torch.equal(image, noise.clamp(-1, 1))
        assert bool((tokens == 3).all())

    @pytest.mark.unit
    def test_image_branch_matches_plain_euler(self):
        velocity = lambda x, t: torch.sin(x) * t
        model = self.stub_denoiser(self.config, velocity_fn=velocity)
        image, _ = sample(model, self.lr, 5, seed=9)
        start = init_state(self.lr, self.config.seq_len, self.config.mask_id, self.config.image_size, seed=9).x_img
        expected = euler_integrate(velocity, start, 5).clamp(-1, 1)
        assert torch.allclose(image, expected, atol=1e-6)

    @pytest.mark.unit
    @pytest.mark.parametrize("cfg_scale, per_step", [(1.0, 1), (2.0, 2), (0.0, 2)])
    def test_forward_count_per_step(self, cfg_scale, per_step):
        model = self.stub_denoiser(self.config)
        sample(model, self.lr, 3, cfg=SampleConfig(steps=3, cfg_scale=cfg_scale), seed=0)
        assert len(model.calls) == 3 * per_step
        if per_step == 2:
            assert model.calls[1]["cond_lr"] is None
            assert bool((model.calls[1]["x_txt"] == self.config.mask_id).all())

    @pytest.mark.unit
    def test_sampling_is_seeded(self):
        model = self.stub_denoiser(self.config)
        first = sample(model, self.lr, 3, seed=21)
        second = sample(model, self.lr, 3, seed=21)
        assert torch.equal(first[0], second[0]) and torch.equal(first[1], second[1])


class TestTextBranch:

    @pytest.fixture(autouse=True)
    def setup(self, tiny_model_config, stub_denoiser):
        self.config = tiny_model_config
        self.stub_denoiser = stub_denoiser

    @pytest.mark.critical
    def test_revealed_tokens_never_change(self):
        model = self.stub_denoiser(self.config)
        snapshots = []
        sample(model, lr_batch(self.config, batch_size=8), 6, seed=4,
               callback=lambda k, state: snapshots.append(state.x_txt.clone()))
        mask_id = self.config.mask_id
        for before, after in zip(snapshots[:-1], snapshots[1:]):
            revealed = before != mask_id
            assert torch.equal(after[revealed], before[revealed])
            assert int((after == mask_id).sum()) <= int((before == mask_id).sum())
        assert not bool((snapshots[-1] == mask_id).any())

    @pytest.mark.statistical
    def test_masked_fraction_tracks_time(self):
        model = self.stub_denoiser(self.config)
        fractions = {}

        def record(k, state: SamplerState):
            fractions[k] = state.masked_fraction(self.config.mask_id)

        sample(model, lr_batch(self.config, batch_size=2000), 4, seed=6, callback=record)
        assert fractions[0] == 1.0
        for k in (1, 2, 3):
            assert fractions[k] == pytest.approx(1 - k / 4, abs=0.02)
        assert fractions[4] == 0.0

    @pytest.mark.unit
    def test_single_step_reveals_everything(self):
        model = self.stub_denoiser(self.config, logits_fn=delta_logits(self.config, 7))
        _, tokens = sample(model, lr_batch(self.config), 1, seed=8)
        assert bool((tokens == 7).all())

    @pytest.mark.unit
    def test_finalize_text_uses_argmax(self):
        mask_id = self.config.mask_id
        x_txt = torch.tensor([[1, mask_id, 2]])
        logits = torch.zeros(1, 3, self.config.vocab_size)
        logits[0, 1, 9] = 5.0
        state = SamplerState(x_img=torch.zeros(1), x_txt=x_txt, t=0.0, text_logits=logits)
        assert finalize_text(state, mask_id).tolist() == [[1, 9, 2]]


class TestJointStep:

    @pytest.fixture(autouse=True)
    def setup(self, tiny_model_config, stub_denoiser):
        self.config = tiny_model_config
        self.stub_denoiser = stub_denoiser
        self.lr = lr_batch(tiny_model_config)
        self.state = init_state(self.lr, tiny_model_config.seq_len, tiny_model_config.mask_id,
                                tiny_model_config.image_size, seed=0)

    @pytest.mark.statistical
    def test_init_state_statistics(self):
        lr = lr_batch(self.config, batch_size=500)
        state = init_state(lr, self.config.seq_len, self.config.mask_id, self.config.image_size, seed=1)
        assert state.t == 1.0
        assert abs(float(state.x_img.mean())) < 0.02
        assert abs(float(state.x_img.std()) - 1.0) < 0.02
        assert state.masked_fraction(self.config.mask_id) == 1.0

    @pytest.mark.negative
    @pytest.mark.parametrize("t, s", [(0.5, 0.5), (0.5, 0.75)])
    def test_ordering_violation_raises(self, t, s):
        state = SamplerState(self.state.x_img, self.state.x_txt, t)
        with pytest.raises(OrderingError):
            joint_step(state, self.stub_denoiser(self.config), self.lr, t, s, SampleConfig())

    @pytest.mark.negative
    def test_state_time_mismatch_raises(self):
        with pytest.raises(OrderingError):
            joint_step(self.state, self.stub_denoiser(self.config), self.lr, 0.5, 0.25, SampleConfig())

    @pytest.mark.negative
    def test_non_finite_velocity_raises(self):
        model = self.stub_denoiser(self.config, velocity_fn=lambda x, t: torch.full_like(x, float("nan")))
        with pytest.raises(NonFiniteOutputError) as excinfo:
            sample(model, self.lr, 2, seed=0)
        assert excinfo.value.step_index == 1
        assert excinfo.value.which == "velocity"

    @pytest.mark.negative
    @pytest.mark.parametrize("kwargs", [{"steps": 0}, {"cfg_scale": -1.0}])
    def test_invalid_sample_config_raises(self, kwargs):
        with pytest.raises(ValueError):
            SampleConfig(**kwargs)

    @pytest.mark.negative
    @pytest.mark.parametrize("steps", [0, -1])
    def test_sample_rejects_non_positive_steps(self, steps):
        with pytest.raises(StepCountError):
            sample(self.stub_denoiser(self.config), self.lr, steps, seed=0)


class TestTrajectoryRecorder:

    @pytest.mark.integration
    def test_writes_one_frame_per_step(self, tiny_model_config, tiny_vocab, stub_denoiser, tmp_path):
        recorder = TrajectoryRecorder(str(tmp_path / "trajectory"),
                                      decode=lambda ids: tiny_vocab.decode(ids, show_mask=True))
        sample(stub_denoiser(tiny_model_config), lr_batch(tiny_model_config), 2, seed=0, callback=recorder)
        path = recorder.write_tokens()
        assert sorted(os.listdir(tmp_path / "trajectory")) == [
            "step_000.png", "step_001.png", "step_002.png", "trajectory.txt",
        ]
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert len(lines) == 3
        assert lines[0].split("\t") == ["0", "1.000000", "_" * tiny_model_config.seq_len]
        assert "_" not in lines[-1].split("\t")[2]

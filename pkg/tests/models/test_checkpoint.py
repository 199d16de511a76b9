"""
Checkpoint Tests for the JointSR Project
Archive round trips, EMA selection and failure modes.
"""

import dataclasses

import pytest
import torch

from models.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from models.mmformer import build_model
from utils.exceptions import CheckpointError
from utils.seeding import make_generator


class TestCheckpointRoundTrip:

    @pytest.fixture(autouse=True)
    def setup(self, tiny_model_config, tmp_path):
        self.config = tiny_model_config
        self.model = build_model(tiny_model_config, generator=make_generator(0))
        self.ema = build_model(tiny_model_config, generator=make_generator(1))
        self.path = str(tmp_path / "checkpoints" / "step_5.pt")

    @pytest.mark.critical
    def test_round_trip_restores_weights(self):
        save_checkpoint(self.path, self.model, step=5, ema_model=self.ema, extra={"note": "x"})
        checkpoint = load_checkpoint(self.path, expected_config=self.config)
        assert checkpoint.step == 5
        assert checkpoint.config == self.config
        assert checkpoint.extra == {"note": "x"}
        raw = checkpoint.build_model(use_ema=False)
        for (name, p), q in zip(raw.state_dict().items(), self.model.state_dict().values()):
            assert torch.equal(p, q), name

    @pytest.mark.unit
    def test_ema_weights_selected_by_default(self):
        save_checkpoint(self.path, self.model, step=5, ema_model=self.ema)
        model = load_checkpoint(self.path).build_model()
        assert torch.equal(model.img_pos, self.ema.img_pos)
        assert not model.training

    @pytest.mark.edge_case
    def test_missing_ema_falls_back_to_raw(self):
        save_checkpoint(self.path, self.model, step=0)
        checkpoint = load_checkpoint(self.path)
        assert checkpoint.ema_params is None
        assert torch.equal(checkpoint.build_model(use_ema=True).img_pos, self.model.img_pos)

    @pytest.mark.unit
    def test_optimizer_state_is_stored(self):
        optimizer = torch.optim.AdamW(self.model.parameters(), lr=1e-3)
        save_checkpoint(self.path, self.model, step=1, optimizer=optimizer, rng_state=torch.get_rng_state())
        checkpoint = load_checkpoint(self.path)
        assert checkpoint.optimizer_state["param_groups"][0]["lr"] == 1e-3
        assert checkpoint.rng_state is not None

    @pytest.mark.unit
    def test_no_temporary_file_left(self, tmp_path):
        save_checkpoint(self.path, self.model, step=1)
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_5.pt"]


class TestCheckpointFailures:

    @pytest.fixture(autouse=True)
    def setup(self, tiny_model_config, tmp_path):
        self.config = tiny_model_config
        self.model = build_model(tiny_model_config, generator=make_generator(0))
        self.path = str(tmp_path / "final.pt")

    @pytest.mark.negative
    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(str(tmp_path / "nope.pt"))

    @pytest.mark.negative
    def test_config_mismatch_raises(self):
        save_checkpoint(self.path, self.model, step=0)
        other = dataclasses.replace(self.config, depth=2)
        with pytest.raises(CheckpointError, match="mismatch"):
            load_checkpoint(self.path, expected_config=other)

    @pytest.mark.negative
    def test_version_mismatch_raises(self):
        save_checkpoint(self.path, self.model, step=0)
        payload = torch.load(self.path, weights_only=False)
        payload["format_version"] = FORMAT_VERSION + 1
        torch.save(payload, self.path)
        with pytest.raises(CheckpointError, match="format_version"):
            load_checkpoint(self.path)

    @pytest.mark.negative
    def test_corrupt_file_raises(self):
        with open(self.path, "wb") as f:
            f.write(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="Unreadable"):
            load_checkpoint(self.path)

    @pytest.mark.negative
    def test_invalid_stored_config_raises(self):
        save_checkpoint(self.path, self.model, step=0)
        payload = torch.load(self.path, weights_only=False)
        payload["model_config"]["heads"] = 5
        torch.save(payload, self.path)
        with pytest.raises(CheckpointError, match="Invalid model config"):
            load_checkpoint(self.path)

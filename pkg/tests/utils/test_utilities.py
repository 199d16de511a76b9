"""
Utility Tests for the JointSR Project
Logging setup, timers, metrics writer, seed substreams and PNG round trips.
"""

import json
import logging

import numpy as np
import pytest
import torch

from utils.exceptions import DatasetIOError
from utils.image_io import clean_filename, from_uint8, load_image, retry_on_failure, save_image, to_uint8
from utils.logger import MetricsWriter, setup_logging, timed
from utils.seeding import make_generator, make_numpy_rng, resolve_generator, substream_seed


class TestLogging:

    @pytest.fixture(autouse=True)
    def setup(self):
        root = logging.getLogger()
        self.saved_handlers = list(root.handlers)
        self.saved_level = root.level
        yield
        setup_logging("WARNING")
        for handler in list(root.handlers):
            if handler not in self.saved_handlers:
                root.removeHandler(handler)
                handler.close()
        for handler in self.saved_handlers:
            if handler not in root.handlers:
                root.addHandler(handler)
        root.setLevel(self.saved_level)

    @pytest.mark.unit
    def test_repeated_setup_does_not_duplicate_handlers(self):
        setup_logging("INFO")
        count = len(logging.getLogger().handlers)
        setup_logging("DEBUG")
        assert len(logging.getLogger().handlers) == count

    @pytest.mark.unit
    def test_log_file_receives_debug_records(self, tmp_path):
        log_file = tmp_path / "logs" / "run.log"
        setup_logging("WARNING", str(log_file))
        logging.getLogger("jointsr.test").debug("detail message")
        for handler in logging.getLogger().handlers:
            handler.flush()
        assert "detail message" in log_file.read_text(encoding="utf-8")

    @pytest.mark.unit
    def test_timed_records_duration(self, caplog):
        with caplog.at_level(logging.INFO):
            with timed("unit work") as record:
                pass
        assert record["seconds"] >= 0.0
        assert "unit work" in caplog.text


class TestMetricsWriter:

    @pytest.mark.unit
    def test_writes_one_json_object_per_line(self, tmp_path):
        path = tmp_path / "out" / "metrics.jsonl"
        with MetricsWriter(str(path)) as writer:
            writer.write({"step": 1, "loss_total": 0.5})
            writer.write({"step": 2, "loss_total": 0.25})
        lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
        assert lines == [{"step": 1, "loss_total": 0.5}, {"step": 2, "loss_total": 0.25}]

    @pytest.mark.unit
    def test_append_keeps_existing_records(self, tmp_path):
        path = str(tmp_path / "metrics.jsonl")
        with MetricsWriter(path) as writer:
            writer.write({"step": 1})
        with MetricsWriter(path, append=True) as writer:
            writer.write({"step": 2})
        with open(path, encoding="utf-8") as f:
            assert [json.loads(line)["step"] for line in f] == [1, 2]
        with MetricsWriter(path):
            pass
        with open(path, encoding="utf-8") as f:
            assert f.read() == ""


class TestSeeding:

    @pytest.mark.critical
    def test_substreams_are_stable_and_distinct(self):
        assert substream_seed(0, "data", 1) == substream_seed(0, "data", 1)
        seeds = {substream_seed(0, name) for name in ("data", "init", "train", "sample")}
        assert len(seeds) == 4
        assert substream_seed(0, "data", 1) != substream_seed(0, "data", 2)
        assert substream_seed(0, "data", 1) != substream_seed(1, "data", 1)

    @pytest.mark.unit
    def test_numpy_integers_match_python_integers(self):
        assert substream_seed(3, "sample", np.int64(4)) == substream_seed(3, "sample", 4)

    @pytest.mark.unit
    def test_seed_range(self):
        for i in range(100):
            assert 0 <= substream_seed(i, "train") < 2 ** 63

    @pytest.mark.unit
    def test_generators_are_reproducible(self):
        a = torch.rand(5, generator=make_generator(9))
        b = torch.rand(5, generator=make_generator(9))
        assert torch.equal(a, b)
        assert make_numpy_rng(9).integers(0, 100) == make_numpy_rng(9).integers(0, 100)

    @pytest.mark.unit
    def test_resolve_generator(self):
        explicit = make_generator(1)
        assert resolve_generator(explicit, seed=2) is explicit
        assert resolve_generator(None) is None
        assert torch.equal(torch.rand(3, generator=resolve_generator(None, seed=2)),
                           torch.rand(3, generator=make_generator(2)))


class TestImageIo:

    @pytest.mark.critical
    def test_png_round_trip_within_quantization(self, tmp_path):
        image = torch.rand(3, 8, 16, generator=make_generator(0)) * 2 - 1
        path = save_image(str(tmp_path / "nested" / "image.png"), image)
        loaded = load_image(path)
        assert loaded.shape == image.shape
        assert float((loaded - image).abs().max()) <= 0.5 / 127.5 + 1e-6

    @pytest.mark.unit
    def test_grayscale_round_trip(self, tmp_path):
        image = torch.linspace(-1, 1, 32).reshape(1, 4, 8)
        path = save_image(str(tmp_path / "gray.png"), image)
        assert load_image(path, channels=1).shape == (1, 4, 8)

    @pytest.mark.unit
    def test_uint8_mapping_endpoints(self):
        array = to_uint8(torch.tensor([[[-1.0, 0.0, 1.0, 5.0]]]))
        assert array[0, :, 0].tolist() == [0, 128, 255, 255]
        assert torch.allclose(from_uint8(np.array([[0, 255]], dtype=np.uint8)), torch.tensor([[[-1.0, 1.0]]]))

    @pytest.mark.negative
    def test_missing_image_raises(self, tmp_path):
        with pytest.raises(DatasetIOError) as excinfo:
            load_image(str(tmp_path / "absent.png"))
        assert "absent.png" in str(excinfo.value)

    @pytest.mark.negative
    def test_retry_gives_up_with_dataset_error(self, tmp_path):
        attempts = []

        @retry_on_failure(max_attempts=3, delay=0.0)
        def always_fails(path):
            attempts.append(path)
            raise OSError("disk full")

        with pytest.raises(DatasetIOError):
            always_fails(str(tmp_path / "x.png"))
        assert len(attempts) == 3

    @pytest.mark.unit
    @pytest.mark.parametrize("name, expected", [
        ("word 01", "word_01"),
        ("a/b\\c", "a_b_c"),
        ("  lead", "lead"),
    ])
    def test_clean_filename(self, name, expected):
        assert clean_filename(name) == expected

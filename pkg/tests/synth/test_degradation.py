"""
Degradation Tests for the JointSR Project
Individual operations, regime sampling, determinism and output contracts.
"""

import numpy as np
import pytest
import torch

from synth.degradation import (
    DegradeRegime, DegradeSpec, add_gaussian_noise, bicubic_resize, block_quantize, degrade, gaussian_blur,
    quantization_table,
)
from utils.exceptions import ConfigError
from utils.seeding import make_generator, make_numpy_rng


def random_hr(seed=0, size=(32, 128)):
    return torch.rand(3, *size, generator=make_generator(seed)) * 2 - 1


class TestOperations:

    @pytest.fixture(autouse=True)
    def setup(self):
        self.image = random_hr().permute(1, 2, 0).numpy().astype(np.float64)

    @pytest.mark.unit
    def test_zero_sigma_blur_is_identity(self):
        assert gaussian_blur(self.image, 0.0) is self.image

    @pytest.mark.unit
    def test_blur_preserves_constant_image(self):
        constant = np.full((16, 16, 3), 0.25)
        assert np.allclose(gaussian_blur(constant, 1.5), constant)

    @pytest.mark.unit
    def test_blur_reduces_variance(self):
        assert gaussian_blur(self.image, 1.0).std() < self.image.std()

    @pytest.mark.unit
    def test_noise_stays_in_range(self):
        noisy = add_gaussian_noise(self.image, 0.5, make_numpy_rng(0))
        assert noisy.min() >= -1.0 and noisy.max() <= 1.0
        assert not np.array_equal(noisy, self.image)

    @pytest.mark.unit
    def test_lossless_quality_is_identity(self):
        assert block_quantize(self.image, 100) is self.image

    @pytest.mark.unit
    def test_quantization_error_grows_as_quality_drops(self):
        errors = [np.abs(block_quantize(self.image, q) - self.image).mean() for q in (95, 60, 20)]
        assert errors[0] < errors[1] < errors[2]

    @pytest.mark.edge_case
    def test_quantize_handles_partial_blocks(self):
        image = self.image[:13, :21]
        out = block_quantize(image, 50)
        assert out.shape == image.shape

    @pytest.mark.unit
    def test_quantization_table_at_fifty_is_base_table(self):
        table = quantization_table(50)
        assert table[0, 0] == 16 and table[7, 7] == 99
        assert quantization_table(1).min() >= quantization_table(90).max() / 10

    @pytest.mark.unit
    def test_bicubic_resize_shapes(self):
        image = random_hr()
        assert bicubic_resize(image, (8, 32)).shape == (3, 8, 32)
        assert bicubic_resize(image.unsqueeze(0), (16, 64)).shape == (1, 3, 16, 64)


class TestDegrade:

    @pytest.fixture(autouse=True)
    def setup(self):
        self.hr = random_hr(1)
        self.spec = DegradeSpec()

    @pytest.mark.critical
    @pytest.mark.parametrize("scale", [2, 4])
    def test_output_contract(self, scale):
        lr = degrade(self.hr, DegradeSpec(scale=scale), seed=0)
        assert lr.shape == (3, 32 // scale, 128 // scale)
        assert lr.dtype == torch.float32
        assert float(lr.min()) >= -1.0 and float(lr.max()) <= 1.0

    @pytest.mark.critical
    def test_deterministic_given_seed(self):
        assert torch.equal(degrade(self.hr, self.spec, seed=3), degrade(self.hr, self.spec, seed=3))
        assert not torch.equal(degrade(self.hr, self.spec, seed=3), degrade(self.hr, self.spec, seed=4))

    @pytest.mark.unit
    def test_spec_seed_is_default(self):
        spec = DegradeSpec(seed=9)
        assert torch.equal(degrade(self.hr, spec), degrade(self.hr, spec, seed=9))

    @pytest.mark.critical
    def test_identity_spec_is_plain_bicubic(self):
        lr = degrade(self.hr, DegradeSpec.identity(scale=4), seed=0)
        expected = bicubic_resize(self.hr.to(torch.float64), (8, 32)).to(torch.float32)
        assert torch.allclose(lr, expected, atol=1e-6)

    @pytest.mark.statistical
    def test_regimes_are_equally_likely(self):
        hr = random_hr(2, size=(8, 16))
        regimes = [degrade(hr, self.spec, seed=i, return_trace=True)[1].regime for i in range(1000)]
        assert regimes.count("severe") / len(regimes) == pytest.approx(0.5, abs=0.05)

    @pytest.mark.unit
    def test_trace_parameters_lie_in_regime_ranges(self):
        hr = random_hr(3, size=(8, 16))
        for i in range(50):
            _, trace = degrade(hr, self.spec, seed=i, return_trace=True)
            regime = self.spec.severe if trace.regime == "severe" else self.spec.mild
            assert regime.blur_sigma[0] <= trace.blur_sigma <= regime.blur_sigma[1]
            assert regime.noise_std[0] <= trace.noise_std <= regime.noise_std[1]
            assert regime.quality[0] <= trace.quality <= regime.quality[1]
            assert sorted(trace.order) == sorted(["blur", "noise", "quantize", "downsample"])

    @pytest.mark.unit
    def test_fixed_order_without_shuffle(self):
        spec = DegradeSpec(shuffle_order=False)
        _, trace = degrade(self.hr, spec, seed=0, return_trace=True)
        assert trace.order == ["blur", "noise", "quantize", "downsample"]

    @pytest.mark.unit
    def test_severe_regime_loses_more_detail(self):
        mild_only = DegradeSpec(severe_prob=0.0)
        severe_only = DegradeSpec(severe_prob=1.0)
        reference = bicubic_resize(self.hr, (8, 32))
        mild_error = np.mean([float((degrade(self.hr, mild_only, seed=i) - reference).abs().mean())
                              for i in range(10)])
        severe_error = np.mean([float((degrade(self.hr, severe_only, seed=i) - reference).abs().mean())
                                for i in range(10)])
        assert severe_error > mild_error

    @pytest.mark.negative
    def test_indivisible_size_raises(self):
        with pytest.raises(ConfigError):
            degrade(random_hr(size=(30, 128)), self.spec, seed=0)

    @pytest.mark.negative
    @pytest.mark.parametrize("kwargs", [{"scale": 3}, {"severe_prob": 1.5}])
    def test_invalid_spec_raises(self, kwargs):
        with pytest.raises(ConfigError):
            DegradeSpec(**kwargs)

    @pytest.mark.negative
    @pytest.mark.parametrize("kwargs", [{"blur_sigma": (1.0, 0.5)}, {"noise_std": (0.0, 2.0)}, {"quality": (0, 50)}])
    def test_invalid_regime_raises(self, kwargs):
        with pytest.raises(ConfigError):
            DegradeRegime(**kwargs)

import numpy as np
import pytest

from umsnet.errors import ConfigError, DimensionError
from umsnet.lsr import Downsample, LsrBlock, LsrStack, StageConfig
from umsnet.rng import Rng
from umsnet.tensor import Parameter, Tensor, grad_check, tsum


class TestLsrBlock:
    def test_shape_preserving(self):
        block = LsrBlock(4, rng=Rng(0)).eval()
        out = block.forward(Tensor(Rng(1).normal(size=(2, 4, 10)).astype(np.float32)))
        assert out.shape == (2, 4, 10)

    def test_zero_layer_scale_is_bitwise_identity(self):
        rng = Rng(2)
        block = LsrBlock(6, layer_scale_init=0.0, rng=rng).eval()
        x = rng.normal(size=(3, 6, 12)).astype(np.float32)
        np.testing.assert_array_equal(block.forward(Tensor(x)).data, x)

    def test_near_identity_at_init(self):
        # default layer-scale 1e-6 keeps the residual contribution tiny
        rng = Rng(3)
        block = LsrBlock(4, rng=rng).eval()
        x = rng.normal(size=(2, 4, 8)).astype(np.float32)
        out = block.forward(Tensor(x)).data
        assert np.abs(out - x).max() < 1e-4

    def test_train_mode_requires_rng(self):
        block = LsrBlock(2, rng=Rng(0))
        with pytest.raises(ConfigError):
            block.forward(Tensor(np.zeros((1, 2, 8), dtype=np.float32)))

    def test_stochastic_depth_drops_whole_samples(self):
        rng = Rng(4)
        block = LsrBlock(2, survival_prob=0.5, layer_scale_init=1.0, rng=rng)
        x = rng.normal(size=(64, 2, 8)).astype(np.float32)
        out = block.forward(Tensor(x), Rng(99)).data
        changed = np.any(out != x, axis=(1, 2))
        kept = changed.sum()
        # per-sample all-or-nothing: for dropped samples output == input exactly
        np.testing.assert_array_equal(out[~changed], x[~changed])
        assert 0 < kept < 64

    def test_eval_keeps_full_residual_by_default(self):
        rng = Rng(5)
        block = LsrBlock(2, survival_prob=0.5, layer_scale_init=1.0, rng=rng)
        x = rng.normal(size=(4, 2, 8)).astype(np.float32)
        full = block.eval().forward(Tensor(x)).data
        block.rescale_at_eval = True
        scaled = block.forward(Tensor(x)).data
        np.testing.assert_allclose(scaled - x, (full - x) * 0.5, atol=1e-6)

    def test_invalid_survival_prob(self):
        with pytest.raises(ConfigError):
            LsrBlock(2, survival_prob=0.0)
        with pytest.raises(ConfigError):
            LsrBlock(2, survival_prob=1.5)

    def test_channel_mismatch(self):
        block = LsrBlock(4, rng=Rng(0))
        with pytest.raises(DimensionError):
            block.forward(Tensor(np.zeros((1, 3, 8), dtype=np.float32)), Rng(0))

    def test_grad_check(self):
        rng = Rng(6)
        block = LsrBlock(3, layer_scale_init=0.5, rng=rng, dtype=np.float64).eval()
        x = Parameter(rng.normal(size=(2, 3, 8)))
        err = grad_check(lambda: tsum(block.forward(x) ** 2), [x] + block.parameters())
        assert err < 1e-5

    def test_layer_norm_variant_grad_check(self):
        rng = Rng(7)
        block = LsrBlock(3, layer_scale_init=0.5, norm="layer", rng=rng,
                         dtype=np.float64).eval()
        x = Parameter(rng.normal(size=(2, 3, 8)))
        err = grad_check(lambda: tsum(block.forward(x) ** 2), [x] + block.parameters())
        assert err < 1e-5

    def test_parameter_count_formula(self):
        # dwconv C*3 + bias C, norm 2C, expand C*4C + 4C, project 4C*C + C, scale C
        c = 8
        block = LsrBlock(c, rng=Rng(0))
        total = sum(p.data.size for p in block.parameters())
        assert total == (3 * c + c) + 2 * c + (4 * c * c + 4 * c) + (4 * c * c + c) + c


class TestDownsample:
    def test_halves_time_axis(self):
        ds = Downsample(2, 4, rng=Rng(0))
        out = ds.forward(Tensor(np.zeros((1, 2, 10), dtype=np.float32)))
        assert out.shape == (1, 4, 5)

    def test_rejects_odd_length(self):
        ds = Downsample(2, 4, rng=Rng(0))
        with pytest.raises(DimensionError):
            ds.forward(Tensor(np.zeros((1, 2, 9), dtype=np.float32)))


class TestStageConfig:
    def test_needs_four_stages(self):
        with pytest.raises(ConfigError):
            StageConfig(depths=[1, 1, 1], widths=[2, 2, 2, 2], input_channels=3)

    def test_positive_entries(self):
        with pytest.raises(ConfigError):
            StageConfig(depths=[1, 1, 0, 1], widths=[2, 2, 2, 2], input_channels=3)

    def test_num_blocks(self):
        cfg = StageConfig(depths=[2, 2, 6, 2], widths=[2, 4, 8, 16], input_channels=3)
        assert cfg.num_blocks == 12


class TestLsrStack:
    def make(self, depths=(2, 2, 2, 2), widths=(4, 4, 8, 8), channels=3, seed=0):
        cfg = StageConfig(depths=list(depths), widths=list(widths), input_channels=channels)
        return LsrStack(cfg, rng=Rng(seed))

    def test_output_geometry(self):
        stack = self.make().eval()
        out = stack.forward(Tensor(Rng(1).normal(size=(2, 3, 16)).astype(np.float32)))
        assert out.shape == (2, 8, 2)
        assert stack.out_length(16) == 2
        assert stack.out_channels == 8

    def test_length_must_be_multiple_of_8(self):
        stack = self.make()
        for bad in (0, 4, 12):
            with pytest.raises(ConfigError):
                stack.check_length(bad)
        stack.check_length(8)

    def test_survival_schedule_linear(self):
        stack = self.make()
        probs = [b.survival_prob for b in stack.blocks()]
        expected = [1.0 - 0.5 * i / 7 for i in range(8)]
        np.testing.assert_allclose(probs, expected, atol=1e-12)
        assert probs[0] == 1.0 and probs[-1] == 0.5

    def test_single_block_stack_survival(self):
        cfg = StageConfig(depths=[1, 1, 1, 1], widths=[2, 2, 2, 2], input_channels=1)
        probs = [b.survival_prob for b in LsrStack(cfg, rng=Rng(0)).blocks()]
        assert probs[0] == 1.0

    def test_block_count_matches_depths(self):
        stack = self.make(depths=(2, 2, 6, 2))
        assert len(list(stack.blocks())) == 12

    def test_eval_deterministic(self):
        stack = self.make().eval()
        x = Tensor(Rng(2).normal(size=(2, 3, 16)).astype(np.float32))
        np.testing.assert_array_equal(stack.forward(x).data, stack.forward(x).data)

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kanjibench.errors import InvalidArgument, InvalidSpec
from kanjibench.models import GANSpec, UNetSpec, VAESpec, build_model
from kanjibench.nn_core import (InitScheme, LayerSpec, ResidualBlock, ResidualBlockSpec, act,
                                apply_init, batch_norm, block_output_shape, conv, conv_transpose_x2,
                                count_parameters, group_norm, infer_output_shape, linear, max_pool,
                                module_parameter_count, sinusoidal_time_embedding, upsample,
                                xavier_bound, xavier_uniform_init)


class TestXavier:
    def test_bound_unit(self):
        assert xavier_bound(3, 3) == 1.0
        w = xavier_uniform_init(3, 3, (3, 3), seed=0)
        assert w.abs().max() <= 1.0

    def test_bound_half(self):
        assert xavier_bound(6, 6) == pytest.approx(math.sqrt(0.5), abs=1e-15)

    def test_sample_statistics(self):
        w = xavier_uniform_init(64, 64, (100_000,), seed=1)
        b = xavier_bound(64, 64)
        assert abs(float(w.mean())) < 0.01
        assert float(w.abs().max()) <= b
        # variance of U[-b, b] is b^2 / 3
        assert float(w.var()) == pytest.approx(b * b / 3, rel=0.02)

    def test_float32_cast_stays_in_bound(self):
        w = xavier_uniform_init(6, 6, (50_000,), seed=2, dtype=torch.float32)
        assert float(w.abs().max()) <= xavier_bound(6, 6)

    def test_seed_determinism(self):
        a = xavier_uniform_init(10, 20, (20, 10), seed=7)
        b = xavier_uniform_init(10, 20, (20, 10), seed=7)
        c = xavier_uniform_init(10, 20, (20, 10), seed=8)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    @pytest.mark.parametrize("fans", [(0, 3), (3, 0)])
    def test_zero_fan(self, fans):
        with pytest.raises(InvalidArgument):
            xavier_uniform_init(*fans, (2, 2), seed=0)

    def test_apply_init_respects_bound(self):
        net = torch.nn.Sequential(torch.nn.Linear(8, 4), torch.nn.Conv2d(2, 3, 3))
        apply_init(net, InitScheme("xavier-uniform", 3))
        assert net[0].weight.abs().max() <= xavier_bound(8, 4)
        assert net[1].weight.abs().max() <= xavier_bound(2 * 9, 3 * 9)
        assert torch.count_nonzero(net[0].bias) == 0


class TestCounting:
    def test_single_conv(self):
        assert count_parameters(conv(1, 1, 3)) == 10

    def test_linear(self):
        assert count_parameters(linear(64, 64)) == 4160

    def test_norms_and_parameter_free_layers(self):
        assert count_parameters(batch_norm(8)) == 16
        assert count_parameters(group_norm(8, 4)) == 16
        assert count_parameters([act("relu"), max_pool(), upsample()]) == 0

    def test_additive(self):
        a, b = conv(1, 4), conv(4, 8, stride=2)
        assert count_parameters([a, b]) == count_parameters(a) + count_parameters(b)

    def test_time_linear_counted(self):
        blk = ResidualBlockSpec((conv(4, 4),), time_embedding_dim=16)
        assert count_parameters(blk) == (4 * 4 * 9 + 4) + (16 * 4 + 4)

    @pytest.mark.parametrize("spec", [VAESpec(64, 16, 4), GANSpec(128, 16, 4), UNetSpec(16, 4)])
    def test_spec_count_matches_built_modules(self, spec):
        built = build_model(spec)
        mods = built if isinstance(built, tuple) else (built,)
        assert count_parameters(spec) == sum(module_parameter_count(m) for m in mods)

    def test_uncountable(self):
        with pytest.raises(InvalidSpec):
            count_parameters(3)


class TestTimeEmbedding:
    def test_zero_step(self):
        e = sinusoidal_time_embedding(0, 8)
        assert torch.all(e[0::2] == 0) and torch.all(e[1::2] == 1)

    def test_scalar_oracle(self):
        e = sinusoidal_time_embedding(1, 4)
        # independent evaluation: w_k = 10000^(-k / 2), k = 0, 1
        expected = [math.sin(1.0), math.cos(1.0), math.sin(10000 ** -0.5), math.cos(10000 ** -0.5)]
        assert e.tolist() == pytest.approx(expected, abs=1e-7)

    def test_odd_dim(self):
        with pytest.raises(InvalidArgument):
            sinusoidal_time_embedding(3, 7)

    def test_batch_matches_scalar(self):
        t = torch.tensor([0, 5, 63])
        batch = sinusoidal_time_embedding(t, 16)
        for i, step in enumerate(t.tolist()):
            assert torch.equal(batch[i], sinusoidal_time_embedding(step, 16))

    @pytest.mark.parametrize("shift", [2 * math.pi * 10000, 2 * math.pi * 10000 ** (63 / 64)])
    def test_no_collapse_at_lowest_frequency_period(self, shift):
        # at the model's width (128) a full period of the slowest pair leaves the others moved
        t = 3.0
        a = sinusoidal_time_embedding(t, 128)
        b = sinusoidal_time_embedding(t + shift, 128)
        assert not torch.allclose(a, b, atol=1e-3)

    @given(st.floats(0, 1e6), st.integers(1, 64).map(lambda k: 2 * k))
    @settings(max_examples=60, deadline=None)
    def test_bounded(self, t, dim):
        e = sinusoidal_time_embedding(t, dim)
        assert e.shape == (dim,)
        assert float(e.abs().max()) <= 1.0


class TestShapes:
    def test_strided_conv(self):
        assert infer_output_shape(conv(1, 8, 3, 2, 1), (1, 64, 64)) == (8, 32, 32)

    def test_transposed_doubling(self):
        assert infer_output_shape(conv_transpose_x2(8, 4), (8, 16, 16)) == (4, 32, 32)
        assert infer_output_shape(conv_transpose_x2(8, 4, kernel=1), (8, 16, 16)) == (4, 32, 32)

    def test_pool(self):
        assert infer_output_shape(max_pool(2), (3, 64, 64)) == (3, 32, 32)

    def test_linear_and_upsample(self):
        assert infer_output_shape(linear(10, 3), (10,)) == (3,)
        assert infer_output_shape(upsample(2), (5, 8, 8)) == (5, 16, 16)

    def test_channel_mismatch(self):
        with pytest.raises(InvalidSpec):
            infer_output_shape(conv(3, 8), (1, 16, 16))

    def test_block_path_mismatch(self):
        blk = ResidualBlockSpec((conv(4, 8, stride=2),), shortcut="identity", resample="down")
        with pytest.raises(InvalidSpec):
            block_output_shape(blk, (4, 16, 16))

    @given(st.integers(2, 6).map(lambda p: 2 ** p))
    @settings(max_examples=10, deadline=None)
    def test_doubling_for_any_power_of_two(self, h):
        assert infer_output_shape(conv_transpose_x2(2, 2), (2, h, h)) == (2, 2 * h, 2 * h)

    @pytest.mark.parametrize("spec", [VAESpec(64, 64), GANSpec(128, 64), UNetSpec(64)])
    def test_model_blocks_chain(self, spec):
        spec.validate()  # raises InvalidSpec if any block's paths disagree


class TestLayerInvariants:
    def test_groups_must_divide(self):
        with pytest.raises(InvalidSpec):
            group_norm(6, 4)

    def test_leaky_needs_slope(self):
        with pytest.raises(InvalidSpec):
            act("leaky-relu")
        assert act("leaky-relu", 0.2).slope == 0.2

    def test_non_positive_counts(self):
        with pytest.raises(InvalidSpec):
            LayerSpec("convolution", 0, 4, 3)


def test_residual_block_forward_shape_and_time():
    spec = ResidualBlockSpec((conv(4, 8, stride=2), group_norm(8), act("relu")),
                             shortcut=conv(4, 8, 1, 2, 0), resample="down", time_embedding_dim=6)
    blk = ResidualBlock(spec)
    x = torch.randn(2, 4, 8, 8)
    t0, t1 = torch.zeros(2, 6), torch.ones(2, 6)
    out = blk(x, t0)
    assert out.shape == (2, 8, 4, 4)
    assert not torch.equal(out, blk(x, t1))
    assert np.allclose(block_output_shape(spec, (4, 8, 8)), (8, 4, 4))

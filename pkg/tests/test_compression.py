import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormscan import constants as C
from stormscan.compression import (
    ABLATION_TABLE,
    CompressionSpec,
    apply_compression,
    compression_ratio,
    output_shape,
    ratio_table,
    round_percent,
    spatial_pool,
    temporal_pool,
    temporal_sample,
    token_budget_check,
)
from stormscan.tensor import ConfigError, Rng, TokenTensor, rng_fill


def video(t, n, d=3, seed=0):
    return TokenTensor(rng_fill(Rng(seed), (t, n, d), 1.0))


class TestSpec:
    def test_defaults_off(self):
        spec = CompressionSpec()
        assert spec.is_off and spec.label() == "none" and spec.factor == 1

    @pytest.mark.parametrize("kw", [dict(spatial_pool_p=2), dict(temporal_pool_k=0), dict(temporal_sample_s=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            CompressionSpec(**kw)

    def test_label(self):
        assert CompressionSpec(4, 4, 2).label() == "k=4,p=4,s=2"


class TestTemporalPool:
    def test_identity(self):
        x = video(5, 4)
        assert temporal_pool(x, 1) is x

    def test_frame_count(self):
        assert temporal_pool(video(32, 4), 4).frames == 8

    def test_hand_mean(self):
        x = TokenTensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
        assert temporal_pool(x, 4).data.ravel().tolist() == [2.5]

    def test_not_divisible(self):
        with pytest.raises(ConfigError):
            temporal_pool(video(10, 4), 4)

    def test_group_permutation_invariant(self):
        x = video(8, 4, seed=3)
        perm = [2, 0, 3, 1, 5, 7, 4, 6]
        a = temporal_pool(x, 4).data
        b = temporal_pool(TokenTensor(x.data[perm]), 4).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32))
    def test_conservation(self, groups, k, n, seed):
        x = video(groups * k, n, seed=seed)
        out = temporal_pool(x, k).data
        group_means = x.data.reshape(groups, k, n, -1).mean(axis=1)
        assert np.abs(out - group_means).max() <= C.POOL_TOL
        assert abs(out.sum() * k - x.data.sum()) <= C.POOL_TOL * max(1.0, np.abs(x.data).sum())


class TestSpatialPool:
    def test_token_count(self):
        assert spatial_pool(video(2, 256), 4).tokens_per_frame == 64

    def test_hand_mean(self):
        x = TokenTensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
        assert spatial_pool(x, 4).data.ravel().tolist() == [2.5]

    def test_window_is_square(self):
        # 4x4 grid, p=4: token 0 averages raw tokens 0, 1, 4, 5
        x = TokenTensor(np.arange(16.0).reshape(1, 16, 1))
        np.testing.assert_array_equal(spatial_pool(x, 4).data.ravel(), [2.5, 4.5, 10.5, 12.5])

    def test_constant(self):
        x = TokenTensor(np.full((3, 64, 2), 0.7))
        out = spatial_pool(x, 16)
        assert out.shape == (3, 4, 2)
        np.testing.assert_allclose(out.data, 0.7, rtol=1e-15)

    def test_explicit_grid(self):
        assert spatial_pool(video(1, 32), 4, grid=(4, 8)).tokens_per_frame == 8

    @pytest.mark.parametrize("p, n, grid", [(2, 16, None), (4, 12, None), (9, 16, (4, 4)), (4, 12, (3, 4))])
    def test_errors(self, p, n, grid):
        with pytest.raises(ConfigError):
            spatial_pool(video(1, n), p, grid)


class TestSample:
    def test_identity(self):
        x = video(3, 4)
        assert temporal_sample(x, 1) is x

    def test_half(self):
        x = video(12, 4)
        assert temporal_sample(x, 2).frames == 6

    def test_indices(self):
        x = video(10, 4, seed=2)
        out = temporal_sample(x, 4)
        assert out.frames == 3
        for j, t in enumerate((0, 4, 8)):
            assert np.array_equal(out.data[j], x.data[t])

    def test_projection(self):
        x = video(9, 4)
        once = temporal_sample(x, 3)
        assert np.array_equal(temporal_sample(once, 1).data, once.data)

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            temporal_sample(video(3, 4), 0)


class TestRatio:
    @pytest.mark.parametrize("spec, expected", [(CompressionSpec(4), 25.0), (CompressionSpec(4, 1, 2), 12.5), (CompressionSpec(4, 4, 2), 3.13)])
    def test_examples(self, spec, expected):
        assert compression_ratio(spec) == expected

    def test_half_up(self):
        assert round_percent(3.125) == 3.13 and round_percent(0.005) == 0.01 and round_percent(6.25) == 6.25

    def test_table(self):
        ratios = [r for _, _, r in ratio_table()]
        assert ratios == [100.0, 50.0, 25.0, 25.0, 12.5, 12.5, 6.25, 3.13]
        assert set(ratios) == {100, 50, 25, 12.5, 6.25, 3.13}
        assert len(ratio_table()) == len(ABLATION_TABLE)


class TestBudget:
    def test_32_frames(self):
        rep = token_budget_check(32, 256, CompressionSpec(), 8192)
        assert rep.total_tokens == 8192 and rep.within_budget and rep.ratio_percent == 100.0

    def test_128_frames_pooled(self):
        rep = token_budget_check(128, 256, CompressionSpec(temporal_pool_k=4), 8192)
        assert (rep.frames_out, rep.tokens_out, rep.total_tokens) == (32, 256, 8192) and rep.within_budget

    def test_violation(self):
        rep = token_budget_check(33, 256, CompressionSpec(), 8192)
        assert rep.total_tokens == 8448 and not rep.within_budget

    def test_propagates_errors(self):
        with pytest.raises(ConfigError):
            token_budget_check(30, 256, CompressionSpec(temporal_pool_k=4), 8192)


class TestApply:
    def test_off(self):
        x = video(4, 16)
        assert np.array_equal(apply_compression(x, CompressionSpec()).data, x.data)

    def test_combined_shape(self):
        out = apply_compression(video(32, 256, d=2), CompressionSpec(4, 4, 2))
        assert out.shape == (4, 64, 2)

    def test_constant(self):
        x = TokenTensor(np.full((8, 16, 2), -1.25))
        out = apply_compression(x, CompressionSpec(2, 4, 2))
        assert out.shape == (2, 4, 2)
        np.testing.assert_allclose(out.data, -1.25, rtol=1e-15)

    def test_shape_law_random_grid(self):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 120:
            k, s = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            q = int(rng.integers(1, 4))
            t = k * int(rng.integers(1, 5))
            side = q * int(rng.integers(1, 4))
            spec = CompressionSpec(k, q * q, s)
            x = video(t, side * side, d=2, seed=checked)
            out = apply_compression(x, spec)
            expected = (math.ceil((t // k) / s), side * side // (q * q), 2)
            rep = token_budget_check(t, side * side, spec, 10**9)
            assert out.shape == expected
            assert (rep.frames_out, rep.tokens_out) == expected[:2] == output_shape(t, side * side, spec)
            assert rep.total_tokens == expected[0] * expected[1]
            checked += 1

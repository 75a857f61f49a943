"""Softmax attention, RoPE, and sliding-window references."""

import numpy as np
import pytest

from convgla.baselines import (
    AttnConfig,
    rope_apply,
    sliding_window_attention,
    softmax_attention,
    softmax_prefill_blocked,
)
from convgla.errors import ConfigError
from convgla.tensor import Tensor, grad_check


def rand_qkv(rng, shape):
    return tuple(rng.standard_normal(shape) for _ in range(3))


class TestSoftmaxAttention:
    def test_single_position_returns_v(self):
        rng = np.random.default_rng(0)
        q, k, v = rand_qkv(rng, (1, 8))
        np.testing.assert_array_equal(softmax_attention(q, k, v).data, v)

    def test_equal_scores_average(self):
        # identical keys -> uniform weights -> mean of values
        q = np.ones((2, 4))
        k = np.ones((2, 4))
        v = np.array([[0.0, 2.0, 4.0, 6.0], [2.0, 0.0, 0.0, 0.0]])
        out = softmax_attention(q, k, v).data
        np.testing.assert_allclose(out[1], v.mean(axis=0), atol=1e-15)

    def test_causal_exact(self):
        # outputs at t must be bit-identical when tokens > t change
        rng = np.random.default_rng(1)
        q, k, v = rand_qkv(rng, (2, 3, 10, 6))
        base = softmax_attention(q, k, v).data
        k2, v2 = k.copy(), v.copy()
        k2[..., 5:, :] = rng.standard_normal((2, 3, 5, 6)) * 7
        v2[..., 5:, :] = rng.standard_normal((2, 3, 5, 6)) * 7
        pert = softmax_attention(q, k2, v2).data
        np.testing.assert_array_equal(base[..., :5, :], pert[..., :5, :])

    def test_default_scale_is_rsqrt_d(self):
        rng = np.random.default_rng(2)
        q, k, v = rand_qkv(rng, (5, 16))
        np.testing.assert_array_equal(
            softmax_attention(q, k, v).data,
            softmax_attention(q, k, v, scale=0.25).data,
        )

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        k, v = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        w = rng.standard_normal((4, 3))
        err = grad_check(
            lambda q: (softmax_attention(q, Tensor(k), Tensor(v)) * Tensor(w)).sum(),
            Tensor(rng.standard_normal((4, 3))),
        )
        assert err < 1e-4


class TestRope:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 8))
        np.testing.assert_allclose(rope_apply(x).data, x, atol=1e-15)

    def test_norm_preserved(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 100, 16))
        out = rope_apply(x).data
        np.testing.assert_allclose(
            np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12
        )

    def test_dot_product_depends_on_relative_position_only(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal(12)
        k = rng.standard_normal(12)
        for m, n, s in [(0, 3, 11), (5, 2, 40), (7, 7, 100)]:
            a = rope_apply(np.stack([q, k]), pos=np.array([m, n])).data
            b = rope_apply(np.stack([q, k]), pos=np.array([m + s, n + s])).data
            assert abs(a[0] @ a[1] - b[0] @ b[1]) < 1e-10

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((5, 6))
        err = grad_check(
            lambda x: (rope_apply(x) * Tensor(w)).sum(),
            Tensor(rng.standard_normal((5, 6))),
        )
        assert err < 1e-4


class TestSlidingWindow:
    def test_matches_full_attention_when_window_covers_all(self):
        rng = np.random.default_rng(0)
        q, k, v = rand_qkv(rng, (17, 8))
        full = softmax_attention(q, k, v).data
        for w in (17, 30, 1000):
            np.testing.assert_allclose(sliding_window_attention(q, k, v, w), full, atol=1e-12)

    def test_window_one_returns_v(self):
        rng = np.random.default_rng(1)
        q, k, v = rand_qkv(rng, (9, 4))
        np.testing.assert_allclose(sliding_window_attention(q, k, v, 1), v, atol=1e-15)

    def test_locality_exact(self):
        # out[t] must ignore keys/values older than t-window+1, bit-exactly
        rng = np.random.default_rng(2)
        q, k, v = rand_qkv(rng, (20, 5))
        base = sliding_window_attention(q, k, v, 4)
        k2, v2 = k.copy(), v.copy()
        k2[:10] = rng.standard_normal((10, 5)) * 9  # only affects t < 10+4
        v2[:10] = rng.standard_normal((10, 5)) * 9
        pert = sliding_window_attention(q, k2, v2, 4)
        np.testing.assert_array_equal(base[13:], pert[13:])

    def test_rejects_bad_window(self):
        with pytest.raises(ConfigError):
            sliding_window_attention(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), 0)

    def test_batched_leading_dims(self):
        rng = np.random.default_rng(3)
        q, k, v = rand_qkv(rng, (2, 3, 11, 4))
        out = sliding_window_attention(q, k, v, 5)
        np.testing.assert_array_equal(out[1, 2], sliding_window_attention(q[1, 2], k[1, 2], v[1, 2], 5))


class TestBlockedPrefill:
    def test_matches_softmax_attention(self):
        rng = np.random.default_rng(0)
        q, k, v = rand_qkv(rng, (64, 8))
        full = softmax_attention(q, k, v).data
        for block in (16, 17, 64, 100):
            np.testing.assert_allclose(softmax_prefill_blocked(q, k, v, block=block), full, atol=1e-12)


class TestAttnConfig:
    def test_d_head(self):
        assert AttnConfig(d_model=64, n_heads=4).d_head == 16

    def test_validation(self):
        with pytest.raises(ConfigError):
            AttnConfig(d_model=10, n_heads=3)
        with pytest.raises(ConfigError):
            AttnConfig(d_model=8, n_heads=2, window=0)

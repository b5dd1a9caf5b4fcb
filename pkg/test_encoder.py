"""Tests for the short-term and long-term encoders."""

import numpy as np
import pytest

from src.model.diffmath import constant, leaf
from src.model.encoder import (
    EncoderConfigError,
    EncoderInput,
    EncoderParams,
    EncoderShapeError,
    InputTooShortError,
    encode_roi,
    long_term_encode,
    positional_encoding,
    self_attention,
    short_term_encode,
)


def make_params(rng, k=3, filters=4, d_k=4, bias=0.0):
    return EncoderParams(
        conv_weight=leaf(rng.standard_normal((3 * k, filters))),
        conv_bias=leaf(np.full((1, filters), bias)),
        w_q=leaf(rng.standard_normal((filters, d_k))),
        w_k=leaf(rng.standard_normal((filters, d_k))),
        w_v=leaf(rng.standard_normal((filters, d_k))),
    )


def zeros_input(length):
    return EncoderInput(np.zeros(length), np.zeros(length), np.zeros(length))


class TestEncoderInput:
    def test_from_grid_normalizes_time_and_zero_fills(self):
        grid = np.array([2.0, 3.0, 6.0])
        inp = EncoderInput.from_grid(grid, np.array([1.0, np.nan, 4.0]), np.array([1, 0, 1]))
        np.testing.assert_allclose(inp.times, [0.0, 0.25, 1.0])
        np.testing.assert_array_equal(inp.values, [1.0, 0.0, 4.0])
        assert inp.channels.shape == (3, 3)

    def test_rejects_non_binary_mask(self):
        with pytest.raises(EncoderShapeError):
            EncoderInput(np.zeros(3), np.array([0, 0.5, 1]), np.arange(3.0))

    def test_rejects_unequal_lengths(self):
        with pytest.raises(EncoderShapeError):
            EncoderInput(np.zeros(3), np.ones(2), np.arange(3.0))


class TestShortTermEncoder:
    def test_zero_input_zero_bias(self, rng):
        out = short_term_encode(zeros_input(6), make_params(rng))
        np.testing.assert_array_equal(out.value, np.zeros((6, 4)))

    def test_negative_bias_rectified(self, rng):
        out = short_term_encode(zeros_input(6), make_params(rng, bias=-1.0))
        np.testing.assert_array_equal(out.value, np.zeros((6, 4)))

    def test_matches_direct_convolution(self, rng):
        k, length = 3, 8
        grid = np.arange(length, dtype=np.float64)
        inp = EncoderInput.from_grid(grid, 0.5 * grid - 1.0, np.ones(length))
        params = make_params(rng, k=k, filters=1)
        out = short_term_encode(inp, params).value[:, 0]

        taps = params.conv_weight.value[:, 0].reshape(3, k)
        padded = np.pad(inp.channels, ((0, 0), (1, 1)))
        expected = np.array([
            max(0.0, float((padded[:, t:t + k] * taps).sum()) + params.conv_bias.value[0, 0])
            for t in range(length)
        ])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_too_short(self, rng):
        with pytest.raises(InputTooShortError):
            short_term_encode(zeros_input(3), make_params(rng, k=4))


class TestPositionalEncoding:
    def test_position_zero(self):
        pe = positional_encoding(3, 8)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)

    def test_second_row(self):
        pe = positional_encoding(2, 2)
        np.testing.assert_allclose(pe[1], [0.841471, 0.540302], atol=1e-6)

    def test_range(self):
        pe = positional_encoding(500, 64)
        assert np.all(np.abs(pe) <= 1.0)

    def test_odd_width(self):
        with pytest.raises(EncoderConfigError):
            positional_encoding(4, 3)


class TestSelfAttention:
    def test_single_step_returns_value_row(self, rng):
        params = make_params(rng)
        features = rng.standard_normal((1, 4))
        out, weights = self_attention(constant(features), params)
        np.testing.assert_allclose(weights.value, [[1.0]])
        np.testing.assert_allclose(out.value, features @ params.w_v.value)

    def test_identical_rows(self, rng):
        params = make_params(rng)
        features = np.tile(rng.standard_normal((1, 4)), (5, 1))
        out, _ = self_attention(constant(features), params)
        np.testing.assert_allclose(out.value, np.tile(out.value[0], (5, 1)), atol=1e-12)
        pooled = long_term_encode(constant(features), params, use_positional=False)
        np.testing.assert_allclose(pooled.value[0], out.value[0], atol=1e-12)

    def test_two_steps_hand_oracle(self):
        params = EncoderParams(
            conv_weight=leaf(np.zeros((3, 2))),
            conv_bias=leaf(np.zeros((1, 2))),
            w_q=leaf(np.eye(2)),
            w_k=leaf(np.eye(2)),
            w_v=leaf([[1.0, 2.0], [3.0, 4.0]]),
        )
        f = np.array([[1.0, 0.0], [0.0, 2.0]])
        out, weights = self_attention(constant(f), params)

        scores = f @ f.T / np.sqrt(2)
        e = np.exp(scores)
        expected_weights = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(weights.value, expected_weights, atol=1e-12)
        np.testing.assert_allclose(out.value, expected_weights @ (f @ params.w_v.value), atol=1e-12)

    def test_rows_are_stochastic(self, rng):
        _, weights = self_attention(constant(rng.standard_normal((9, 4)) * 3), make_params(rng))
        np.testing.assert_allclose(weights.value.sum(axis=1), 1.0, atol=1e-12)

    def test_width_mismatch(self, rng):
        with pytest.raises(EncoderShapeError):
            self_attention(constant(rng.standard_normal((4, 5))), make_params(rng))

    def test_projection_linearity(self, rng):
        params = make_params(rng)
        f = rng.standard_normal((6, 4))
        c = 2.5
        q1 = f @ params.w_q.value
        q2 = (c * f) @ (params.w_q.value / c)
        np.testing.assert_allclose(q1, q2, atol=1e-12)

    def test_time_permutation_symmetry_without_positions(self, rng):
        params = make_params(rng)
        f = rng.standard_normal((6, 4))
        perm = rng.permutation(6)
        out, _ = self_attention(constant(f), params)
        permuted, _ = self_attention(constant(f[perm]), params)
        np.testing.assert_allclose(permuted.value, out.value[perm], atol=1e-12)

        pooled = long_term_encode(constant(f), params, use_positional=False).value
        pooled_perm = long_term_encode(constant(f[perm]), params, use_positional=False).value
        np.testing.assert_allclose(pooled_perm, pooled, atol=1e-12)

    def test_positions_break_permutation_symmetry(self, rng):
        params = make_params(rng)
        f = rng.standard_normal((6, 4))
        perm = np.array([5, 4, 3, 2, 1, 0])
        pooled = long_term_encode(constant(f), params).value
        pooled_perm = long_term_encode(constant(f[perm]), params).value
        assert not np.allclose(pooled, pooled_perm)


def test_encode_roi_is_finite_and_deterministic(rng):
    params = make_params(rng, k=4)
    grid = np.arange(10, dtype=np.float64)
    inp = EncoderInput.from_grid(grid, np.sin(grid), np.ones(10))
    h1 = encode_roi(inp, params).value
    h2 = encode_roi(inp, params).value
    assert h1.shape == (1, 4)
    assert np.isfinite(h1).all()
    np.testing.assert_array_equal(h1, h2)

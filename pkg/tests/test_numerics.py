import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spartan.numerics import (
    ParameterError,
    ShapeError,
    gelu,
    gelu_cached,
    gelu_grad,
    gelu_grad_cached,
    layer_norm,
    make_rng,
    matvec,
    sample_gaussian,
    softmax_rows,
    softmax_stable,
    topk_indices,
    topk_rows,
)

finite_logits = st.lists(
    st.floats(min_value=-50, max_value=50, allow_nan=False), min_size=1, max_size=32
).map(np.asarray)


def softmax_mpmath(logits, dps=50):
    """High-precision softmax oracle."""
    with mpmath.workdps(dps):
        exps = [mpmath.exp(mpmath.mpf(float(v))) for v in logits]
        total = mpmath.fsum(exps)
        return np.array([float(e / total) for e in exps])


def topk_bruteforce(p, k):
    """Full-sort oracle: sort by (-value, index), take k, return ascending."""
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))[:k]
    return sorted(order)


class TestMatvec:
    def test_identity(self):
        assert np.array_equal(matvec(np.eye(3), np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_zero_matrix_annihilates(self):
        assert np.array_equal(matvec(np.zeros((2, 3)), np.array([4.0, -1.0, 7.0])), [0.0, 0.0])

    def test_hand_expansion(self):
        m = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        assert np.array_equal(matvec(m, np.array([2.0, 0.0])), [2.0, 0.0, -2.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matvec(np.zeros((2, 3)), np.zeros(4))

    def test_matches_scalar_loop_oracle(self):
        rng = make_rng(5)
        for _ in range(10):
            m = rng.normal(size=(16, 16))
            v = rng.normal(size=16)
            expect = np.array([sum(m[i][j] * v[j] for j in range(16)) for i in range(16)])
            assert np.max(np.abs(matvec(m, v) - expect)) <= 1e-12


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        assert np.allclose(softmax_stable(np.zeros(4)), 0.25, atol=1e-15)

    def test_extreme_logits_do_not_overflow(self):
        out = softmax_stable(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        assert out[0] > 0.999

    def test_matches_high_precision_oracle(self):
        logits = np.array([2.0, 0.0, -2.0])
        expect = softmax_mpmath(logits)
        got = softmax_stable(logits)
        assert np.max(np.abs(got - expect)) <= 1e-12
        assert np.allclose(got, [0.8668, 0.1173, 0.0159], atol=5e-5)

    def test_empty_raises(self):
        with pytest.raises(ShapeError):
            softmax_stable(np.array([]))

    @given(finite_logits)
    def test_sums_to_one(self, logits):
        assert abs(softmax_stable(logits).sum() - 1.0) <= 1e-12

    @given(finite_logits, st.floats(min_value=-100, max_value=100))
    def test_shift_invariance(self, logits, shift):
        a = softmax_stable(logits)
        b = softmax_stable(logits + shift)
        assert np.max(np.abs(a - b)) <= 1e-12

    @given(finite_logits)
    def test_order_preserving(self, logits):
        # gaps below float64's exp resolution produce equal outputs, so only
        # meaningfully separated logits are expected to stay strictly ordered
        out = softmax_stable(logits)
        for i in range(len(logits)):
            for j in range(len(logits)):
                if logits[i] - logits[j] > 1e-9:
                    assert out[i] > out[j]

    def test_rows_variant_matches_vector_form(self):
        rng = make_rng(1)
        x = rng.normal(size=(7, 5))
        rows = softmax_rows(x.copy())
        for i in range(7):
            assert np.max(np.abs(rows[i] - softmax_stable(x[i]))) <= 1e-15


class TestTopK:
    def test_tie_break_lowest_index(self):
        assert topk_indices(np.array([0.25, 0.25, 0.25, 0.25]), 2).tolist() == [0, 1]

    def test_unique_max(self):
        assert topk_indices(np.array([0.1, 0.7, 0.2]), 1).tolist() == [1]

    def test_two_peaks(self):
        p = np.array([0.4, 0.1, 0.4, 0.1])
        assert topk_indices(p, 2).tolist() == topk_bruteforce(p, 2) == [0, 2]

    def test_k_equals_dim_returns_all(self):
        assert topk_indices(np.array([3.0, 1.0, 2.0]), 3).tolist() == [0, 1, 2]

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(ParameterError):
            topk_indices(np.ones(4), k)

    @given(st.data())
    @settings(max_examples=80)
    def test_matches_bruteforce_sort_oracle(self, data):
        dim = data.draw(st.integers(min_value=1, max_value=64))
        vals = data.draw(st.lists(
            st.floats(min_value=-10, max_value=10, allow_nan=False),
            min_size=dim, max_size=dim))
        k = data.draw(st.integers(min_value=1, max_value=dim))
        p = np.asarray(vals)
        assert topk_indices(p, k).tolist() == topk_bruteforce(p, k)

    def test_rows_variant_matches_vector_form(self):
        rng = make_rng(2)
        x = rng.normal(size=(20, 9))
        rows = topk_rows(x, 4)
        for i in range(20):
            assert rows[i].tolist() == topk_indices(x[i], 4).tolist()


class TestRng:
    def test_zero_stddev_gives_zeros(self):
        assert np.array_equal(sample_gaussian(make_rng(0), 3, 0.0), np.zeros(3))

    def test_fixed_seed_reproduces_sequence(self):
        a = sample_gaussian(make_rng(42), 100, 1.0)
        b = sample_gaussian(make_rng(42), 100, 1.0)
        assert np.array_equal(a, b)

    def test_moments_match_law_of_large_numbers(self):
        draws = sample_gaussian(make_rng(7), 10**5, 1.0)
        assert abs(draws.mean()) <= 0.02
        assert abs(draws.std() - 1.0) <= 0.02

    def test_invalid_args(self):
        with pytest.raises(ParameterError):
            sample_gaussian(make_rng(0), 0, 1.0)
        with pytest.raises(ParameterError):
            sample_gaussian(make_rng(0), 3, -1.0)


class TestNeuralOps:
    def test_gelu_grad_at_zero_is_half(self):
        assert gelu_grad(np.array([0.0]))[0] == pytest.approx(0.5, abs=1e-15)

    def test_gelu_cached_matches_plain(self):
        x = make_rng(3).normal(size=40)
        y, cdf = gelu_cached(x)
        assert np.allclose(y, gelu(x), atol=1e-15)
        assert np.allclose(gelu_grad_cached(x, cdf), gelu_grad(x), atol=1e-15)

    def test_gelu_grad_matches_finite_differences(self):
        x = make_rng(4).normal(size=20)
        h = 1e-6
        fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
        assert np.max(np.abs(gelu_grad(x) - fd)) <= 1e-8

    def test_layer_norm_normalizes(self):
        x = make_rng(5).normal(size=(6, 32)) * 3 + 1
        out, _ = layer_norm(x, np.ones(32), np.zeros(32))
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.std(axis=-1), 1.0, atol=1e-3)  # eps-limited

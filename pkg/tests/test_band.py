"""Band kernel tests against dense oracles and finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecross.band import (
    MASKED,
    BandMatrix,
    BandShapeError,
    OpCounter,
    band_pv,
    band_pv_backward,
    band_qk,
    band_qk_backward,
    band_to_dense,
    band_validity,
    dense_band_oracle,
    naive_band_pv,
    naive_band_qk,
)


def random_band(rng, s, w, target_len, h=None):
    data = rng.normal(size=(s, 2 * w + 1))
    data[~band_validity(s, w, target_len)] = 0.0
    return BandMatrix(data, w, target_len)


def rel_err(a, b):
    scale = max(np.max(np.abs(b)), 1e-300)
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale


class TestBandQK:
    def test_identity_window_zero_is_diagonal_of_ones(self):
        eye = np.eye(3)
        band = band_qk(eye, eye, 0)
        np.testing.assert_array_equal(band.data, np.ones((3, 1)))

    def test_window_covering_sequence_equals_full_matmul(self):
        rng = np.random.default_rng(1)
        q, k = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
        band = band_qk(q, k, max(5, 7) - 1)
        dense = band_to_dense(band)
        # Bitwise equal to a dense product with the same reduction order,
        # and within float tolerance of the independent BLAS route.
        np.testing.assert_array_equal(dense, np.einsum("ih,th->it", q, k))
        np.testing.assert_allclose(dense, q @ k.T, rtol=0, atol=1e-13)

    def test_matches_dense_masked_oracle(self):
        rng = np.random.default_rng(2)
        q, k = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        band = band_qk(q, k, 2)
        oracle = dense_band_oracle(q, k, 2)
        np.testing.assert_allclose(band_to_dense(band), oracle.filled(0.0), rtol=0, atol=1e-14)

    def test_rejects_dim_mismatch(self):
        with pytest.raises(BandShapeError):
            band_qk(np.zeros((3, 4)), np.zeros((3, 5)), 1)

    def test_rejects_negative_or_overflowing_window(self):
        q = np.zeros((2, 2))
        with pytest.raises(BandShapeError):
            band_qk(q, q, -1)
        with pytest.raises(BandShapeError):
            band_qk(q, q, np.iinfo(np.intp).max)

    def test_cross_lengths(self):
        rng = np.random.default_rng(3)
        q, k = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
        band = band_qk(q, k, 1)
        dense = band_to_dense(band)
        expected = q @ k.T
        for i in range(6):
            for t in range(4):
                if abs(t - i) <= 1:
                    assert dense[i, t] == pytest.approx(expected[i, t], abs=1e-14)
                else:
                    assert dense[i, t] == 0.0


class TestBandPV:
    def test_identity_band_returns_values(self):
        valid = band_validity(4, 0, 4)
        p = BandMatrix(np.ones((4, 1)) * valid, 0, 4)
        v = np.random.default_rng(4).normal(size=(4, 3))
        np.testing.assert_array_equal(band_pv(p, v), v)

    def test_zero_band_annihilates(self):
        p = BandMatrix(np.zeros((5, 5)), 2, 5)
        v = np.random.default_rng(5).normal(size=(5, 2))
        np.testing.assert_array_equal(band_pv(p, v), np.zeros((5, 2)))

    def test_matches_expanded_product(self):
        rng = np.random.default_rng(6)
        p = random_band(rng, 10, 3, 10)
        v = rng.normal(size=(10, 5))
        np.testing.assert_allclose(band_pv(p, v), band_to_dense(p) @ v, atol=1e-13)

    def test_rejects_target_mismatch(self):
        p = random_band(np.random.default_rng(7), 6, 1, 6)
        with pytest.raises(BandShapeError):
            band_pv(p, np.zeros((5, 2)))


class TestBackward:
    def test_zero_gradients(self):
        rng = np.random.default_rng(8)
        q, k = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        zero = BandMatrix(np.zeros((5, 3)), 1, 5)
        gq, gk = band_qk_backward(zero, q, k, 1)
        assert not gq.any() and not gk.any()
        p = random_band(rng, 5, 1, 5)
        v = rng.normal(size=(5, 3))
        gp, gv = band_pv_backward(np.zeros((5, 3)), p, v)
        assert not gp.data.any() and not gv.any()

    def test_full_window_reduces_to_dense_backward(self):
        rng = np.random.default_rng(9)
        s, h = 5, 3
        q, k = rng.normal(size=(s, h)), rng.normal(size=(s, h))
        grad_dense = rng.normal(size=(s, s))
        band = BandMatrix.from_dense(grad_dense, s - 1)
        gq, gk = band_qk_backward(band, q, k, s - 1)
        np.testing.assert_allclose(gq, grad_dense @ k, atol=1e-12)
        np.testing.assert_allclose(gk, grad_dense.T @ q, atol=1e-12)

    def test_qk_backward_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        s, h, w = 6, 3, 1
        q, k = rng.normal(size=(s, h)), rng.normal(size=(s, h))

        def loss(qq, kk):
            return 0.5 * float(np.sum(band_qk(qq, kk, w).data ** 2))

        band = band_qk(q, k, w)
        gq, gk = band_qk_backward(band, q, k, w)  # dL/dA = A for L = 0.5 sum A^2
        eps = 1e-5
        for arr, grad in ((q, gq), (k, gk)):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                up = loss(q, k)
                arr[idx] = old - eps
                dn = loss(q, k)
                arr[idx] = old
                fd[idx] = (up - dn) / (2 * eps)
            assert rel_err(grad, fd) < 1e-6

    def test_pv_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        s, w, h = 7, 2, 4
        p = random_band(rng, s, w, s)
        v = rng.normal(size=(s, h))

        def loss():
            return 0.5 * float(np.sum(band_pv(p, v) ** 2))

        out = band_pv(p, v)
        gp, gv = band_pv_backward(out, p, v)
        eps = 1e-5
        fd_v = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + eps
            up = loss()
            v[idx] = old - eps
            dn = loss()
            v[idx] = old
            fd_v[idx] = (up - dn) / (2 * eps)
        assert rel_err(gv, fd_v) < 1e-6
        fd_p = np.zeros_like(p.data)
        for idx in zip(*np.nonzero(p.valid)):
            old = p.data[idx]
            p.data[idx] = old + eps
            up = loss()
            p.data[idx] = old - eps
            dn = loss()
            p.data[idx] = old
            fd_p[idx] = (up - dn) / (2 * eps)
        assert rel_err(gp.data, fd_p) < 1e-6

    def test_adjoint_identity(self):
        # <gradA, J dQ> == <J^T gradA, dQ> for the linearization in Q.
        rng = np.random.default_rng(12)
        s, h, w = 6, 4, 2
        q, k = rng.normal(size=(s, h)), rng.normal(size=(s, h))
        dq = rng.normal(size=(s, h))
        grad_band = random_band(rng, s, w, s)
        gq, _ = band_qk_backward(grad_band, q, k, w)
        eps = 1e-5
        up = band_qk(q + eps * dq, k, w).data
        dn = band_qk(q - eps * dq, k, w).data
        directional = float(np.sum(grad_band.data * (up - dn))) / (2 * eps)
        assert directional == pytest.approx(float(np.sum(gq * dq)), rel=1e-7)


class TestOracleAndDense:
    def test_oracle_full_window_has_no_sentinels(self):
        rng = np.random.default_rng(13)
        q, k = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        oracle = dense_band_oracle(q, k, 3)
        assert not oracle.mask.any()
        np.testing.assert_allclose(oracle.data, q @ k.T)

    def test_oracle_window_zero_identity(self):
        oracle = dense_band_oracle(np.eye(3), np.eye(3), 0)
        np.testing.assert_array_equal(np.ma.getdata(oracle)[~oracle.mask], np.ones(3))
        assert oracle.mask.sum() == 6

    def test_band_path_agrees_with_oracle_path(self):
        rng = np.random.default_rng(14)
        q, k = rng.normal(size=(9, 5)), rng.normal(size=(6, 5))
        band = band_qk(q, k, 2)
        oracle = dense_band_oracle(q, k, 2)
        np.testing.assert_allclose(band_to_dense(band, fill=0.0), oracle.filled(0.0), atol=1e-13)

    def test_to_dense_round_trip_preserves_in_band(self):
        rng = np.random.default_rng(15)
        dense = rng.normal(size=(6, 6))
        band = BandMatrix.from_dense(dense, 2)
        back = band_to_dense(band)
        for i in range(6):
            for t in range(6):
                if abs(t - i) <= 2:
                    assert back[i, t] == dense[i, t]
                else:
                    assert back[i, t] == 0.0

    def test_to_dense_window_zero_ones(self):
        band = BandMatrix(np.ones((4, 1)), 0, 4)
        np.testing.assert_array_equal(band_to_dense(band), np.eye(4))

    def test_to_dense_index_rule_brute_force(self):
        rng = np.random.default_rng(16)
        s, w, t = 7, 2, 5
        band = random_band(rng, s, w, t)
        dense = band_to_dense(band, fill=-7.0)
        # Independent index enumeration: slot j of row i lands at column i+j-w.
        expected = np.full((s, t), -7.0)
        for i in range(s):
            for j in range(2 * w + 1):
                col = i + j - w
                if 0 <= col < t:
                    expected[i, col] = band.data[i, j]
        np.testing.assert_array_equal(dense, expected)

    def test_masked_fill(self):
        band = BandMatrix(np.ones((3, 1)), 0, 3)
        dense = band_to_dense(band, fill=MASKED)
        assert isinstance(dense, np.ma.MaskedArray)
        assert dense.mask.sum() == 6


class TestInvariants:
    def test_storage_exactness(self):
        rng = np.random.default_rng(17)
        for s, w in ((1, 0), (5, 2), (9, 4)):
            band = random_band(rng, s, w, s)
            assert band.data.size == s * (2 * w + 1)
            assert band.data.nbytes == s * (2 * w + 1) * band.data.itemsize

    @settings(deadline=None, max_examples=60)
    @given(
        s=st.integers(1, 12),
        t=st.integers(1, 12),
        w1=st.integers(0, 5),
        extra=st.integers(0, 5),
        seed=st.integers(0, 2**16),
    )
    def test_window_monotonicity(self, s, t, w1, extra, seed):
        """A wider band restricted to the narrow band equals the narrow result."""
        rng = np.random.default_rng(seed)
        q, k = rng.normal(size=(s, 3)), rng.normal(size=(t, 3))
        w2 = w1 + extra
        narrow = band_qk(q, k, w1)
        wide = band_qk(q, k, w2)
        np.testing.assert_allclose(
            wide.data[:, extra : extra + 2 * w1 + 1], narrow.data, atol=1e-13
        )

    def test_padding_neutrality(self):
        rng = np.random.default_rng(18)
        p = random_band(rng, 8, 2, 8)
        v = rng.normal(size=(8, 3))
        clean = band_pv(p, v)
        p.data[~p.valid] = 1e6  # poison storage at invalid slots
        np.testing.assert_array_equal(band_pv(p, v), clean)

    def test_validity_mask_matches_rule(self):
        valid = band_validity(5, 1, 3)
        for i in range(5):
            for j in range(3):
                assert valid[i, j] == (0 <= i + j - 1 < 3)


class TestBandMatrixValidation:
    def test_rejects_nonzero_invalid_entries(self):
        data = np.ones((3, 3))  # w=1: corners are out of range
        with pytest.raises(BandShapeError):
            BandMatrix(data, 1, 3)

    def test_rejects_nan(self):
        data = np.zeros((3, 3))
        data[1, 1] = np.nan
        with pytest.raises(BandShapeError):
            BandMatrix(data, 1, 3)

    def test_rejects_wrong_width(self):
        with pytest.raises(BandShapeError):
            BandMatrix(np.zeros((3, 4)), 1, 3)


class TestNaiveKernels:
    def test_naive_matches_optimized(self):
        rng = np.random.default_rng(19)
        q, k = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
        fast = band_qk(q, k, 2)
        slow = naive_band_qk(q, k, 2)
        np.testing.assert_allclose(slow.data, fast.data, atol=1e-13)
        assert slow.target_len == fast.target_len
        p = random_band(rng, 6, 2, 4)
        v = rng.normal(size=(4, 3))
        np.testing.assert_allclose(naive_band_pv(p, v), band_pv(p, v), atol=1e-13)

    def test_multiply_add_counts(self):
        rng = np.random.default_rng(20)
        for s, w, h in ((4, 0, 3), (6, 2, 5), (3, 4, 2)):
            q, k = rng.normal(size=(s, h)), rng.normal(size=(s, h))
            counter = OpCounter()
            naive_band_qk(q, k, w, counter)
            assert counter.multiply_adds == s * (2 * w + 1) * h
            p = random_band(rng, s, w, s)
            v = rng.normal(size=(s, h))
            counter = OpCounter()
            naive_band_pv(p, v, counter)
            assert counter.multiply_adds == s * (2 * w + 1) * h

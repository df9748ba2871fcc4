import numpy as np
import pytest

from deltacomp.errors import NumericsError, UsageError
from deltacomp.numerics import (
    Rng,
    fnv1a64,
    fro_norm,
    gaussian_matrix,
    matmul,
    thin_svd,
)

from oracles import gram_singular_values, naive_fro_norm, naive_matmul


class TestRng:
    def test_same_seed_same_sequence(self):
        a = [Rng(123).next_u64() for _ in range(10)]
        b = [Rng(123).next_u64() for _ in range(10)]
        assert a == b

    def test_vectorized_block_matches_scalar_path(self):
        rng = Rng(9)
        scalar = [rng.next_u64() for _ in range(7)]
        block = Rng(9)._raw_block(7)
        assert scalar == [int(v) for v in block]

    def test_named_streams_differ(self):
        assert Rng.stream(0, "a").next_u64() != Rng.stream(0, "b").next_u64()

    def test_below_range(self):
        rng = Rng(5)
        draws = [rng.below(7) for _ in range(200)]
        assert set(draws) <= set(range(7))

    def test_fnv1a64_published_vectors(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8


class TestGaussianMatrix:
    def test_first_value_documented(self):
        g = gaussian_matrix(Rng(0), 1, 1)
        assert g[0, 0] == np.float32(-0.45275775)

    def test_deterministic(self):
        assert np.array_equal(gaussian_matrix(Rng(0), 4, 6), gaussian_matrix(Rng(0), 4, 6))

    def test_large_sample_statistics(self):
        m = gaussian_matrix(Rng(42), 1000, 1000)
        assert -0.01 <= float(m.mean(dtype=np.float64)) <= 0.01
        assert 0.98 <= float(m.var(dtype=np.float64)) <= 1.02


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        assert np.array_equal(matmul(np.eye(2, dtype=np.float32), a), a)

    def test_dot_product(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert out.shape == (1, 1) and out[0, 0] == 11.0

    def test_matches_naive_oracle(self):
        rng = Rng(31)
        a = gaussian_matrix(rng, 5, 7)
        b = gaussian_matrix(rng, 7, 3)
        assert np.allclose(matmul(a, b), naive_matmul(a, b), atol=1e-6)

    def test_random_small_shapes_match_oracle(self):
        rng = Rng(8)
        for _ in range(10):
            n, k, m = (rng.below(16) + 1 for _ in range(3))
            a = gaussian_matrix(rng, n, k)
            b = gaussian_matrix(rng, k, m)
            assert np.allclose(matmul(a, b), naive_matmul(a, b), atol=1e-5)

    def test_dimension_mismatch_names_shapes(self):
        with pytest.raises(UsageError, match="2x3.*4x2"):
            matmul(np.zeros((2, 3), dtype=np.float32), np.zeros((4, 2), dtype=np.float32))

    def test_non_finite_rejected(self):
        bad = np.array([[np.nan, 1.0]], dtype=np.float32)
        with pytest.raises(NumericsError):
            matmul(bad, np.zeros((2, 1), dtype=np.float32))


class TestFroNorm:
    def test_zero(self):
        assert fro_norm(np.zeros((3, 4), dtype=np.float32)) == 0.0

    def test_three_four_five(self):
        assert fro_norm(np.array([[3.0, 4.0]], dtype=np.float32)) == 5.0

    def test_matches_naive_oracle(self):
        a = gaussian_matrix(Rng(17), 10, 10)
        ref = naive_fro_norm(a)
        assert abs(fro_norm(a) - ref) <= 1e-9 * ref


class TestThinSvd:
    def test_diagonal(self):
        r = thin_svd(np.diag([3.0, 1.0]).astype(np.float32), 2)
        assert np.allclose(r.sigma, [3.0, 1.0])
        assert np.allclose(np.abs(r.u), np.eye(2), atol=1e-6)
        assert np.allclose(np.abs(r.v), np.eye(2), atol=1e-6)

    def test_rank_one_outer_product(self):
        a = np.outer([1.0, 2.0], [3.0, 4.0]).astype(np.float32)
        r = thin_svd(a, 2)
        assert abs(r.sigma[0] - np.sqrt(5.0) * 5.0) < 1e-5
        assert r.sigma[1] <= 1e-6 * r.sigma[0]
        # completed null column still orthonormal
        gram = r.u.T.astype(np.float64) @ r.u.astype(np.float64)
        assert np.abs(gram - np.eye(2)).max() < 1e-4

    def test_sigma_matches_gram_eigen_oracle(self):
        rng = Rng(23)
        a = gaussian_matrix(rng, 8, 6)
        r = thin_svd(a, 6)
        ref = gram_singular_values(a, 6)
        assert np.abs(r.sigma - ref).max() <= 1e-5 * ref[0]

    def test_sign_convention(self):
        rng = Rng(29)
        a = gaussian_matrix(rng, 9, 5)
        r = thin_svd(a, 5)
        for i in range(5):
            peak = np.argmax(np.abs(r.u[:, i]))
            assert r.u[peak, i] >= 0

    def test_reconstruction_and_orthonormality(self):
        rng = Rng(41)
        for rows, cols in [(12, 20), (20, 12), (16, 16)]:
            a = gaussian_matrix(rng, rows, cols)
            r = thin_svd(a, min(rows, cols))
            rec = r.reconstruct().astype(np.float32)
            assert fro_norm(rec - a) <= 1e-4 * fro_norm(a)
            for f in (r.u, r.v):
                gram = f.T.astype(np.float64) @ f.astype(np.float64)
                assert np.abs(gram - np.eye(r.r)).max() <= 1e-4

    def test_eckart_young_truncation_error(self):
        a = gaussian_matrix(Rng(43), 14, 10)
        full = thin_svd(a, 10)
        for r in (1, 3, 7):
            trunc = full.truncate(r)
            direct = fro_norm((trunc.reconstruct()).astype(np.float32) - a)
            predicted = float(np.sqrt(np.sum(full.sigma[r:] ** 2)))
            assert abs(direct - predicted) <= 1e-4 * max(predicted, 1e-30)

    def test_zero_matrix(self):
        r = thin_svd(np.zeros((3, 4), dtype=np.float32), 3)
        assert np.all(r.sigma == 0)
        gram = r.u.T @ r.u
        assert np.allclose(gram, np.eye(3), atol=1e-6)

    def test_r_max_zero_rejected(self):
        with pytest.raises(UsageError):
            thin_svd(np.eye(3, dtype=np.float32), 0)

    def test_r_max_too_large_rejected(self):
        with pytest.raises(UsageError):
            thin_svd(np.eye(3, dtype=np.float32), 4)

    def test_non_finite_rejected(self):
        bad = np.full((2, 2), np.inf, dtype=np.float32)
        with pytest.raises(NumericsError):
            thin_svd(bad, 1)

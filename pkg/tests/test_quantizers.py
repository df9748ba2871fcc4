import numpy as np
import pytest

from deltacomp.errors import IntegrityError, NumericsError, UsageError
from deltacomp.numerics import Rng, gaussian_matrix
from deltacomp.quantizers import (
    dequantize,
    gptq_quantize,
    pack_bits,
    rtn_quantize,
    sign_quantize,
    unpack_bits,
)

from oracles import exhaustive_grid_optimum, scalar_dequantize, weighted_objective


def rtn_objective(w, x, bits, group_size):
    return weighted_objective(w, dequantize(rtn_quantize(w, bits, group_size)), x)


class TestPackBits:
    def test_lsb_first_single_bit(self):
        assert pack_bits([1, 0, 1], 1) == bytes([0b00000101])

    def test_three_bit_code(self):
        assert pack_bits([5], 3) == bytes([0b00000101])

    @pytest.mark.parametrize("bits", [1, 2, 3, 4, 8])
    def test_roundtrip(self, bits):
        rng = Rng(bits)
        codes = np.array([rng.below(1 << bits) for _ in range(1000)], dtype=np.uint8)
        assert np.array_equal(unpack_bits(pack_bits(codes, bits), 1000, bits), codes)

    @pytest.mark.parametrize("count", [1, 7, 8, 9, 63])
    def test_non_byte_aligned_tails(self, count):
        codes = np.arange(count, dtype=np.uint8) % 8
        assert np.array_equal(unpack_bits(pack_bits(codes, 3), count, 3), codes)

    def test_truncated_stream_rejected(self):
        packed = pack_bits([1] * 100, 3)
        with pytest.raises(IntegrityError):
            unpack_bits(packed[:-1], 100, 3)

    def test_out_of_range_code_rejected(self):
        with pytest.raises(UsageError):
            pack_bits([4], 2)


class TestRtn:
    def test_constant_group_degenerates(self):
        q = rtn_quantize(np.array([[5.0, 5.0, 5.0, 5.0]], dtype=np.float32), 2, 4)
        assert q.scales[0, 0] == 0.0
        assert np.array_equal(q.codes(), [[0, 0, 0, 0]])
        assert np.array_equal(dequantize(q), [[5.0, 5.0, 5.0, 5.0]])

    def test_on_grid_values_exact(self):
        q = rtn_quantize(np.array([[0.0, 1.0, 2.0, 3.0]], dtype=np.float32), 2, 4)
        assert q.scales[0, 0] == 1.0 and q.zeros[0, 0] == 0.0
        assert np.array_equal(q.codes(), [[0, 1, 2, 3]])
        assert np.array_equal(dequantize(q), [[0.0, 1.0, 2.0, 3.0]])

    def test_per_element_error_bound(self):
        w = gaussian_matrix(Rng(11), 4, 16)
        q = rtn_quantize(w, 3, 4)
        err = np.abs(w.astype(np.float64) - dequantize(q).astype(np.float64))
        for g in range(4):
            bound = q.scales[:, g : g + 1] / 2 + 1e-6
            assert (err[:, g * 4 : (g + 1) * 4] <= bound).all()

    def test_partial_trailing_group(self):
        w = gaussian_matrix(Rng(13), 3, 10)
        q = rtn_quantize(w, 4, 4)  # groups of 4, 4, 2
        assert q.scales.shape == (3, 3)
        err = np.abs(w - dequantize(q))
        assert (err[:, 8:] <= q.scales[:, 2:3] / 2 + 1e-6).all()

    def test_eight_bit_grid_recovery(self):
        levels = np.linspace(-1.0, 1.0, 256).astype(np.float32)
        w = levels[None, :]
        q = rtn_quantize(w, 8, 256)
        assert np.array_equal(dequantize(q), w)

    def test_quantize_dequantize_idempotent(self):
        w = gaussian_matrix(Rng(9), 6, 20)
        q = rtn_quantize(w, 3, 8)
        q2 = rtn_quantize(dequantize(q), 3, 8)
        assert np.array_equal(q.codes(), q2.codes())

    def test_invalid_bits_rejected(self):
        with pytest.raises(UsageError):
            rtn_quantize(np.ones((1, 4), dtype=np.float32), 5, 4)


class TestGptq:
    def test_scalar_hessian_equals_rtn(self):
        for seed in range(5):
            w = gaussian_matrix(Rng(seed), 4, 8)
            x = (np.sqrt(16.0) * np.eye(8)).astype(np.float32)
            qg, _ = gptq_quantize(w, x, 3, 4)
            assert np.array_equal(qg.codes(), rtn_quantize(w, 3, 4).codes())

    def test_single_value_degenerate_group(self):
        w = np.array([[0.7]], dtype=np.float32)
        q, _ = gptq_quantize(w, np.array([[2.0]], dtype=np.float32), 2, 4)
        assert dequantize(q)[0, 0] == np.float32(0.7)

    def test_objective_beats_rtn_and_near_optimal(self):
        from deltacomp.quantizers import _minmax_grid

        le_rtn = 0
        for seed in range(20):
            w = gaussian_matrix(Rng(seed), 2, 4)
            x = gaussian_matrix(Rng(seed + 500), 4, 8)
            qg, obj = gptq_quantize(w, x, 2, 4)
            le_rtn += obj <= rtn_objective(w, x, 2, 4) + 1e-12
            scales, zeros = _minmax_grid(w, 2, 4, False)
            opt = exhaustive_grid_optimum(w, x, 2, 4, scales, zeros)
            assert obj <= 2.0 * opt + 1e-12
        assert le_rtn >= 19

    def test_objective_beats_rtn_statistically(self):
        wins = 0
        for seed in range(30):
            w = gaussian_matrix(Rng(seed), 8, 64)
            x = gaussian_matrix(Rng(seed + 1000), 64, 128)
            _, obj = gptq_quantize(w, x, 2, 128)
            wins += obj <= rtn_objective(w, x, 2, 128) + 1e-12
        assert wins >= 29  # >= 95 percent

    def test_reported_objective_matches_oracle(self):
        w = gaussian_matrix(Rng(3), 6, 24)
        x = gaussian_matrix(Rng(4), 24, 32)
        q, obj = gptq_quantize(w, x, 4, 8)
        assert abs(obj - weighted_objective(w, dequantize(q), x)) <= 1e-9 * max(obj, 1.0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(UsageError):
            gptq_quantize(
                gaussian_matrix(Rng(0), 2, 4), gaussian_matrix(Rng(1), 5, 8), 2, 4
            )

    def test_dead_calibration_degrades_to_rtn(self):
        # All-zero activations excite nothing, so no compensation happens
        # and the codes collapse to plain RTN on the frozen grid.
        w = gaussian_matrix(Rng(0), 2, 4)
        q, _ = gptq_quantize(w, np.zeros((4, 8), dtype=np.float32), 2, 4)
        assert np.array_equal(q.codes(), rtn_quantize(w, 2, 4).codes())

    def test_calibration_changes_codes(self):
        w = gaussian_matrix(Rng(7), 8, 64)
        xa = gaussian_matrix(Rng(100), 64, 96)
        xb = gaussian_matrix(Rng(200), 64, 96)
        qa, _ = gptq_quantize(w, xa, 2, 32)
        qb, _ = gptq_quantize(w, xb, 2, 32)
        assert not np.array_equal(qa.codes(), qb.codes())
        assert np.array_equal(qa.scales, qb.scales)  # grid frozen pre-compensation


class TestSignQuantize:
    def test_closed_form_scale(self):
        q = sign_quantize(np.array([[1.0, -2.0], [3.0, -4.0]], dtype=np.float32))
        assert abs(float(q.scales[0]) - 2.5) < 1e-12
        assert np.allclose(dequantize(q), [[2.5, -2.5], [2.5, -2.5]])

    def test_zero_matrix(self):
        q = sign_quantize(np.zeros((3, 3), dtype=np.float32))
        assert float(q.scales[0]) == 0.0
        assert np.all(dequantize(q) == 0.0)

    def test_scale_equals_mean_abs_exactly(self):
        for seed in range(20):
            w = gaussian_matrix(Rng(seed), 5, 9)
            q = sign_quantize(w)
            ref = float(np.mean(np.abs(w.astype(np.float64))))
            assert abs(float(q.scales[0]) - ref) <= 1e-9 * max(ref, 1e-30)

    def test_scale_optimality_spot_check(self):
        w = gaussian_matrix(Rng(77), 16, 16)
        q = sign_quantize(w)
        gamma = float(q.scales[0])
        signs = np.where(w >= 0, 1.0, -1.0)
        best = float(np.sum((w - gamma * signs) ** 2))
        for factor in (0.5, 0.9, 1.1, 2.0):
            alt = float(np.sum((w - factor * gamma * signs) ** 2))
            assert best <= alt + 1e-9


class TestDequantize:
    def test_matches_scalar_oracle_bit_exact(self):
        w = gaussian_matrix(Rng(55), 8, 128)
        q = rtn_quantize(w, 3, 16)
        ref = scalar_dequantize(
            q.rows, q.cols, q.bits, q.group_size, q.scales, q.zeros, q.codes()
        )
        assert np.array_equal(dequantize(q), ref)

    def test_f16_grid_survives_f16_roundtrip(self):
        w = gaussian_matrix(Rng(60), 4, 32)
        q = rtn_quantize(w, 4, 16, f16_grid=True)
        assert np.array_equal(q.scales, q.scales.astype(np.float16).astype(np.float64))
        assert np.array_equal(q.zeros, q.zeros.astype(np.float16).astype(np.float64))

"""Weight quantizers: k-bit group quantization (round-to-nearest and a
calibration-aware sequential solver), 1-bit sign quantization, and the
bit-packing used by the serialized formats.

The k-bit grid is asymmetric min/max per (row, group) with an explicit
zero point; ``group_size`` groups run along the column (input) dimension
and the trailing group may be partial.  Grids are always computed from
the original weights and frozen before any error compensation, so the
serialized form does not depend on solve order.
"""

import numpy as np
import scipy.linalg

from .errors import (
    CORRUPT,
    NUMERICALLY_SINGULAR,
    TRUNCATED,
    IntegrityError,
    NumericsError,
    UsageError,
)
from .numerics import as_matrix
from dataclasses import dataclass

__all__ = [
    "QuantizedTensor",
    "dequantize",
    "gptq_quantize",
    "pack_bits",
    "rtn_quantize",
    "sign_quantize",
    "unpack_bits",
]

KBIT_CHOICES = (2, 3, 4, 8)
GPTQ_BLOCK = 128  # lazy-update block width for the sequential solver


def pack_bits(codes: np.ndarray, bits: int) -> bytes:
    """Pack integer codes (< 2**bits) into an LSB-first bitstream.

    Codes are laid out in order, ``bits`` bits each, filling every byte
    from its least significant bit; the final byte is zero-padded.
    """
    if bits < 1 or bits > 8:
        raise UsageError(f"bits must be in [1, 8], got {bits}")
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size and int(codes.max()) >= (1 << bits):
        raise UsageError(f"code out of range for {bits}-bit packing")
    bitplanes = np.unpackbits(
        codes.reshape(-1, 1), axis=1, bitorder="little", count=bits
    )
    return np.packbits(bitplanes.ravel(), bitorder="little").tobytes()


def unpack_bits(data: bytes, count: int, bits: int) -> np.ndarray:
    """Exact inverse of :func:`pack_bits`; validates the stream length."""
    if bits < 1 or bits > 8:
        raise UsageError(f"bits must be in [1, 8], got {bits}")
    expected = (count * bits + 7) // 8
    if len(data) < expected:
        raise IntegrityError(
            f"bitstream holds {len(data)} bytes, {expected} needed for "
            f"{count} {bits}-bit codes",
            code=TRUNCATED,
        )
    if len(data) > expected:
        raise IntegrityError(
            f"bitstream holds {len(data)} bytes, expected exactly {expected}",
            code=CORRUPT,
        )
    raw = np.frombuffer(data, dtype=np.uint8)
    bitplanes = np.unpackbits(raw, bitorder="little", count=count * bits)
    weights = (1 << np.arange(bits, dtype=np.uint16)).astype(np.uint16)
    return (bitplanes.reshape(count, bits).astype(np.uint16) @ weights).astype(
        np.uint8
    )


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed quantized form of one rows x cols matrix.

    For bits >= 2, ``scales``/``zeros`` hold one value per (row, group)
    with groups of ``group_size`` along the column dimension.  For
    bits == 1 there is a single global scale, no zeros, and codes encode
    sign (1 for +scale, 0 for -scale).
    """

    rows: int
    cols: int
    bits: int
    group_size: int
    scales: np.ndarray  # float64; f16-representable when built for packaging
    zeros: np.ndarray | None
    packed: bytes

    def __post_init__(self):
        if self.bits == 1:
            if self.zeros is not None or self.scales.size != 1:
                raise UsageError("1-bit tensors take one global scale and no zeros")
        elif self.bits in KBIT_CHOICES:
            n_groups = _group_count(self.cols, self.group_size)
            if self.scales.shape != (self.rows, n_groups):
                raise UsageError(
                    f"scales shape {self.scales.shape} does not match "
                    f"{self.rows} rows x {n_groups} groups"
                )
            if self.zeros is None or self.zeros.shape != self.scales.shape:
                raise UsageError("zeros must mirror the scales layout")
        else:
            raise UsageError(f"unsupported bit width {self.bits}")
        if not np.isfinite(self.scales).all():
            raise NumericsError("non-finite quantization scales")
        self.codes()  # validates length and range

    def codes(self) -> np.ndarray:
        """Unpacked code matrix (rows x cols, uint8)."""
        flat = unpack_bits(self.packed, self.rows * self.cols, self.bits)
        if flat.size and int(flat.max()) >= (1 << self.bits):
            raise IntegrityError(
                f"code exceeds {self.bits}-bit range", code=CORRUPT
            )
        return flat.reshape(self.rows, self.cols)

    @property
    def payload_bits(self) -> int:
        """Bits spent on codes alone."""
        return self.rows * self.cols * self.bits

    @property
    def metadata_bits(self) -> int:
        """Bits spent on scales/zeros at 16-bit storage."""
        n = self.scales.size + (self.zeros.size if self.zeros is not None else 0)
        return 16 * n


def _group_count(cols: int, group_size: int) -> int:
    return (cols + group_size - 1) // group_size


def _group_slices(cols: int, group_size: int):
    for g in range(_group_count(cols, group_size)):
        yield g, slice(g * group_size, min((g + 1) * group_size, cols))


def _minmax_grid(w: np.ndarray, bits: int, group_size: int, f16_grid: bool):
    """Per-(row, group) asymmetric grid: scale = (max-min)/(2^k - 1), zero = min.

    Constant groups get scale 0 (codes collapse to 0 and dequantization
    returns the constant).  With ``f16_grid`` the values are rounded to
    float16 so they survive 16-bit serialization unchanged.
    """
    levels = (1 << bits) - 1
    rows, cols = w.shape
    scales = np.zeros((rows, _group_count(cols, group_size)))
    zeros = np.zeros_like(scales)
    w64 = w.astype(np.float64)
    for g, sl in _group_slices(cols, group_size):
        lo = w64[:, sl].min(axis=1)
        hi = w64[:, sl].max(axis=1)
        zeros[:, g] = lo
        scales[:, g] = (hi - lo) / levels
    if f16_grid:
        scales = scales.astype(np.float16).astype(np.float64)
        zeros = zeros.astype(np.float16).astype(np.float64)
    return scales, zeros


def _round_half_away(t: np.ndarray) -> np.ndarray:
    return np.sign(t) * np.floor(np.abs(t) + 0.5)


def _snap(values, scale, zero, bits):
    """Codes for ``values`` on the fixed grid (round half away, clamp)."""
    levels = (1 << bits) - 1
    out = np.zeros(values.shape, dtype=np.float64)
    live = scale != 0
    np.divide(values - zero, scale, out=out, where=live)
    return np.clip(_round_half_away(out), 0, levels).astype(np.uint8)


def rtn_quantize(
    w: np.ndarray, bits: int, group_size: int, *, f16_grid: bool = False
) -> QuantizedTensor:
    """Round-to-nearest quantization on the min/max group grid."""
    w = as_matrix(w, "w")
    if bits not in KBIT_CHOICES:
        raise UsageError(f"bits must be one of {KBIT_CHOICES}, got {bits}")
    if group_size < 1:
        raise UsageError(f"group_size must be >= 1, got {group_size}")
    scales, zeros = _minmax_grid(w, bits, group_size, f16_grid)
    codes = np.empty(w.shape, dtype=np.uint8)
    w64 = w.astype(np.float64)
    for g, sl in _group_slices(w.shape[1], group_size):
        codes[:, sl] = _snap(w64[:, sl], scales[:, g : g + 1], zeros[:, g : g + 1], bits)
    return QuantizedTensor(
        rows=w.shape[0],
        cols=w.shape[1],
        bits=bits,
        group_size=group_size,
        scales=scales,
        zeros=zeros,
        packed=pack_bits(codes, bits),
    )


def _damped_cholesky_chain(h: np.ndarray):
    """Upper Cholesky factor of H^-1 with a x10 damping retry ladder.

    Damping starts at 1% of the mean Hessian diagonal and is multiplied
    by 10 on each of up to 3 retries before giving up.  Dead inputs
    (zero diagonal: the calibration never excites them) get a unit
    diagonal so they pass through without compensation.
    """
    n = h.shape[0]
    lam = 0.01 * float(np.mean(np.diag(h)))
    dead = np.diag(h) == 0.0
    if dead.any():
        h = h.copy()
        h[dead, dead] = 1.0
    for attempt in range(4):
        try:
            damped = h + (lam * 10.0**attempt) * np.eye(n)
            low = np.linalg.cholesky(damped)
            hinv = scipy.linalg.cho_solve((low, True), np.eye(n))
            hinv = (hinv + hinv.T) / 2.0
            return scipy.linalg.cholesky(hinv, lower=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            continue
    raise NumericsError(
        "hessian not positive definite after damping retries",
        code=NUMERICALLY_SINGULAR,
    )


def gptq_quantize(
    w: np.ndarray,
    x: np.ndarray,
    bits: int,
    group_size: int,
    *,
    f16_grid: bool = False,
) -> tuple[QuantizedTensor, float]:
    """Calibration-aware quantization minimizing ||WX - What X||_F^2.

    Classic sequential solve: H = X X^T + damping, columns quantized left
    to right on the frozen RTN grid, and each column's rounding error is
    propagated into the not-yet-quantized columns through the rows of the
    upper Cholesky factor of H^-1.  Returns the quantized tensor together
    with the achieved objective value.
    """
    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    rows, cols = w.shape
    if x.shape[0] != cols:
        raise UsageError(
            f"calibration rows {x.shape[0]} must equal weight cols {cols}"
        )
    if bits not in KBIT_CHOICES:
        raise UsageError(f"bits must be one of {KBIT_CHOICES}, got {bits}")
    if group_size < 1:
        raise UsageError(f"group_size must be >= 1, got {group_size}")

    x64 = x.astype(np.float64)
    hinv_u = _damped_cholesky_chain(x64 @ x64.T)
    scales, zeros = _minmax_grid(w, bits, group_size, f16_grid)

    work = w.astype(np.float64)
    codes = np.empty(w.shape, dtype=np.uint8)
    for b1 in range(0, cols, GPTQ_BLOCK):
        b2 = min(b1 + GPTQ_BLOCK, cols)
        block = work[:, b1:b2].copy()
        block_err = np.empty_like(block)
        u_block = hinv_u[b1:b2, b1:b2]
        for j in range(b2 - b1):
            col = b1 + j
            g = col // group_size
            c = _snap(block[:, j], scales[:, g], zeros[:, g], bits)
            q = zeros[:, g] + scales[:, g] * c
            err = (block[:, j] - q) / u_block[j, j]
            if j + 1 < b2 - b1:
                block[:, j + 1 :] -= np.outer(err, u_block[j, j + 1 :])
            codes[:, col] = c
            block_err[:, j] = err
        if b2 < cols:
            work[:, b2:] -= block_err @ hinv_u[b1:b2, b2:]

    qt = QuantizedTensor(
        rows=rows,
        cols=cols,
        bits=bits,
        group_size=group_size,
        scales=scales,
        zeros=zeros,
        packed=pack_bits(codes, bits),
    )
    diff = w.astype(np.float64) - dequantize(qt).astype(np.float64)
    objective = float(np.sum((diff @ x64) ** 2))
    return qt, objective


def sign_quantize(w: np.ndarray, *, f16_grid: bool = False) -> QuantizedTensor:
    """1-bit quantization W ~ gamma * sign(W) with the least-squares scale.

    gamma = mean(|W|) is the closed-form minimizer of
    ||W - gamma sign(W)||_F; code 1 marks w >= 0.
    """
    w = as_matrix(w, "w")
    gamma = float(np.mean(np.abs(w, dtype=np.float64)))
    if f16_grid:
        gamma = float(np.float64(np.float16(gamma)))
    codes = (w >= 0).astype(np.uint8)
    return QuantizedTensor(
        rows=w.shape[0],
        cols=w.shape[1],
        bits=1,
        group_size=w.shape[1],
        scales=np.array([gamma]),
        zeros=None,
        packed=pack_bits(codes, 1),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct the float32 matrix a quantizer produced.

    Deterministic and bit-exact for a given tensor: zero + scale * code
    per group for k >= 2, gamma * sign for 1-bit.  Works group-slice by
    group-slice so transient buffers stay a fraction of the output.
    """
    codes = q.codes()
    if q.bits == 1:
        gamma = float(q.scales[0])
        out = codes.astype(np.float32)
        out *= 2.0 * gamma
        out -= gamma
        return out
    out = np.empty((q.rows, q.cols), dtype=np.float32)
    for g, sl in _group_slices(q.cols, q.group_size):
        block = q.scales[:, g : g + 1] * codes[:, sl]
        block += q.zeros[:, g : g + 1]
        out[:, sl] = block
    return out

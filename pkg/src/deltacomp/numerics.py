"""Dense matrix primitives: matmul, Frobenius norm, thin SVD, and a
deterministic PRNG.

Matrices are plain 2-D numpy arrays stored at float32; every reduction
accumulates at float64 or better.  The SVD is a one-sided Jacobi
implementation so that results are reproducible bit-for-bit across BLAS
builds, which matters because singular vectors end up in serialized
artifacts.
"""

import numpy as np

from .errors import NO_CONVERGENCE, NON_FINITE, NumericsError, UsageError
from dataclasses import dataclass

__all__ = [
    "Rng",
    "SvdResult",
    "as_matrix",
    "fnv1a64",
    "fro_norm",
    "gaussian_matrix",
    "matmul",
    "thin_svd",
]

_MASK64 = 0xFFFFFFFFFFFFFFFF

# SplitMix64 constants (Steele, Lea, Flood 2014).
_SM64_GOLDEN = 0x9E3779B97F4A7C15
_SM64_MIX1 = 0xBF58476D1CE4E5B9
_SM64_MIX2 = 0x94D049BB133111EB

# FNV-1a 64-bit parameters.
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash of a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


class Rng:
    """SplitMix64 generator with a documented cross-platform sequence.

    The raw stream is ``state += GOLDEN; output = mix(state)`` on 64-bit
    integers; uniforms take the top 53 bits; normals come from Box-Muller
    on consecutive uniform pairs.  Identical seeds produce identical
    sequences on every platform.

    Named sub-streams are derived as ``seed XOR fnv1a64(name)`` so that
    independent consumers (one per tensor, say) never share a stream.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._state = self.seed
        self._counter = 0

    @classmethod
    def stream(cls, seed: int, name: str) -> "Rng":
        """Derive the generator for a named logical stream."""
        return cls((seed ^ fnv1a64(name.encode("utf-8"))) & _MASK64)

    def next_u64(self) -> int:
        self._counter += 1
        z = (self.seed + self._counter * _SM64_GOLDEN) & _MASK64
        z = ((z ^ (z >> 30)) * _SM64_MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _SM64_MIX2) & _MASK64
        return z ^ (z >> 31)

    def _raw_block(self, n: int) -> np.ndarray:
        """Vectorized batch of the next ``n`` raw outputs (uint64)."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_SM64_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM64_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM64_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self) -> float:
        """Uniform double in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise UsageError(f"below() requires n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normals(self, count: int) -> np.ndarray:
        """``count`` i.i.d. standard normals via Box-Muller (float64).

        Each pair of raw draws yields two normals: with u1 in (0, 1] from
        the first draw and u2 in [0, 1) from the second,
        z0 = sqrt(-2 ln u1) cos(2 pi u2) and z1 = the sine twin.
        """
        if count == 0:
            return np.zeros(0)
        pairs = (count + 1) // 2
        raw = self._raw_block(2 * pairs)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:count]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a float32 2-D C-contiguous array."""
    arr = np.ascontiguousarray(a, dtype=np.float32)
    if arr.ndim != 2:
        raise UsageError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise UsageError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericsError(f"{name} contains non-finite values", code=NON_FINITE)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, returned at float32."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise UsageError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} times "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def fro_norm(a: np.ndarray) -> float:
    """Frobenius norm with float64 accumulation."""
    a = as_matrix(a, "a")
    return float(np.sqrt(np.sum(np.square(a, dtype=np.float64))))


def gaussian_matrix(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of i.i.d. standard normals drawn from ``rng``.

    Fully determined by the generator state; a fresh ``Rng(0)`` yields
    -0.45275775 as its first element on every platform.
    """
    if rows < 1 or cols < 1:
        raise UsageError(f"gaussian_matrix needs positive dims, got {rows}x{cols}")
    return rng.normals(rows * cols).reshape(rows, cols).astype(np.float32)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD factors sorted by non-increasing singular value.

    u is h_out x r, v is h_in x r (both float32 with orthonormal columns);
    sigma is length r at float64.  The original matrix is
    u @ diag(sigma) @ v.T.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def r(self) -> int:
        return len(self.sigma)

    def reconstruct(self) -> np.ndarray:
        return (
            self.u.astype(np.float64) * self.sigma
        ).astype(np.float64) @ self.v.T.astype(np.float64)

    def truncate(self, r: int) -> "SvdResult":
        if r > self.r:
            raise UsageError(f"cannot truncate rank {self.r} result to {r}")
        return SvdResult(
            np.ascontiguousarray(self.u[:, :r]),
            self.sigma[:r].copy(),
            np.ascontiguousarray(self.v[:, :r]),
        )


_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60
_RANK_FLOOR = 1e-13  # relative to sigma_max: below this a column is completed


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint index pairs covering all
    (i, j) combinations once (a bye pads odd n)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left = [players[i] for i in range(m // 2)]
        right = [players[m - 1 - i] for i in range(m // 2)]
        keep = [k for k in range(m // 2) if left[k] != -1 and right[k] != -1]
        rounds.append(
            (
                np.array([left[k] for k in keep], dtype=np.intp),
                np.array([right[k] for k in keep], dtype=np.intp),
            )
        )
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_orthogonalize(bt: np.ndarray, vt: np.ndarray) -> None:
    """One-sided Jacobi: rotate rows of ``bt`` until mutually orthogonal.

    bt holds the working matrix transposed (one column of the original per
    row); vt accumulates the rotations starting from the identity.  Pairs
    are visited in round-robin rounds of disjoint pairs so each round
    applies as one vectorized update.  A rotation is skipped when
    |b_i . b_j| <= 1e-12 ||b_i|| ||b_j||; raises after 60 full sweeps.
    """
    n = bt.shape[0]
    if n == 1:
        return
    rounds = _round_robin_pairs(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        norms2 = np.einsum("ij,ij->i", bt, bt)  # refreshed per sweep vs drift
        for p, q in rounds:
            bp = bt[p]
            bq = bt[q]
            app = norms2[p]
            aqq = norms2[q]
            apq = np.einsum("ij,ij->i", bp, bq)
            mask = apq * apq > (_JACOBI_TOL * _JACOBI_TOL) * app * aqq
            if not mask.any():
                continue
            rotated = True
            tau = np.where(mask, (aqq - app) / np.where(mask, 2.0 * apq, 1.0), 0.0)
            t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(mask & (tau == 0.0), 1.0, t)  # 45-degree case
            c = np.where(mask, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(mask, c * t, 0.0)
            cs = c * s
            norms2[p] = c * c * app - 2.0 * cs * apq + s * s * aqq
            norms2[q] = s * s * app + 2.0 * cs * apq + c * c * aqq
            c = c[:, None]
            s = s[:, None]
            bt[p] = c * bp - s * bq
            bt[q] = s * bp + c * bq
            vp = vt[p]
            vq = vt[q]
            vt[p] = c * vp - s * vq
            vt[q] = s * vp + c * vq
        if not rotated:
            return
    raise NumericsError(
        f"jacobi SVD did not converge within {_JACOBI_MAX_SWEEPS} sweeps",
        code=NO_CONVERGENCE,
    )


def _complete_orthonormal(cols: np.ndarray, start: int) -> None:
    """Fill columns [start:] of ``cols`` with vectors orthonormal to the rest.

    Candidates are standard basis vectors in index order, Gram-Schmidt
    projected against all accepted columns; deterministic by construction.
    """
    m, r = cols.shape
    k = start
    for t in range(m):
        if k >= r:
            return
        cand = np.zeros(m)
        cand[t] = 1.0
        cand -= cols[:, :k] @ (cols[:, :k].T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            cols[:, k] = cand / norm
            k += 1
    if k < r:  # unreachable for r <= m
        raise NumericsError("orthonormal completion failed", code=NO_CONVERGENCE)


def thin_svd(a: np.ndarray, r_max: int) -> SvdResult:
    """Thin SVD keeping the ``r_max`` largest singular triplets.

    One-sided Jacobi on the smaller Gram dimension, float64 throughout,
    factors returned at float32.  Sign convention: the largest-magnitude
    element of each u column is non-negative (first occurrence on ties),
    so the factorization is deterministic.
    """
    a = as_matrix(a, "a")
    h_out, h_in = a.shape
    if r_max < 1:
        raise UsageError(f"r_max must be >= 1, got {r_max}")
    if r_max > min(h_out, h_in):
        raise UsageError(
            f"r_max {r_max} exceeds min dimension of {h_out}x{h_in} matrix"
        )

    transposed = h_out < h_in
    work = a.T if transposed else a  # rows >= cols
    n = work.shape[1]

    bt = np.ascontiguousarray(work.T, dtype=np.float64)  # row i == column i
    vt = np.eye(n)
    _jacobi_orthogonalize(bt, vt)

    sigma = np.sqrt(np.einsum("ij,ij->i", bt, bt))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    bt = bt[order]
    vt = vt[order]

    sigma = sigma[:r_max]
    u_full = np.zeros((work.shape[0], r_max))
    cutoff = sigma[0] * _RANK_FLOOR if sigma[0] > 0 else 0.0
    rank = int(np.searchsorted(-sigma, -cutoff, side="right")) if sigma[0] > 0 else 0
    for i in range(rank):
        u_full[:, i] = bt[i] / sigma[i]
    _complete_orthonormal(u_full, rank)
    v_full = vt[:r_max].T.copy()

    # Fix signs on the left factor of the *original* orientation.
    left = v_full if transposed else u_full
    right = u_full if transposed else v_full
    for i in range(r_max):
        peak = np.argmax(np.abs(left[:, i]))
        if left[peak, i] < 0:
            left[:, i] = -left[:, i]
            right[:, i] = -right[:, i]

    return SvdResult(
        left.astype(np.float32), sigma.astype(np.float64), right.astype(np.float32)
    )

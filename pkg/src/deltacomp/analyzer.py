"""Quantization-error analysis: activation-level MSE, layer binning,
outlier columns, synthetic long-tail deltas, and the four-way baseline
comparison (16-bit low-rank, 1-bit sign, single-precision, triple-
precision) at equal bit budget.
"""

import io

import numpy as np

from .errors import UsageError
from .numerics import Rng, as_matrix, gaussian_matrix, thin_svd
from .planner import make_schedule
from .pipeline import compress_matrix, decompress_matrix
from .quantizers import dequantize, sign_quantize
from dataclasses import dataclass

__all__ = [
    "ErrorReport",
    "ReportRow",
    "activation_error",
    "allocation_mse_objective",
    "compare_methods",
    "layer_bins",
    "longtail_suite",
    "outlier_columns",
    "synth_longtail_delta",
]

# Layer-bin fractions: 11 low, 11 medium, 10 high out of 32.
_BIN_LOW = 11
_BIN_MEDIUM = 22
_BIN_TOTAL = 32

METHODS = ("low-rank", "sign-1bit", "single", "triple")
SINGLE_SPEC = "3"
TRIPLE_SPEC = "8+3+2"


def activation_error(w: np.ndarray, w_hat: np.ndarray, x: np.ndarray) -> float:
    """Mean square error between W X and What X over all output elements."""
    w = as_matrix(w, "w")
    w_hat = as_matrix(w_hat, "w_hat")
    x = as_matrix(x, "x")
    if w.shape != w_hat.shape:
        raise UsageError(f"shape mismatch: {w.shape} vs {w_hat.shape}")
    if x.shape[0] != w.shape[1]:
        raise UsageError(
            f"activation rows {x.shape[0]} must equal weight cols {w.shape[1]}"
        )
    diff = (w.astype(np.float64) - w_hat.astype(np.float64)) @ x.astype(np.float64)
    return float(np.mean(diff * diff))


def layer_bins(n_layers: int) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Split layer indices into low/medium/high bins.

    A 32-layer model splits [0, 11), [11, 22), [22, 32); other depths use
    the same fractions with remainders going to the last bin.
    """
    if n_layers < 3:
        raise UsageError(f"need at least 3 layers to bin, got {n_layers}")
    b1 = n_layers * _BIN_LOW // _BIN_TOTAL
    b2 = n_layers * _BIN_MEDIUM // _BIN_TOTAL
    return (0, b1), (b1, b2), (b2, n_layers)


def outlier_columns(w: np.ndarray, fraction: float = 0.01) -> list[int]:
    """Indices of the top-fraction columns by L1 mass (at least one).

    Ties break toward the lower index.
    """
    w = as_matrix(w, "w")
    if not 0 < fraction <= 1:
        raise UsageError(f"fraction must be in (0, 1], got {fraction}")
    count = max(1, int(fraction * w.shape[1]))
    scores = np.abs(w.astype(np.float64)).sum(axis=0)
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in order[:count])


def synth_longtail_delta(
    rng: Rng,
    h_out: int,
    h_in: int,
    decay: float,
    noise: float,
    *,
    sigma0: float | None = None,
) -> np.ndarray:
    """Random delta with a power-law singular spectrum plus Gaussian noise.

    Builds sum_i sigma_i u_i v_i^T with sigma_i = sigma0 (i+1)^-decay and
    random orthonormal factors (QR of Gaussian), then adds noise * G.
    sigma0 defaults to sqrt(min(h_out, h_in)) so the leading components
    dominate the noise floor the way fine-tuning deltas do.  Deterministic
    per rng state.
    """
    if decay <= 0:
        raise UsageError(f"decay must be > 0, got {decay}")
    r = min(h_out, h_in)
    if sigma0 is None:
        sigma0 = float(np.sqrt(r))
    u, _ = np.linalg.qr(gaussian_matrix(rng, h_out, r).astype(np.float64))
    v, _ = np.linalg.qr(gaussian_matrix(rng, h_in, r).astype(np.float64))
    sigma = sigma0 * np.power(np.arange(1, r + 1, dtype=np.float64), -decay)
    delta = (u * sigma) @ v.T
    if noise:
        delta = delta + noise * gaussian_matrix(rng, h_out, h_in).astype(np.float64)
    return delta.astype(np.float32)


def longtail_suite(
    n_seeds: int = 10,
    size: int = 256,
    *,
    noise: float = 0.01,
    calib_samples: int = 512,
) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """The fixed (seed, delta, calibration) evaluation suite.

    Seeds 0..n-1 with decay alternating between 0.8 and 1.2; calibration
    is Gaussian with its own derived stream per seed.
    """
    suite = []
    for seed in range(n_seeds):
        decay = 0.8 if seed % 2 == 0 else 1.2
        delta = synth_longtail_delta(
            Rng.stream(seed, "suite/delta"), size, size, decay, noise
        )
        x = gaussian_matrix(Rng.stream(seed, "suite/calibration"), size, calib_samples)
        suite.append((seed, delta, x))
    return suite


@dataclass(frozen=True)
class ReportRow:
    method: str
    param_kind: str
    layer_bin: str
    scope: str  # "all" or "outliers"
    mse: float


@dataclass(frozen=True)
class ErrorReport:
    """Rows of activation-level MSE; values stored unscaled.

    The text rendering multiplies by 100 (the customary x10^-2 display).
    """

    rows: tuple[ReportRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("method,param_kind,layer_bin,scope,mse\n")
        for r in self.rows:
            buf.write(f"{r.method},{r.param_kind},{r.layer_bin},{r.scope},{r.mse!r}\n")
        return buf.getvalue()

    def format_table(self) -> str:
        header = ("method", "param_kind", "layer_bin", "scope", "mse (x10^-2)")
        table = [header] + [
            (r.method, r.param_kind, r.layer_bin, r.scope, f"{100.0 * r.mse:.4f}")
            for r in self.rows
        ]
        widths = [max(len(row[i]) for row in table) for i in range(len(header))]
        lines = [
            "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
            for row in table
        ]
        return "\n".join(lines)

    def mse(self, method: str, scope: str = "all") -> float:
        for r in self.rows:
            if r.method == method and r.scope == scope:
                return r.mse
        raise UsageError(f"no row for method={method!r} scope={scope!r}")


def allocation_mse_objective(pairs, alpha: float, *, group_size: int = 128):
    """Objective for the genetic bit-allocation search.

    ``pairs`` is a sequence of (delta, calibration) matrices; the returned
    callable maps an Allocation to the mean activation MSE of its induced
    schedule across the pairs.  SVDs are precomputed once at full usable
    rank so repeated evaluations only pay for quantization.
    """
    from .planner import allocation_schedule

    prepared = []
    for delta, x in pairs:
        delta = as_matrix(delta, "delta")
        x = as_matrix(x, "x")
        rank = min(delta.shape)
        prepared.append((delta, x, thin_svd(delta, rank)))

    def objective(alloc):
        schedule = allocation_schedule(alloc, alpha)
        total = 0.0
        for delta, x, svd in prepared:
            cm = compress_matrix(delta, x, schedule, group_size=group_size, svd=svd)
            total += activation_error(delta, decompress_matrix(cm), x)
        return total / len(prepared)

    return objective


def _masked(w: np.ndarray, columns) -> np.ndarray:
    out = np.zeros_like(w)
    out[:, columns] = w[:, columns]
    return out


def compare_methods(
    delta: np.ndarray,
    x: np.ndarray,
    alpha: float,
    *,
    param_kind: str = "param",
    layer_bin: str = "all",
    outlier_fraction: float = 0.01,
    group_size: int = 128,
) -> ErrorReport:
    """Evaluate the four equal-budget methods on one delta matrix.

    Methods: 16-bit low-rank truncation, full-matrix 1-bit sign
    quantization, the single-precision "3" schedule, and the triple
    "8+3+2" schedule.  Each contributes an "all" row and an "outliers"
    row (activation MSE with non-outlier columns zeroed in both the
    reference and the reconstruction).  The sign method's budget is fixed
    at one bit per element, which equals the alpha budget only at 1/16.
    """
    delta = as_matrix(delta, "delta")
    x = as_matrix(x, "x")
    h_out, h_in = delta.shape

    schedules = {
        "low-rank": make_schedule("16", alpha, h_out, h_in),
        "single": make_schedule(SINGLE_SPEC, alpha, h_out, h_in),
        "triple": make_schedule(TRIPLE_SPEC, alpha, h_out, h_in),
    }
    max_rank = max(s.total_ranks for s in schedules.values())
    svd = thin_svd(delta, max_rank) if max_rank else None

    reconstructions = {}
    for method, schedule in schedules.items():
        cm = compress_matrix(delta, x, schedule, group_size=group_size, svd=svd)
        reconstructions[method] = decompress_matrix(cm)
    reconstructions["sign-1bit"] = dequantize(sign_quantize(delta, f16_grid=True))

    outliers = outlier_columns(delta, outlier_fraction)
    rows = []
    for method in METHODS:
        w_hat = reconstructions[method]
        rows.append(
            ReportRow(method, param_kind, layer_bin, "all",
                      activation_error(delta, w_hat, x))
        )
        rows.append(
            ReportRow(method, param_kind, layer_bin, "outliers",
                      activation_error(_masked(delta, outliers),
                                       _masked(w_hat, outliers), x))
        )
    return ErrorReport(rows=tuple(rows))

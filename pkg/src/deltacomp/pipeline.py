"""End-to-end mixed-precision compression of delta weights.

A delta matrix is factored with a thin SVD and each scheduled rank range
of the factors is quantized at its own bit width: the V slice (stored
transposed) is quantized against the calibration activations X, then the
U slice is quantized against the activations that the already-quantized
V slice produces, i.e. sigma_slice @ V_hat_slice^T @ X.  16-bit groups
bypass quantization and are stored as raw float16; 1-bit groups use sign
quantization.

The serialized container ("DCOM") mirrors the checkpoint format: magic,
version, JSON header, then 64-byte aligned payload blocks (sigma and
per-group scales/zeros at float16, packed code bitstreams with U codes
followed by V codes).
"""

import concurrent.futures
import fnmatch
import json

import numpy as np

from .errors import (
    CHECKSUM_MISMATCH,
    MAGIC_MISMATCH,
    MISSING_CALIBRATION,
    RANK_OVERFLOW,
    TRUNCATED,
    VERSION_MISMATCH,
    IntegrityError,
    NumericsError,
    UsageError,
)
from .model_io import ALIGNMENT, DeltaWeights
from .numerics import Rng, SvdResult, as_matrix, fnv1a64, gaussian_matrix, thin_svd
from .planner import PrecisionSchedule, ScheduleGroup, make_schedule
from .quantizers import (
    KBIT_CHOICES,
    QuantizedTensor,
    dequantize,
    gptq_quantize,
    pack_bits,
    sign_quantize,
    unpack_bits,
)
from dataclasses import dataclass

__all__ = [
    "CompressedGroup",
    "CompressedMatrix",
    "DeltaPackage",
    "PackageStats",
    "RawEntry",
    "compress_matrix",
    "compress_model",
    "decompress_matrix",
    "decompress_package",
    "fused_apply",
    "load_package",
    "package_stats",
    "predicted_file_bytes",
    "save_package",
    "synthetic_calibration_matrix",
]

PACKAGE_MAGIC = b"DCOM"
PACKAGE_VERSION = 1
DEFAULT_GROUP_SIZE = 128
SYNTH_CALIB_SAMPLES = 512


def _to_f16(a: np.ndarray, what: str) -> np.ndarray:
    out = a.astype(np.float16)
    if not np.isfinite(out).all():
        raise NumericsError(f"{what} overflows 16-bit float storage")
    return out


@dataclass(frozen=True)
class CompressedGroup:
    """One scheduled rank range of quantized factors.

    ``u`` covers the U slice (h_out x width); ``v`` covers the transposed
    V slice (width x h_in).  Both are QuantizedTensors except for 16-bit
    groups, which hold raw float16 arrays.
    """

    bits: int
    r_begin: int
    r_end: int
    group_size: int
    u: QuantizedTensor | np.ndarray
    v: QuantizedTensor | np.ndarray

    @property
    def width(self) -> int:
        return self.r_end - self.r_begin

    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        """Dequantized (u_slice, v_slice_transposed) at float32."""
        if self.bits == 16:
            return self.u.astype(np.float32), self.v.astype(np.float32)
        return dequantize(self.u), dequantize(self.v)


@dataclass(frozen=True)
class CompressedMatrix:
    """Compressed form of one h_out x h_in delta matrix."""

    h_out: int
    h_in: int
    sigma: np.ndarray  # float16, one entry per retained rank
    groups: tuple[CompressedGroup, ...]
    schedule: PrecisionSchedule

    def __post_init__(self):
        width_sum = sum(g.width for g in self.groups)
        if width_sum != len(self.sigma) or width_sum != self.schedule.total_ranks:
            raise UsageError(
                f"group widths ({width_sum}), sigma ({len(self.sigma)}) and "
                f"schedule ranks ({self.schedule.total_ranks}) must agree"
            )


@dataclass(frozen=True)
class RawEntry:
    """Uncompressed float16 tensor (1-D parameters or opted-out matrices)."""

    data: np.ndarray  # float16
    vec: bool


@dataclass(frozen=True)
class DeltaPackage:
    """Named compressed matrices plus the package-level header fields."""

    entries: dict[str, CompressedMatrix | RawEntry]
    alpha: float
    schedule_spec: str
    backbone_checksum: int


def compress_matrix(
    delta_w: np.ndarray,
    x: np.ndarray,
    schedule: PrecisionSchedule,
    *,
    group_size: int = DEFAULT_GROUP_SIZE,
    svd: SvdResult | None = None,
) -> CompressedMatrix:
    """Compress one delta matrix under a precision schedule.

    Group order follows the schedule (descending bits).  Within a group
    the V slice is quantized first against X, then the U slice against
    sigma_slice * V_hat^T @ X, so U's quantizer sees the error the V
    quantizer already committed.  Pass a precomputed ``svd`` (of rank >=
    the schedule total) to amortize the factorization across schedules.
    """
    delta_w = as_matrix(delta_w, "delta_w")
    h_out, h_in = delta_w.shape
    r_total = schedule.total_ranks
    if r_total > min(h_out, h_in):
        raise UsageError(
            f"schedule needs {r_total} ranks, matrix is {h_out}x{h_in}",
            code=RANK_OVERFLOW,
        )
    if not schedule.fits(h_out, h_in):
        raise UsageError(
            f"schedule payload exceeds its own alpha={schedule.alpha} budget "
            f"for {h_out}x{h_in}"
        )
    if r_total == 0:
        return CompressedMatrix(
            h_out=h_out,
            h_in=h_in,
            sigma=np.zeros(0, dtype=np.float16),
            groups=(),
            schedule=schedule,
        )
    x = as_matrix(x, "x")
    if x.shape[0] != h_in:
        raise UsageError(
            f"calibration has {x.shape[0]} rows, expected h_in={h_in}"
        )

    if svd is None:
        svd = thin_svd(delta_w, r_total)
    elif svd.r < r_total:
        raise UsageError(f"precomputed SVD rank {svd.r} < schedule rank {r_total}")
    sigma16 = _to_f16(svd.sigma[:r_total], "singular values")

    groups = []
    for g in schedule.groups:
        u_slice = np.ascontiguousarray(svd.u[:, g.r_begin : g.r_end])
        vt_slice = np.ascontiguousarray(svd.v[:, g.r_begin : g.r_end].T)
        if g.bits == 16:
            u_payload: QuantizedTensor | np.ndarray = _to_f16(u_slice, "16-bit group")
            v_payload: QuantizedTensor | np.ndarray = _to_f16(vt_slice, "16-bit group")
        elif g.bits == 1:
            v_payload = sign_quantize(vt_slice, f16_grid=True)
            u_payload = sign_quantize(u_slice, f16_grid=True)
        elif g.bits in KBIT_CHOICES:
            v_payload, _ = gptq_quantize(
                vt_slice, x, g.bits, group_size, f16_grid=True
            )
            v_hat_t = dequantize(v_payload).astype(np.float64)
            scale = sigma16[g.r_begin : g.r_end].astype(np.float64)
            x_u = (scale[:, None] * (v_hat_t @ x.astype(np.float64))).astype(
                np.float32
            )
            u_payload, _ = gptq_quantize(
                u_slice, x_u, g.bits, group_size, f16_grid=True
            )
        else:
            raise UsageError(f"unsupported group bit width {g.bits}")
        groups.append(
            CompressedGroup(
                bits=g.bits,
                r_begin=g.r_begin,
                r_end=g.r_end,
                group_size=group_size,
                u=u_payload,
                v=v_payload,
            )
        )
    return CompressedMatrix(
        h_out=h_out, h_in=h_in, sigma=sigma16, groups=tuple(groups), schedule=schedule
    )


def decompress_matrix(cm: CompressedMatrix) -> np.ndarray:
    """Materialize the dense delta: sum over groups of U diag(sigma) V^T."""
    acc = np.zeros((cm.h_out, cm.h_in))
    sigma = cm.sigma.astype(np.float64)
    for g in cm.groups:
        u_slice, vt_slice = g.factors()
        scaled = u_slice.astype(np.float64) * sigma[g.r_begin : g.r_end]
        acc += scaled @ vt_slice.astype(np.float64)
    return acc.astype(np.float32)


def fused_apply(cm: CompressedMatrix, x_vec: np.ndarray, base_op=None) -> np.ndarray:
    """Compute delta @ x from the packed factors without materializing delta.

    Evaluates U @ (sigma * (V^T @ x)) group by group with on-the-fly
    dequantization, so the high-water memory mark stays at the factor
    slices (never an h_out x h_in buffer).  ``x_vec`` may be a vector or
    an (h_in, batch) matrix; ``base_op``, when given, contributes
    base_op(x_vec) to the result (the backbone's own product, typically).
    """
    x_arr = np.asarray(x_vec, dtype=np.float32)
    if x_arr.ndim not in (1, 2) or x_arr.shape[0] != cm.h_in:
        raise UsageError(
            f"input of shape {x_arr.shape} does not match h_in={cm.h_in}"
        )
    out_shape = (cm.h_out,) if x_arr.ndim == 1 else (cm.h_out, x_arr.shape[1])
    acc = np.zeros(out_shape, dtype=np.float32)
    sigma = cm.sigma.astype(np.float32)
    for g in cm.groups:
        # Dequantize one factor at a time; the live set stays well below
        # any h_out x h_in buffer.
        vt_slice = g.v.astype(np.float32) if g.bits == 16 else dequantize(g.v)
        t = vt_slice @ x_arr
        del vt_slice
        if t.ndim == 1:
            t *= sigma[g.r_begin : g.r_end]
        else:
            t *= sigma[g.r_begin : g.r_end, None]
        u_slice = g.u.astype(np.float32) if g.bits == 16 else dequantize(g.u)
        acc += u_slice @ t
    if base_op is not None:
        acc = acc + np.asarray(base_op(x_vec), dtype=np.float32).reshape(out_shape)
    return acc


def synthetic_calibration_matrix(
    seed: int, name: str, h_in: int, samples: int = SYNTH_CALIB_SAMPLES
) -> np.ndarray:
    """Gaussian stand-in activations for a tensor without real calibration."""
    rng = Rng.stream(seed, f"calibration/{name}")
    return gaussian_matrix(rng, h_in, samples)


def compress_model(
    delta: DeltaWeights,
    calibration: dict[str, np.ndarray] | None,
    spec: str,
    alpha: float,
    *,
    group_size: int = DEFAULT_GROUP_SIZE,
    synthetic_calibration: bool = False,
    seed: int = 0,
    calib_samples: int = SYNTH_CALIB_SAMPLES,
    exclude: tuple[str, ...] = (),
    threads: int = 1,
) -> DeltaPackage:
    """Compress every 2-D delta tensor; pass 1-D and excluded ones through.

    Each matrix gets its own schedule from ``make_schedule`` on its
    dimensions, keeping alpha exact for rectangular shapes.  Tensors
    without calibration activations use a seeded Gaussian fallback when
    ``synthetic_calibration`` is set and fail otherwise.  Deterministic
    for fixed inputs and seed, also with ``threads`` > 1 (per-tensor work
    is independent; assembly order is the tensor order).
    """
    calibration = calibration or {}

    def build(item):
        name, tensor = item
        if tensor.ndim == 1:
            return name, RawEntry(data=_to_f16(tensor, name), vec=True)
        if any(fnmatch.fnmatchcase(name, pat) for pat in exclude):
            return name, RawEntry(data=_to_f16(tensor, name), vec=False)
        h_out, h_in = tensor.shape
        x = calibration.get(name)
        if x is None:
            if not synthetic_calibration:
                raise UsageError(
                    f"no calibration activations for tensor {name!r} and the "
                    f"synthetic fallback is disabled",
                    code=MISSING_CALIBRATION,
                )
            x = synthetic_calibration_matrix(seed, name, h_in, calib_samples)
        schedule = make_schedule(spec, alpha, h_out, h_in)
        return name, compress_matrix(tensor, x, schedule, group_size=group_size)

    items = list(delta.tensors.items())
    if threads > 1 and len(items) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(build, items))
    else:
        results = [build(item) for item in items]
    return DeltaPackage(
        entries=dict(results),
        alpha=alpha,
        schedule_spec=spec,
        backbone_checksum=delta.backbone_checksum,
    )


def decompress_package(pkg: DeltaPackage) -> DeltaWeights:
    """Expand a package back into dense float32 delta weights."""
    tensors = {}
    for name, entry in pkg.entries.items():
        if isinstance(entry, RawEntry):
            tensors[name] = entry.data.astype(np.float32)
        else:
            tensors[name] = decompress_matrix(entry)
    return DeltaWeights(tensors=tensors, backbone_checksum=pkg.backbone_checksum)


@dataclass(frozen=True)
class PackageStats:
    """Bit accounting for one package.

    ``payload_bits`` counts factor codes (plus raw 16-bit groups) of
    compressed entries; ``budget_bits`` is 16 alpha sum(h_out h_in) over
    the same entries; metadata (scales, zeros, sigma at 16 bits each) is
    reported separately, as are passthrough tensors.
    """

    payload_bits: int
    budget_bits: float
    metadata_bits: int
    raw_bits: int

    @property
    def overhead_ratio(self) -> float:
        return self.metadata_bits / self.payload_bits if self.payload_bits else 0.0


def package_stats(pkg: DeltaPackage) -> PackageStats:
    payload = 0
    metadata = 0
    raw = 0
    budget = 0.0
    for entry in pkg.entries.values():
        if isinstance(entry, RawEntry):
            raw += 16 * entry.data.size
            continue
        budget += 16.0 * pkg.alpha * entry.h_out * entry.h_in
        metadata += 16 * len(entry.sigma)
        for g in entry.groups:
            if g.bits == 16:
                payload += 16 * (g.u.size + g.v.size)
            else:
                payload += g.u.payload_bits + g.v.payload_bits
                metadata += g.u.metadata_bits + g.v.metadata_bits
    return PackageStats(
        payload_bits=payload,
        budget_bits=budget,
        metadata_bits=metadata,
        raw_bits=raw,
    )


# --- DCOM serialization ----------------------------------------------------


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


class _Layout:
    """Assigns 64-byte aligned payload offsets and remembers the blocks."""

    def __init__(self):
        self.blocks: list[tuple[int, bytes]] = []
        self.end = 0

    def add(self, data: bytes) -> int:
        offset = _align(self.end)
        self.blocks.append((offset, data))
        self.end = offset + len(data)
        return offset

    def payload(self) -> bytes:
        buf = bytearray(self.end)
        for offset, data in self.blocks:
            buf[offset : offset + len(data)] = data
        return bytes(buf)


def _f16_bytes(a: np.ndarray) -> bytes:
    return np.asarray(a, dtype="<f2").tobytes()


def _qt_codes(qt: QuantizedTensor) -> np.ndarray:
    return qt.codes().ravel()


def _serialize_entry(name, entry, layout):
    if isinstance(entry, RawEntry):
        offset = layout.add(_f16_bytes(entry.data))
        desc = {
            "name": name,
            "kind": "raw",
            "rows": int(entry.data.shape[0]),
            "cols": int(entry.data.shape[1]) if entry.data.ndim == 2 else 1,
            "vec": entry.vec,
            "offset": offset,
            "len_bytes": entry.data.size * 2,
        }
        return desc

    desc = {
        "name": name,
        "kind": "compressed",
        "h_out": entry.h_out,
        "h_in": entry.h_in,
        "sigma_offset": layout.add(_f16_bytes(entry.sigma)),
        "sigma_count": len(entry.sigma),
        "groups": [],
    }
    for g in entry.groups:
        gdesc = {
            "bits": g.bits,
            "r_begin": g.r_begin,
            "r_end": g.r_end,
            "group_size": g.group_size,
        }
        if g.bits == 16:
            gdesc["u_offset"] = layout.add(_f16_bytes(g.u))
            gdesc["u_len_bytes"] = g.u.size * 2
            gdesc["v_offset"] = layout.add(_f16_bytes(g.v))
            gdesc["v_len_bytes"] = g.v.size * 2
        else:
            gdesc["u_scales_offset"] = layout.add(_f16_bytes(g.u.scales))
            gdesc["u_scales_count"] = g.u.scales.size
            if g.bits != 1:
                gdesc["u_zeros_offset"] = layout.add(_f16_bytes(g.u.zeros))
            gdesc["v_scales_offset"] = layout.add(_f16_bytes(g.v.scales))
            gdesc["v_scales_count"] = g.v.scales.size
            if g.bits != 1:
                gdesc["v_zeros_offset"] = layout.add(_f16_bytes(g.v.zeros))
            codes = np.concatenate([_qt_codes(g.u), _qt_codes(g.v)])
            packed = pack_bits(codes, g.bits)
            gdesc["codes_offset"] = layout.add(packed)
            gdesc["codes_len_bytes"] = len(packed)
        desc["groups"].append(gdesc)
    return desc


def _build_package_bytes(pkg: DeltaPackage) -> tuple[bytes, bytes]:
    layout = _Layout()
    entries = [
        _serialize_entry(name, entry, layout) for name, entry in pkg.entries.items()
    ]
    payload = layout.payload()
    header = {
        "alpha": pkg.alpha,
        "schedule": pkg.schedule_spec,
        "backbone_checksum": str(pkg.backbone_checksum),
        "payload_checksum": str(fnv1a64(payload)),
        "entries": entries,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return header_bytes, payload


def predicted_file_bytes(pkg: DeltaPackage) -> int:
    """Exact byte size :func:`save_package` will produce."""
    header_bytes, payload = _build_package_bytes(pkg)
    return 16 + len(header_bytes) + len(payload)


def save_package(pkg: DeltaPackage, path) -> None:
    """Write the DCOM container; byte-identical for equal packages."""
    header_bytes, payload = _build_package_bytes(pkg)
    with open(path, "wb") as fh:
        fh.write(PACKAGE_MAGIC)
        fh.write(PACKAGE_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(payload)


def _read_f16(payload, offset, count, what) -> np.ndarray:
    end = offset + count * 2
    if end > len(payload):
        raise IntegrityError(f"{what} block extends past payload", code=TRUNCATED)
    return np.frombuffer(payload[offset:end], dtype="<f2").copy()


def _split_codes(packed, u_count, v_count, bits, rows_u, cols_u, rows_v, cols_v):
    codes = unpack_bits(packed, u_count + v_count, bits)
    u_codes = codes[:u_count].reshape(rows_u, cols_u)
    v_codes = codes[u_count:].reshape(rows_v, cols_v)
    return pack_bits(u_codes, bits), pack_bits(v_codes, bits)


def _deserialize_group(gdesc, h_out, h_in, payload):
    bits = int(gdesc["bits"])
    r_begin, r_end = int(gdesc["r_begin"]), int(gdesc["r_end"])
    width = r_end - r_begin
    group_size = int(gdesc["group_size"])
    if bits == 16:
        u = _read_f16(payload, gdesc["u_offset"], h_out * width, "u factor").reshape(
            h_out, width
        )
        v = _read_f16(payload, gdesc["v_offset"], width * h_in, "v factor").reshape(
            width, h_in
        )
        return CompressedGroup(bits, r_begin, r_end, group_size, u, v)

    u_scales = _read_f16(
        payload, gdesc["u_scales_offset"], gdesc["u_scales_count"], "u scales"
    ).astype(np.float64)
    v_scales = _read_f16(
        payload, gdesc["v_scales_offset"], gdesc["v_scales_count"], "v scales"
    ).astype(np.float64)
    if bits == 1:
        u_zeros = v_zeros = None
        u_gs, v_gs = width, h_in
    else:
        u_zeros = _read_f16(
            payload, gdesc["u_zeros_offset"], gdesc["u_scales_count"], "u zeros"
        ).astype(np.float64)
        v_zeros = _read_f16(
            payload, gdesc["v_zeros_offset"], gdesc["v_scales_count"], "v zeros"
        ).astype(np.float64)
        n_groups_u = (width + group_size - 1) // group_size
        n_groups_v = (h_in + group_size - 1) // group_size
        u_scales = u_scales.reshape(h_out, n_groups_u)
        u_zeros = u_zeros.reshape(h_out, n_groups_u)
        v_scales = v_scales.reshape(width, n_groups_v)
        v_zeros = v_zeros.reshape(width, n_groups_v)
        u_gs = v_gs = group_size

    offset = int(gdesc["codes_offset"])
    nbytes = int(gdesc["codes_len_bytes"])
    if offset + nbytes > len(payload):
        raise IntegrityError("codes block extends past payload", code=TRUNCATED)
    u_packed, v_packed = _split_codes(
        payload[offset : offset + nbytes],
        h_out * width,
        width * h_in,
        bits,
        h_out,
        width,
        width,
        h_in,
    )
    u = QuantizedTensor(
        rows=h_out, cols=width, bits=bits, group_size=u_gs,
        scales=u_scales, zeros=u_zeros, packed=u_packed,
    )
    v = QuantizedTensor(
        rows=width, cols=h_in, bits=bits, group_size=v_gs,
        scales=v_scales, zeros=v_zeros, packed=v_packed,
    )
    return CompressedGroup(bits, r_begin, r_end, group_size, u, v)


def load_package(path) -> DeltaPackage:
    """Read a DCOM container, verifying magic, version, and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise IntegrityError("file too short for a DCOM prologue", code=TRUNCATED)
    if blob[:4] != PACKAGE_MAGIC:
        raise IntegrityError(
            f"bad magic {blob[:4]!r}, expected {PACKAGE_MAGIC!r}",
            code=MAGIC_MISMATCH,
        )
    version = int.from_bytes(blob[4:8], "little")
    if version != PACKAGE_VERSION:
        raise IntegrityError(
            f"unsupported DCOM version {version}", code=VERSION_MISMATCH
        )
    header_len = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + header_len:
        raise IntegrityError("header extends past end of file", code=TRUNCATED)
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
        alpha = float(header["alpha"])
        spec = header["schedule"]
        backbone_checksum = int(header["backbone_checksum"])
        payload_checksum = int(header["payload_checksum"])
        entry_descs = header["entries"]
    except (ValueError, KeyError, TypeError) as exc:
        raise IntegrityError(f"malformed DCOM header: {exc}") from None

    payload = blob[16 + header_len :]
    if fnv1a64(payload) != payload_checksum:
        raise IntegrityError(
            "payload checksum mismatch (corrupt or truncated package)",
            code=CHECKSUM_MISMATCH,
        )

    entries: dict[str, CompressedMatrix | RawEntry] = {}
    for desc in entry_descs:
        name = desc["name"]
        if desc.get("kind") == "raw":
            count = int(desc["rows"]) * int(desc["cols"])
            data = _read_f16(payload, int(desc["offset"]), count, name)
            if not desc.get("vec"):
                data = data.reshape(int(desc["rows"]), int(desc["cols"]))
            entries[name] = RawEntry(data=data, vec=bool(desc.get("vec")))
            continue
        h_out, h_in = int(desc["h_out"]), int(desc["h_in"])
        sigma = _read_f16(
            payload, int(desc["sigma_offset"]), int(desc["sigma_count"]), "sigma"
        )
        groups = tuple(
            _deserialize_group(g, h_out, h_in, payload) for g in desc["groups"]
        )
        schedule = PrecisionSchedule(
            groups=tuple(
                ScheduleGroup(g.bits, g.r_begin, g.r_end) for g in groups
            ),
            alpha=alpha,
        )
        entries[name] = CompressedMatrix(
            h_out=h_out, h_in=h_in, sigma=sigma, groups=groups, schedule=schedule
        )
    return DeltaPackage(
        entries=entries,
        alpha=alpha,
        schedule_spec=spec,
        backbone_checksum=backbone_checksum,
    )

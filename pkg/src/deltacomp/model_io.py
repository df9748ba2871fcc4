"""Checkpoint loading/saving, delta extraction and restoration, and
multi-model size accounting.

The on-disk format ("DCKP") is deliberately minimal: a magic/version
prologue, a JSON table of tensor names/shapes/offsets, then little-endian
float32 payloads at 64-byte aligned offsets.  The integrity checksum is
FNV-1a 64 over the payload bytes only, so renaming a file never
invalidates anything derived from it.
"""

import json

import numpy as np

from .errors import (
    CHECKSUM_MISMATCH,
    MAGIC_MISMATCH,
    TRUNCATED,
    VERSION_MISMATCH,
    IntegrityError,
    NumericsError,
    UsageError,
)
from .numerics import fnv1a64
from dataclasses import dataclass, field

__all__ = [
    "DeltaWeights",
    "ModelCheckpoint",
    "extract_delta",
    "load_checkpoint",
    "restore",
    "save_checkpoint",
    "total_size",
]

CHECKPOINT_MAGIC = b"DCKP"
CHECKPOINT_VERSION = 1
ALIGNMENT = 64


def _as_tensor(value, name):
    arr = np.ascontiguousarray(value, dtype=np.float32)
    if arr.ndim not in (1, 2):
        raise UsageError(f"tensor {name!r} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise UsageError(f"tensor {name!r} is empty")
    if not np.isfinite(arr).all():
        raise NumericsError(f"tensor {name!r} contains non-finite values")
    return arr


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _layout(tensors):
    """(name, tensor, offset, nbytes) tuples at 64-byte aligned offsets."""
    entries = []
    offset = 0
    for name, tensor in tensors.items():
        offset = _align(offset)
        nbytes = tensor.size * 4
        entries.append((name, tensor, offset, nbytes))
        offset += nbytes
    return entries, offset


def _payload_bytes(tensors) -> bytes:
    entries, total = _layout(tensors)
    buf = bytearray(total)
    for _, tensor, offset, nbytes in entries:
        buf[offset : offset + nbytes] = tensor.astype("<f4").tobytes()
    return bytes(buf)


@dataclass(frozen=True)
class ModelCheckpoint:
    """Named float32 tensors plus an FNV-1a checksum of their payload.

    Tensor iteration order is insertion order and survives save/load.
    """

    tensors: dict[str, np.ndarray]
    checksum: int = field(default=0)

    @classmethod
    def from_tensors(cls, tensors) -> "ModelCheckpoint":
        """Build from a mapping or an iterable of (name, tensor) pairs."""
        pairs = tensors.items() if hasattr(tensors, "items") else tensors
        clean = {}
        for name, value in pairs:
            if not isinstance(name, str) or not name:
                raise UsageError(f"tensor names must be non-empty strings, got {name!r}")
            if name in clean:
                raise UsageError(f"duplicate tensor name {name!r}")
            clean[name] = _as_tensor(value, name)
        return cls(tensors=clean, checksum=fnv1a64(_payload_bytes(clean)))


@dataclass(frozen=True)
class DeltaWeights:
    """Per-tensor difference aligned - backbone, tied to a backbone checksum."""

    tensors: dict[str, np.ndarray]
    backbone_checksum: int


def _check_same_structure(a_tensors, b_tensors, a_label, b_label):
    a_names = set(a_tensors)
    b_names = set(b_tensors)
    if a_names != b_names:
        missing = sorted(b_names - a_names)
        extra = sorted(a_names - b_names)
        raise UsageError(
            f"tensor names differ between {a_label} and {b_label}: "
            f"missing={missing} extra={extra}"
        )
    for name in a_tensors:
        if a_tensors[name].shape != b_tensors[name].shape:
            raise UsageError(
                f"tensor {name!r} shape {a_tensors[name].shape} in {a_label} "
                f"!= {b_tensors[name].shape} in {b_label}"
            )


def extract_delta(aligned: ModelCheckpoint, backbone: ModelCheckpoint) -> DeltaWeights:
    """Element-wise aligned - backbone for every tensor."""
    _check_same_structure(aligned.tensors, backbone.tensors, "aligned", "backbone")
    deltas = {
        name: (aligned.tensors[name].astype(np.float64) - backbone.tensors[name])
        .astype(np.float32)
        for name in aligned.tensors
    }
    return DeltaWeights(tensors=deltas, backbone_checksum=backbone.checksum)


def restore(
    backbone: ModelCheckpoint, delta: DeltaWeights, *, force: bool = False
) -> ModelCheckpoint:
    """Element-wise backbone + delta, gated on the backbone checksum."""
    if not force and delta.backbone_checksum != backbone.checksum:
        raise IntegrityError(
            f"delta was extracted against backbone checksum "
            f"{delta.backbone_checksum}, this backbone has {backbone.checksum} "
            f"(pass force to override)",
            code=CHECKSUM_MISMATCH,
        )
    _check_same_structure(delta.tensors, backbone.tensors, "delta", "backbone")
    restored = {
        name: (backbone.tensors[name].astype(np.float64) + delta.tensors[name])
        .astype(np.float32)
        for name in backbone.tensors
    }
    return ModelCheckpoint.from_tensors(restored)


def total_size(n_models: int, model_size: float, alpha: float) -> float:
    """Storage for one backbone plus n compressed deltas: (1 + alpha n) M."""
    if n_models < 0:
        raise UsageError(f"n_models must be >= 0, got {n_models}")
    if model_size < 0:
        raise UsageError(f"model_size must be >= 0, got {model_size}")
    if not 0 <= alpha <= 1:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 + alpha * n_models) * model_size


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Write the DCKP container; byte-identical for equal checkpoints."""
    entries, _ = _layout(ckpt.tensors)
    table = []
    for name, tensor, offset, nbytes in entries:
        row = {
            "name": name,
            "rows": int(tensor.shape[0]),
            "cols": int(tensor.shape[1]) if tensor.ndim == 2 else 1,
            "offset": offset,
            "len_bytes": nbytes,
        }
        if tensor.ndim == 1:
            row["vec"] = True
        table.append(row)
    header = {"tensors": table, "checksum": str(ckpt.checksum)}
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(_payload_bytes(ckpt.tensors))


def load_checkpoint(path) -> ModelCheckpoint:
    """Read a DCKP container, verifying structure and payload checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise IntegrityError("file too short for a DCKP prologue", code=TRUNCATED)
    if blob[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(
            f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}",
            code=MAGIC_MISMATCH,
        )
    version = int.from_bytes(blob[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(
            f"unsupported DCKP version {version}", code=VERSION_MISMATCH
        )
    header_len = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + header_len:
        raise IntegrityError("header extends past end of file", code=TRUNCATED)
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
        table = header["tensors"]
        stored_checksum = int(header["checksum"])
    except (ValueError, KeyError, TypeError) as exc:
        raise IntegrityError(f"malformed DCKP header: {exc}") from None

    payload = blob[16 + header_len :]
    tensors = []
    for row in table:
        name = row["name"]
        rows, cols = int(row["rows"]), int(row["cols"])
        offset, nbytes = int(row["offset"]), int(row["len_bytes"])
        if rows * cols * 4 != nbytes:
            raise IntegrityError(f"tensor {name!r} length mismatch")
        if offset + nbytes > len(payload):
            raise IntegrityError(
                f"tensor {name!r} payload truncated", code=TRUNCATED
            )
        data = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4")
        tensors.append(
            (name, data.copy() if row.get("vec") else data.reshape(rows, cols).copy())
        )

    try:
        ckpt = ModelCheckpoint.from_tensors(tensors)
    except UsageError as exc:
        raise IntegrityError(f"malformed DCKP tensor table: {exc}") from None
    if ckpt.checksum != stored_checksum:
        raise IntegrityError(
            f"payload checksum {ckpt.checksum} != stored {stored_checksum}",
            code=CHECKSUM_MISMATCH,
        )
    return ckpt

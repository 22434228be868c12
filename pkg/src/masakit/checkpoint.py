"""Bit-exact binary checkpoint format.

Layout: magic "MASA" | version byte (1) | header length as u64 LE |
UTF-8 JSON header | contiguous little-endian row-major float32 payload.
The header holds a tensor index sorted by name (dtype, shape, byte
offset into the payload) and a metadata object.  JSON keys are sorted
and separators compact, so identical inputs serialize to identical
bytes.  Files are written to a temp path and renamed, so a failed save
never leaves a partial file behind.

Storage is float32 by design; compute everywhere else is float64.  The
boundary sits exactly here.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

MAGIC = b"MASA"
FORMAT_VERSION = 1
REQUIRED_META = ("L", "d", "heads", "mode", "S", "groups", "format_version")


class CheckpointError(ValidationError):
    """Base for malformed checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


class LayoutError(CheckpointError):
    pass


class PayloadError(CheckpointError):
    pass


# Tensor naming contract.  Dense storage mirrors the vanilla model so a
# dense output projection in qkv mode drops in without renames.


def dense_weight_name(tag: str, layer: int) -> str:
    return f"attn.{tag}.layer{layer}.weight"


def dict_atom_name(tag: str, s: int) -> str:
    return f"attn.{tag}.dict.{s}"


def coeff_name(tag: str) -> str:
    return f"attn.{tag}.coeff"


def group_dict_atom_name(tag: str, group: int, s: int) -> str:
    return f"attn.{tag}.group{group}.dict.{s}"


def group_coeff_name(tag: str, group: int) -> str:
    return f"attn.{tag}.group{group}.coeff"


def resid_factor_name(tag: str, layer: int, side: str) -> str:
    return f"attn.{tag}.resid.layer{layer}.{side}"


def whitening_name(tag: str, layer: int) -> str:
    return f"attn.{tag}.resid.whitening.layer{layer}"


@dataclass
class CheckpointData:
    """In-memory image of a checkpoint: float32 tensors plus metadata."""

    tensors: dict[str, np.ndarray]
    meta: dict


def _check_meta(meta: dict) -> None:
    missing = [k for k in REQUIRED_META if k not in meta]
    if missing:
        raise HeaderError(f"checkpoint meta missing keys {missing}")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Serialize tensors (cast to float32) plus metadata, atomically."""
    if len(tensors) == 0:
        raise ValidationError("checkpoint requires at least one tensor")
    _check_meta(meta)
    names = sorted(tensors)
    index = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        if arr.size == 0:
            raise ValidationError(f"tensor {name!r} is empty")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"tensor {name!r} contains non-finite entries")
        index.append(
            {"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"tensors": index, "meta": meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(bytes([FORMAT_VERSION]))
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise OSError(f"failed to write checkpoint {path}: {e}") from e


def header_bytes(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    """The exact JSON header save_checkpoint would emit (golden-file support)."""
    _check_meta(meta)
    index = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        index.append(
            {"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset}
        )
        offset += arr.nbytes
    return json.dumps(
        {"tensors": index, "meta": meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")


def load_checkpoint(path) -> CheckpointData:
    """Read and fully validate a checkpoint before exposing any data."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ValidationError(f"checkpoint file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 13 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a MASA checkpoint")
    version = raw[4]
    if version != FORMAT_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<Q", raw[5:13])
    if 13 + header_len > len(raw):
        raise HeaderError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[13 : 13 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"{path}: header is not valid JSON ({e})") from e
    if not isinstance(header, dict) or "tensors" not in header or "meta" not in header:
        raise HeaderError(f"{path}: header missing tensors/meta")
    meta = header["meta"]
    _check_meta(meta)

    index = header["tensors"]
    names = [entry.get("name") for entry in index]
    if names != sorted(names):
        raise LayoutError(f"{path}: tensor index is not sorted by name")
    if len(set(names)) != len(names):
        raise LayoutError(f"{path}: duplicate tensor names")

    payload = raw[13 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    prev_end = 0
    for entry in index:
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise LayoutError(f"{path}: tensor {name!r} has unsupported dtype")
        shape = tuple(entry["shape"])
        if any((not isinstance(n, int)) or n < 1 for n in shape):
            raise LayoutError(f"{path}: tensor {name!r} has invalid shape {shape}")
        offset = entry["offset"]
        nbytes = int(np.prod(shape)) * 4
        if offset < prev_end:
            raise LayoutError(f"{path}: tensor {name!r} overlaps the previous tensor")
        end = offset + nbytes
        if end > len(payload):
            raise PayloadError(f"{path}: payload short for tensor {name!r}")
        tensors[name] = (
            np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape).copy()
        )
        prev_end = end
    if prev_end != len(payload):
        raise PayloadError(f"{path}: payload has {len(payload) - prev_end} trailing bytes")
    return CheckpointData(tensors, meta)

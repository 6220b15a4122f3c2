"""BLT1 tensor files and checkpoint manifests.

BLT1 layout (all integers little-endian)::

    offset 0   4 bytes   magic b"BLT1"
    offset 4   u8        dtype code: 0 = float32, 1 = float64
    offset 5   u8        order, 1-4
    offset 6   2 bytes   reserved, zero
    offset 8   order x u64  extents
    then       row-major IEEE-754 little-endian payload

A checkpoint directory holds one ``.blt`` file per parameter and a
``manifest.json`` written last (via rename) listing file names and their
SHA-256 digests.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ArgumentError, FormatError, IntegrityError, LengthError, VersionError
from .tensor_core import MAX_ORDER, as_tensor

MAGIC = b"BLT1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
HEADER = struct.Struct("<4sBB2s")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def encode_tensor(t) -> bytes:
    t = as_tensor(t)
    header = HEADER.pack(MAGIC, _CODE_OF[t.dtype], t.ndim, b"\x00\x00")
    extents = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=DTYPE_CODES[_CODE_OF[t.dtype]]).tobytes()
    return header + extents + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise LengthError(f"file too short for a BLT1 header ({len(buf)} bytes)")
    magic, code, order, reserved = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if code not in DTYPE_CODES:
        raise VersionError(f"unknown dtype code {code}")
    if not 1 <= order <= MAX_ORDER:
        raise FormatError(f"order {order} outside 1-{MAX_ORDER}")
    if reserved != b"\x00\x00":
        raise FormatError("reserved header bytes are not zero")
    ext_end = HEADER.size + 8 * order
    if len(buf) < ext_end:
        raise LengthError("file truncated inside the extent table")
    shape = struct.unpack_from(f"<{order}Q", buf, HEADER.size)
    if any(n == 0 for n in shape):
        raise FormatError(f"zero extent in shape {shape}")
    dtype = DTYPE_CODES[code]
    expected = dtype.itemsize * int(np.prod(shape, dtype=object))
    if len(buf) - ext_end != expected:
        raise LengthError(f"payload is {len(buf) - ext_end} bytes, header promises {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=ext_end).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(t, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_checkpoint(params: dict[str, np.ndarray], directory, architecture: str,
                     seed: int | None = None, metadata: dict[str, Any] | None = None) -> Path:
    """Write each parameter as ``<name>.blt`` and then the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors, hashes, shapes = {}, {}, {}
    for name, value in params.items():
        fname = f"{name}.blt"
        data = encode_tensor(value)
        (d / fname).write_bytes(data)
        tensors[name] = fname
        hashes[fname] = hashlib.sha256(data).hexdigest()
        shapes[name] = list(np.shape(value))
    manifest = {
        "format_version": MANIFEST_VERSION,
        "architecture": architecture,
        "seed": seed,
        "shapes": shapes,
        "tensors": tensors,
        "sha256": hashes,
        "metadata": metadata or {},
    }
    _atomic_write_text(d / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d / MANIFEST_NAME


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise IntegrityError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version!r} (expected {MANIFEST_VERSION})")
    return manifest


def read_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Load and hash-check every tensor. Returns (params, manifest)."""
    d = Path(directory)
    manifest = read_manifest(d)
    params = {}
    for name, fname in manifest["tensors"].items():
        path = d / fname
        if not path.exists():
            raise IntegrityError(f"tensor {name!r}: file {fname} is missing")
        data = path.read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        if digest != manifest["sha256"].get(fname):
            raise IntegrityError(f"tensor {name!r}: hash mismatch for {fname}")
        params[name] = decode_tensor(data)
        if list(params[name].shape) != manifest["shapes"].get(name):
            raise IntegrityError(f"tensor {name!r}: shape {params[name].shape} disagrees with manifest")
    return params, manifest


def load_model(directory):
    """Rebuild the model object recorded in a checkpoint."""
    from .training.models import model_from_params

    params, manifest = read_checkpoint(directory)
    return model_from_params(manifest["architecture"], params, manifest.get("metadata", {})), manifest


def save_model(model, directory, seed: int | None = None, metadata: dict | None = None) -> Path:
    meta = dict(metadata or {})
    meta.update(model.metadata())
    if not model.arch:
        raise ArgumentError("model has no architecture tag")
    return write_checkpoint(model.params(), directory, model.arch, seed, meta)

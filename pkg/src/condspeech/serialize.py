"""On-disk formats: raw tensor files, checkpoint directories, block hashing.

Tensor format (all little-endian):
  u64 rank | u64 x rank extents | u8 dtype code | raw row-major payload
dtype codes: 0 = float32, 1 = float64.

A checkpoint is a directory holding one ``<key>.tensor`` file per named
tensor plus ``manifest.json`` describing block names, shapes, frozen flags,
the experiment config, and stage provenance.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Malformed tensor payload or checkpoint layout."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    header = struct.pack("<Q", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    header += struct.pack("<B", code)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return header + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 9:
        raise FormatError("tensor payload shorter than the minimal header")
    (rank,) = struct.unpack_from("<Q", buf, 0)
    off = 8
    if rank > 32:
        raise FormatError(f"implausible tensor rank {rank}")
    if len(buf) < off + 8 * rank + 1:
        raise FormatError("tensor header truncated")
    shape = struct.unpack_from(f"<{rank}Q", buf, off) if rank else ()
    off += 8 * rank
    (code,) = struct.unpack_from("<B", buf, off)
    off += 1
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise FormatError(f"unknown dtype code {code}")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = count * dtype.itemsize
    if len(buf) - off != expected:
        raise FormatError(f"payload size {len(buf) - off} does not match header ({expected} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path: str | Path, arr: np.ndarray):
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def _key_to_filename(key: str) -> str:
    return key + ".tensor"


def save_checkpoint(
    ckpt_dir: str | Path,
    named_tensors: dict[str, np.ndarray],
    *,
    frozen: set[str] | None = None,
    config: dict | None = None,
    stage: dict | None = None,
):
    """Write tensors + manifest. ``frozen`` holds keys currently not trainable."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    frozen = frozen or set()
    blocks = []
    for key in sorted(named_tensors):
        arr = named_tensors[key]
        save_tensor(ckpt_dir / _key_to_filename(key), arr)
        blocks.append(
            {
                "name": key,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "frozen": key in frozen,
            }
        )
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "blocks": blocks,
        "config": config or {},
        "stage": stage or {},
    }
    (ckpt_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_manifest(ckpt_dir: str | Path) -> dict:
    path = Path(ckpt_dir) / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {ckpt_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    return manifest


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = load_manifest(ckpt_dir)
    tensors = {}
    for block in manifest["blocks"]:
        key = block["name"]
        arr = load_tensor(ckpt_dir / _key_to_filename(key))
        if list(arr.shape) != block["shape"]:
            raise FormatError(f"{key}: stored shape {list(arr.shape)} != manifest {block['shape']}")
        tensors[key] = arr
    return tensors, manifest


def block_hash(named_tensors: dict[str, np.ndarray], prefix: str = "") -> str:
    """SHA-256 over the serialized bytes of every tensor whose key starts with
    ``prefix``, walked in sorted key order."""
    h = hashlib.sha256()
    for key in sorted(named_tensors):
        if key.startswith(prefix):
            h.update(key.encode())
            h.update(tensor_to_bytes(named_tensors[key]))
    return h.hexdigest()

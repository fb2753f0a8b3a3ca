"""Named-tensor bundles: the wire format for trunk broadcast and checkpoints.

A bundle is a flat dict of name -> float64 ndarray. Serialization is a
deterministic binary layout (names sorted, little-endian, row-major data),
so equal bundles always produce equal bytes and equal hashes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"FGT1"
CHECKPOINT_MAGIC = b"FGCK"

Tensors = dict[str, np.ndarray]


def serialize_tensors(tensors: Tensors) -> bytes:
    parts = [TENSOR_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(tensors[name], dtype=np.float64)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            parts.append(struct.pack("<I", dim))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def deserialize_tensors(data: bytes) -> Tensors:
    if data[:4] != TENSOR_MAGIC:
        raise ValueError("not a tensor bundle (bad magic)")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out: Tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape.append(dim)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).copy()
        off += n * 8
        out[name] = arr.reshape(shape)
    return out


def tensors_hash(tensors: Tensors) -> str:
    """sha256 hex digest of the serialized bundle."""
    return hashlib.sha256(serialize_tensors(tensors)).hexdigest()


def clone_tensors(tensors: Tensors) -> Tensors:
    return {k: v.copy() for k, v in tensors.items()}


def check_same_shapes(a: Tensors, b: Tensors, context: str = "") -> None:
    if a.keys() != b.keys():
        raise ValueError(f"tensor name mismatch {context}: "
                         f"{sorted(a.keys() ^ b.keys())}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(
                f"shape mismatch {context} for {k}: {a[k].shape} vs {b[k].shape}")


def save_checkpoint(path: str | Path, manifest: dict, tensors: Tensors) -> None:
    """Write manifest (JSON) plus a tensor bundle to a single file."""
    manifest_b = json.dumps(manifest, sort_keys=True,
                            separators=(",", ":")).encode("utf-8")
    blob = serialize_tensors(tensors)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest_b)))
        f.write(manifest_b)
        f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, Tensors]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack_from("<I", data, 4)
    manifest = json.loads(data[8:8 + mlen].decode("utf-8"))
    tensors = deserialize_tensors(data[8 + mlen:])
    return manifest, tensors

"""Versioned binary checkpoints.

Layout: ``b"LQLS"`` magic, uint32 format version, uint32 header length, a
UTF-8 JSON header (kind, metadata, array names and shapes), then every array
as little-endian float32 in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LQLS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_float32_exact(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round parameters through float32 so in-memory and reloaded models agree bit-for-bit."""
    return {k: np.asarray(v, dtype="<f4").astype(np.float64) for k, v in arrays.items()}


def save_checkpoint(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if not all(np.isfinite(np.asarray(v, dtype=np.float64)).all() for v in arrays.values()):
        raise CheckpointError("refusing to save non-finite parameters")
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.asarray(v, dtype="<f4").tobytes(order="C"))


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    offset = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        chunk = data[offset : offset + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"{path}: truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        offset += 4 * n
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    meta = dict(header["meta"])
    meta["kind"] = header["kind"]
    return meta, arrays

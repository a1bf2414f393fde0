"""Versioned binary checkpoints.

Layout: magic ``ECL1``, uint32 format version, uint32 header length, a UTF-8
JSON header, then the float32 payload (little-endian) of every array named in
the header, in header order. The header also carries integer state such as
generator states and the global step, so a restore is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ECL1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    """Write float32 ``arrays`` plus JSON-serialisable ``meta`` atomically."""
    entries, chunks = [], []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise CheckpointVersionError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointVersionError(f"{path}: corrupted header") from exc
    arrays, offset = {}, 12 + hlen
    if not isinstance(header, dict) or "arrays" not in header:
        raise CheckpointVersionError(f"{path}: header lacks the array table")
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if offset + 4 * n > len(raw):
            raise CheckpointError(f"{path}: payload truncated at {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, "<f4", n, offset).reshape(e["shape"]).astype(np.float32)
        offset += 4 * n
    return arrays, header["meta"]


def check_shapes(expected: Mapping[str, np.ndarray], loaded: Mapping[str, np.ndarray],
                 prefix: str = "") -> None:
    missing = sorted(set(expected) - set(loaded))
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks {prefix}{missing[0]}")
    for k, v in expected.items():
        if tuple(v.shape) != tuple(loaded[k].shape):
            raise CheckpointShapeError(
                f"{prefix}{k}: checkpoint shape {tuple(loaded[k].shape)}, expected {tuple(v.shape)}")


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)

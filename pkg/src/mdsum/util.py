"""Shared plumbing: deterministic RNG streams, exact float codecs, hashing.

Everything stochastic in this package draws from a numpy Generator obtained
through derive_rng, so that any pipeline stage can be rerun (serially or in
parallel) and produce bit-identical results.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Iterable

import numpy as np


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""


def _tag_to_int(tag: Any) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise ValueError(f"rng tag must be int or str, got {type(tag).__name__}")


def derive_rng(master_seed: int, *tags) -> np.random.Generator:
    """Deterministic child RNG for (master_seed, tags).

    Streams for distinct tag tuples are independent, and the mapping is
    stable across runs, platforms and process boundaries.
    """
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def encode_floats(arr: np.ndarray) -> dict:
    """Encode a float64 array value-exactly.

    The hex field carries the authoritative bit-exact values; the dec field
    is a human-readable mirror (Python reprs, which also round-trip).
    """
    a = np.asarray(arr, dtype=np.float64)
    flat = a.reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise NumericalError("refusing to serialize non-finite values")
    return {
        "shape": list(a.shape),
        "hex": [v.hex() for v in flat.tolist()],
        "dec": [repr(v) for v in flat.tolist()],
    }


def decode_floats(payload: dict) -> np.ndarray:
    shape = tuple(payload["shape"])
    vals = np.array([float.fromhex(h) for h in payload["hex"]], dtype=np.float64)
    return vals.reshape(shape)


def canonical_json(obj: Any) -> str:
    """Stable serialization used for hashing configs and artifacts."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")


def as_2d_f64(name: str, data) -> np.ndarray:
    """Validate and coerce input to a 2-D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    return arr

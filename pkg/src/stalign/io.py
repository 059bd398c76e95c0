"""STSD container: a binary file holding ``N`` series of ``T`` frames of ``p`` weights.

Layout (little-endian)::

    b"STSD" | version u32 | N u32 | T u32 | p u32 | N*T*p float64 (row-major)
    [ trailer length u32 | UTF-8 JSON trailer ]

The JSON trailer is optional and carries labels, grid dimensions and
provenance. A single series is stored with ``N = 1``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"STSD"
VERSION = 1
_HEADER = struct.Struct("<4s4I")


class StsdError(ValueError):
    """Malformed STSD content."""


@dataclass
class Stsd:
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def grid(self):
        g = self.meta.get("grid")
        return tuple(g) if g else None


def write_stsd(path, data, meta: dict | None = None) -> None:
    """Write an ``(N, T, p)`` array (or ``(N, T, h, w)``, flattened) to ``path``."""
    a = np.asarray(data, dtype="<f8")
    if a.ndim == 4:
        meta = dict(meta or {})
        meta.setdefault("grid", list(a.shape[2:]))
        a = a.reshape(a.shape[0], a.shape[1], -1)
    if a.ndim != 3:
        raise ValueError(f"expected (N, T, p) data, got shape {a.shape}")
    N, T, p = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, N, T, p))
        fh.write(np.ascontiguousarray(a).tobytes())
        if meta:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_stsd(path) -> Stsd:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise StsdError(f"{path}: file too short for an STSD header")
    magic, version, N, T, p = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StsdError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StsdError(f"{path}: unsupported version {version}")
    n = N * T * p * 8
    end = _HEADER.size + n
    if len(raw) < end:
        raise StsdError(f"{path}: truncated data ({len(raw) - _HEADER.size} of {n} bytes)")
    data = np.frombuffer(raw, dtype="<f8", count=N * T * p, offset=_HEADER.size)
    data = data.astype(float).reshape(N, T, p)
    meta = {}
    if len(raw) > end:
        if len(raw) < end + 4:
            raise StsdError(f"{path}: truncated trailer length")
        (m,) = struct.unpack_from("<I", raw, end)
        blob = raw[end + 4:end + 4 + m]
        if len(blob) != m:
            raise StsdError(f"{path}: truncated trailer")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise StsdError(f"{path}: invalid JSON trailer: {e}") from e
    return Stsd(data, meta)

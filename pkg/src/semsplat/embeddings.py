"""Embedding providers behind one small interface.

Three modes:
  synthetic — seeded hash of the content identity, mapped to a unit vector;
              fully deterministic, used by tests and the demo pipeline.
  file      — precomputed per-target vectors from a binary record file.
  http      — POST image bytes or UTF-8 text to an external encoder.

All providers return unit-norm float32 vectors of a fixed dimension.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import requests

DEFAULT_DIM = 512

LEVEL_OBJECT = 0
LEVEL_PART = 1

_EMB_MAGIC = b"SSEB"
_EMB_VERSION = 1


def normalize(vec: np.ndarray) -> np.ndarray:
    """Unit-normalize in float64, return float32."""
    v = np.asarray(vec, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError("cannot normalize a zero embedding")
    return (v / n).astype(np.float32)


def check_unit(vec: np.ndarray, tol: float = 1e-6) -> None:
    n = float(np.linalg.norm(np.asarray(vec, dtype=np.float64)))
    if abs(n - 1.0) > tol:
        raise ValueError(f"embedding norm {n} not within {tol} of 1")


class SyntheticProvider:
    """Deterministic stand-in encoder: content identity -> unit vector."""

    def __init__(self, seed: int = 0, dim: int = DEFAULT_DIM):
        self.seed = int(seed)
        self.dim = int(dim)

    def _vector(self, kind: str, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(
            str(self.seed).encode() + b"|" + kind.encode() + b"|" + payload
        ).digest()
        rng = np.random.Generator(
            np.random.PCG64(int.from_bytes(digest[:8], "little"))
        )
        return normalize(rng.standard_normal(self.dim))

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector("text", text.encode("utf-8"))

    def embed_image(self, data: bytes | np.ndarray) -> np.ndarray:
        if isinstance(data, np.ndarray):
            data = data.tobytes()
        return self._vector("image", data)


class FileProvider:
    """Precomputed target embeddings keyed by (id, level)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.records = load_embeddings_file(self.path)

    def embed_target(self, target_id: int, level: int) -> np.ndarray:
        key = (int(target_id), int(level))
        if key not in self.records:
            raise KeyError(f"no embedding stored for id={key[0]} level={key[1]}")
        return normalize(self.records[key])

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError(
            "file provider holds target vectors only; use synthetic or http for text"
        )


class HttpProvider:
    """Remote encoder: POST bytes, read back dim float32 (little-endian)."""

    def __init__(self, url: str, dim: int = DEFAULT_DIM, timeout: float = 10.0):
        self.url = url.rstrip("/")
        self.dim = int(dim)
        self.timeout = timeout

    def _post(self, endpoint: str, body: bytes, content_type: str) -> np.ndarray:
        resp = requests.post(
            f"{self.url}/{endpoint}",
            data=body,
            headers={"Content-Type": content_type},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        vec = np.frombuffer(resp.content, dtype="<f4")
        if vec.size != self.dim:
            raise ValueError(f"provider returned {vec.size} floats, expected {self.dim}")
        return normalize(vec)

    def embed_text(self, text: str) -> np.ndarray:
        return self._post("text", text.encode("utf-8"), "text/plain; charset=utf-8")

    def embed_image(self, data: bytes) -> np.ndarray:
        return self._post("image", data, "application/octet-stream")


# --- embeddings record file ---------------------------------------------------
#
# Layout (little-endian):
#   magic "SSEB" | u16 version | u32 dim | u32 count
#   per record: u32 id | u8 level | dim x f32


def save_embeddings_file(
    records: dict[tuple[int, int], np.ndarray], path: str | Path
) -> None:
    if not records:
        raise ValueError("refusing to write an empty embeddings file")
    dims = {v.shape[0] for v in records.values()}
    if len(dims) != 1:
        raise ValueError("all embeddings must share one dimension")
    dim = dims.pop()
    out = bytearray()
    out += _EMB_MAGIC
    out += struct.pack("<HII", _EMB_VERSION, dim, len(records))
    for (target_id, level), vec in sorted(records.items()):
        out += struct.pack("<IB", target_id, level)
        out += np.asarray(vec, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_embeddings_file(path: str | Path) -> dict[tuple[int, int], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _EMB_MAGIC:
        raise ValueError("not an embeddings file (bad magic)")
    version, dim, count = struct.unpack_from("<HII", raw, 4)
    if version != _EMB_VERSION:
        raise ValueError(f"unsupported embeddings file version {version}")
    offset = 4 + 10
    records: dict[tuple[int, int], np.ndarray] = {}
    for _ in range(count):
        target_id, level = struct.unpack_from("<IB", raw, offset)
        offset += 5
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).copy()
        offset += dim * 4
        records[(target_id, level)] = vec
    if offset != len(raw):
        raise ValueError("trailing bytes after last embedding record")
    return records

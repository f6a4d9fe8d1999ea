"""Identity bookkeeping: semantic deviation, low-dim codes, the mapping
dictionary, and pixel-aligned ground-truth feature frames.

Every object and part gets a scene-unique integer identity. Part embeddings
are deviated toward their parent object before use, so part-level semantics
carry subordination information. Each identity maps to a 3-component code on
a uniform lattice; codes are spaced at least four channel tolerances apart so
tolerance-band decoding is unambiguous, and (0, 0, 0) is reserved for
background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import LEVEL_OBJECT, LEVEL_PART, check_unit
from .masks import Hierarchy

DEFAULT_RESERVING_WEIGHT = 0.7
DEFAULT_TOLERANCE = 0.02
BACKGROUND_ID = 0

_DICT_MAGIC = b"SSDM"
_DICT_VERSION = 1
_NO_PARENT = 0xFFFFFFFF


class CodeCapacityError(ValueError):
    """Requested more codes than the lattice can hold at this tolerance."""


def deviate(f_o: np.ndarray, f_p: np.ndarray, w: float) -> np.ndarray:
    """Blend a part embedding toward its parent object and renormalize.

    The convex combination (1-w)*object + w*part is computed in float64 and
    renormalized to unit length so downstream inner products stay comparable.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"reserving weight {w} outside [0, 1]")
    check_unit(f_o)
    check_unit(f_p)
    o = np.asarray(f_o, dtype=np.float64)
    p = np.asarray(f_p, dtype=np.float64)
    if o.shape != p.shape:
        raise ValueError("object/part embedding dimensions differ")
    mixed = (1.0 - w) * o + w * p
    norm = float(np.linalg.norm(mixed))
    if norm < 1e-12:
        raise ValueError("degenerate deviation: embeddings cancel out")
    return (mixed / norm).astype(np.float32)


def _lattice_points_per_axis(spacing: float) -> int:
    return int(np.floor(1.0 / spacing + 1e-9)) + 1


def assign_codes(n_targets: int, t: float) -> tuple[list[np.ndarray], float]:
    """Place n distinct codes on a uniform [0,1]^3 lattice.

    Spacing is the coarsest grid that fits n targets, but never below 4*t so
    any two codes differ by more than 2*t in some channel. (0,0,0) stays
    reserved for background. Returns (codes, spacing).
    """
    if n_targets < 0:
        raise ValueError("negative target count")
    if t <= 0:
        raise ValueError("tolerance must be positive")
    if n_targets == 0:
        return [], max(4.0 * t, 1.0)
    # Coarsest m with m^3 - 1 >= n (minus one excludes the background code).
    m_fit = 2
    while m_fit**3 - 1 < n_targets:
        m_fit += 1
    spacing = max(4.0 * t, 1.0 / (m_fit - 1))
    m = _lattice_points_per_axis(spacing)
    capacity = m**3 - 1
    if capacity < n_targets:
        raise CodeCapacityError(
            f"lattice holds {capacity} codes at tolerance {t}; "
            f"{n_targets} requested — use a smaller tolerance"
        )
    codes: list[np.ndarray] = []
    for i in range(m):
        for j in range(m):
            for k in range(m):
                if i == j == k == 0:
                    continue
                codes.append(
                    np.array([i * spacing, j * spacing, k * spacing], dtype=np.float32)
                )
                if len(codes) == n_targets:
                    return codes, spacing
    raise AssertionError("unreachable: capacity was checked")


@dataclass
class TargetRecord:
    """One identity: embeddings, code, and subordination link."""

    id: int
    level: int  # LEVEL_OBJECT or LEVEL_PART
    raw_embedding: np.ndarray  # float32, unit
    effective_embedding: np.ndarray  # raw for objects, deviated for parts
    code: np.ndarray  # float32, 3 components in [0, 1]
    parent_id: int | None = None
    label: str | None = None

    def validate(self) -> None:
        if self.id <= BACKGROUND_ID:
            raise ValueError("target ids must be positive (0 is background)")
        if self.level == LEVEL_OBJECT:
            if self.parent_id is not None:
                raise ValueError("object records carry no parent")
            if not np.array_equal(self.raw_embedding, self.effective_embedding):
                raise ValueError("object effective embedding must equal raw")
        elif self.level == LEVEL_PART:
            if self.parent_id is None:
                raise ValueError("part records need a parent id")
        else:
            raise ValueError(f"unknown level {self.level}")
        check_unit(self.raw_embedding)
        check_unit(self.effective_embedding)
        if self.code.shape != (3,):
            raise ValueError("code must have 3 components")
        if np.all(self.code == 0):
            raise ValueError("code (0,0,0) is reserved for background")


@dataclass
class MappingDictionary:
    """identity -> (code, embeddings, level, parent) table for one scene."""

    dim: int
    reserving_weight: float
    code_spacing: float
    tolerance: float
    records: dict[int, TargetRecord] = field(default_factory=dict)

    def __post_init__(self):
        self.records = dict(sorted(self.records.items()))

    def add(self, record: TargetRecord) -> None:
        if record.id in self.records:
            raise ValueError(f"duplicate target id {record.id}")
        self.records[record.id] = record

    def get(self, target_id: int) -> TargetRecord:
        return self.records[target_id]

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[int]:
        return sorted(self.records)

    def code_table(self, level: int) -> dict[int, np.ndarray]:
        return {r.id: r.code for r in self.records.values() if r.level == level}

    def validate(self) -> None:
        for r in self.records.values():
            r.validate()
            if r.level == LEVEL_PART:
                parent = self.records.get(r.parent_id)
                if parent is None or parent.level != LEVEL_OBJECT:
                    raise ValueError(f"part {r.id} has no object parent")
        codes = [r.code for r in self.records.values()]
        for i in range(len(codes)):
            for j in range(i + 1, len(codes)):
                if np.max(np.abs(codes[i] - codes[j])) <= 2.0 * self.tolerance:
                    raise ValueError("codes closer than twice the channel tolerance")


def assign_target_ids(hierarchy: Hierarchy) -> dict[tuple[int, int, int], int]:
    """Deterministic id table: objects first (hierarchy order), then parts.

    Keys are (level, object_index, part_index) with part_index -1 for objects;
    ids start at 1 because 0 is the background sentinel.
    """
    table: dict[tuple[int, int, int], int] = {}
    next_id = 1
    for entry in hierarchy.objects:
        table[(LEVEL_OBJECT, entry.object_index, -1)] = next_id
        next_id += 1
    for entry in hierarchy.parts:
        table[(LEVEL_PART, entry.object_index, entry.part_index)] = next_id
        next_id += 1
    return table


def build_mapping_dictionary(
    hierarchy: Hierarchy,
    embeddings: dict[int, np.ndarray],
    w: float = DEFAULT_RESERVING_WEIGHT,
    t: float = DEFAULT_TOLERANCE,
    labels: dict[int, str] | None = None,
) -> MappingDictionary:
    """One TargetRecord per hierarchy entry; parts get deviated embeddings.

    ``embeddings`` maps target id (per assign_target_ids) to its raw unit
    vector; ``labels`` optionally attaches free text per id.
    """
    ids = assign_target_ids(hierarchy)
    labels = labels or {}
    missing = [tid for tid in ids.values() if tid not in embeddings]
    if missing:
        raise ValueError(f"missing raw embeddings for ids {missing}")
    dims = {embeddings[tid].shape[0] for tid in ids.values()}
    if len(dims) > 1:
        raise ValueError("embeddings disagree on dimension")
    dim = dims.pop() if dims else 0

    codes, spacing = assign_codes(len(ids), t)
    dictionary = MappingDictionary(
        dim=dim, reserving_weight=w, code_spacing=spacing, tolerance=t
    )
    ordered = sorted(ids.items(), key=lambda kv: kv[1])
    object_id_of = {
        oi: tid for (level, oi, _), tid in ids.items() if level == LEVEL_OBJECT
    }
    for (level, oi, _pi), tid in ordered:
        raw = np.asarray(embeddings[tid], dtype=np.float32)
        check_unit(raw)
        if level == LEVEL_OBJECT:
            effective = raw
            parent = None
        else:
            parent = object_id_of[oi]
            effective = deviate(embeddings[parent], raw, w)
        dictionary.add(
            TargetRecord(
                id=tid,
                level=level,
                raw_embedding=raw,
                effective_embedding=effective,
                code=codes[tid - 1],
                parent_id=parent,
                label=labels.get(tid),
            )
        )
    dictionary.validate()
    return dictionary


# --- identity frames ----------------------------------------------------------


@dataclass
class IdentityFrame:
    """Per-frame id rasters, one per level; 0 marks background."""

    frame_id: int
    object_ids: np.ndarray  # int32, H x W
    part_ids: np.ndarray  # int32, H x W


def ingest_identity_frames(
    propagated: dict[int, dict[int, np.ndarray]],
    hierarchy_ids: dict[tuple[int, int, int], int],
    resolution: tuple[int, int],
) -> list[IdentityFrame]:
    """Validate and index externally propagated per-identity masks.

    ``propagated`` maps frame_id -> {target_id -> bool raster}. Same-level
    overlaps resolve smaller-area-on-top; unknown ids are rejected.
    """
    level_of = {tid: level for (level, _, _), tid in hierarchy_ids.items()}
    h, w = resolution
    frames = []
    for frame_id in sorted(propagated):
        object_raster = np.zeros((h, w), dtype=np.int32)
        part_raster = np.zeros((h, w), dtype=np.int32)
        per_level: dict[int, list[tuple[int, np.ndarray]]] = {
            LEVEL_OBJECT: [],
            LEVEL_PART: [],
        }
        for tid, mask in propagated[frame_id].items():
            if tid not in level_of:
                raise ValueError(f"propagated id {tid} absent from the hierarchy")
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (h, w):
                raise ValueError(f"frame {frame_id}: mask resolution mismatch")
            per_level[level_of[tid]].append((tid, mask))
        for level, raster in ((LEVEL_OBJECT, object_raster), (LEVEL_PART, part_raster)):
            # Larger masks paint first so smaller ones end up on top.
            for tid, mask in sorted(
                per_level[level], key=lambda tm: (-int(tm[1].sum()), tm[0])
            ):
                raster[mask] = tid
        frames.append(
            IdentityFrame(frame_id=frame_id, object_ids=object_raster, part_ids=part_raster)
        )
    return frames


def generate_gt_feature_frames(
    identity_frames: list[IdentityFrame], dictionary: MappingDictionary
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Expand id rasters into (object, part) float32 code rasters.

    Background pixels read (0,0,0); any id missing from the dictionary is an
    error.
    """
    out = []
    for frame in identity_frames:
        pair = []
        for raster, level in (
            (frame.object_ids, LEVEL_OBJECT),
            (frame.part_ids, LEVEL_PART),
        ):
            present = np.unique(raster)
            present = present[present != BACKGROUND_ID]
            max_id = int(present.max()) if present.size else 0
            lut = np.zeros((max_id + 1, 3), dtype=np.float32)
            for tid in present:
                record = dictionary.records.get(int(tid))
                if record is None or record.level != level:
                    raise ValueError(f"id {tid} not in dictionary at level {level}")
                lut[tid] = record.code
            pair.append(lut[raster])
        out.append((pair[0], pair[1]))
    return out


# --- dictionary file ----------------------------------------------------------
#
# Layout (little-endian):
#   magic "SSDM" | u16 version | u32 dim | u32 count
#   f64 reserving_weight | f64 code_spacing | f64 tolerance
#   per record (ascending id):
#     u32 id | u8 level | u32 parent (0xFFFFFFFF if none) | 3 x f32 code
#     u16 label_len | label utf-8 | dim x f32 raw embedding
#
# Effective embeddings are not stored: parts recompute them on load from the
# stored raw vectors and weight, bit-for-bit (the deviation is deterministic).


def serialize_dictionary(dictionary: MappingDictionary) -> bytes:
    out = bytearray()
    out += _DICT_MAGIC
    out += struct.pack("<HII", _DICT_VERSION, dictionary.dim, len(dictionary.records))
    out += struct.pack(
        "<ddd",
        dictionary.reserving_weight,
        dictionary.code_spacing,
        dictionary.tolerance,
    )
    for tid in sorted(dictionary.records):
        r = dictionary.records[tid]
        label = (r.label or "").encode("utf-8")
        parent = _NO_PARENT if r.parent_id is None else r.parent_id
        out += struct.pack("<IBI", r.id, r.level, parent)
        out += np.asarray(r.code, dtype="<f4").tobytes()
        out += struct.pack("<H", len(label))
        out += label
        out += np.asarray(r.raw_embedding, dtype="<f4").tobytes()
    return bytes(out)


def deserialize_dictionary(raw: bytes) -> MappingDictionary:
    if raw[:4] != _DICT_MAGIC:
        raise ValueError("not a mapping dictionary (bad magic)")
    version, dim, count = struct.unpack_from("<HII", raw, 4)
    if version != _DICT_VERSION:
        raise ValueError(f"unsupported dictionary version {version}")
    w, spacing, tolerance = struct.unpack_from("<ddd", raw, 14)
    offset = 14 + 24
    staged = []
    for _ in range(count):
        tid, level, parent = struct.unpack_from("<IBI", raw, offset)
        offset += 9
        code = np.frombuffer(raw, dtype="<f4", count=3, offset=offset).copy()
        offset += 12
        (label_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        label = raw[offset : offset + label_len].decode("utf-8") or None
        offset += label_len
        emb = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).copy()
        offset += dim * 4
        staged.append((tid, level, parent, code, label, emb))
    if offset != len(raw):
        raise ValueError("trailing bytes after last dictionary record")

    dictionary = MappingDictionary(
        dim=dim, reserving_weight=w, code_spacing=spacing, tolerance=tolerance
    )
    raw_of = {tid: emb for tid, _, _, _, _, emb in staged}
    for tid, level, parent, code, label, emb in staged:
        if level == LEVEL_OBJECT:
            effective = emb
            parent_id = None
        else:
            parent_id = parent
            effective = deviate(raw_of[parent], emb, w)
        dictionary.add(
            TargetRecord(
                id=tid,
                level=level,
                raw_embedding=emb,
                effective_embedding=effective,
                code=code,
                parent_id=parent_id,
                label=label,
            )
        )
    return dictionary


def save_dictionary(dictionary: MappingDictionary, path: str | Path) -> None:
    Path(path).write_bytes(serialize_dictionary(dictionary))


def load_dictionary(path: str | Path) -> MappingDictionary:
    return deserialize_dictionary(Path(path).read_bytes())

"""Candidate-mask filtering and multilevel mask hierarchy assembly.

Raw per-frame candidate masks (from an external segmenter, ingested as an
RLE corpus) are turned into a two-tier hierarchy:

  1. Object pass  — candidates sorted by descending area, assigned to an
                    empty canvas; a mask is kept only if its whole region
                    is still free, so large redundant overlaps win and
                    ambiguous fragments are dropped.
  2. Part pass    — per object tile, same canvas procedure but ascending
                    area, so small parts are reserved and whole-tile
                    duplicates are dropped.
  3. Hollow pass  — part masks dominated by enclosed holes are background
                    residue and removed.

All operations are pure; masks are boolean rasters plus cached area/bbox.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_HOLLOW_RATIO = 0.25

# 8-connectivity for the complement (holes), dual of 4-connected foreground
_HOLE_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CandidateMask:
    """A binary segmentation mask with cached area and tight bbox."""

    frame_id: int
    pixels: np.ndarray  # bool, H x W
    area: int
    bbox: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (inclusive)

    @classmethod
    def from_pixels(cls, frame_id: int, pixels: np.ndarray) -> "CandidateMask":
        pixels = np.asarray(pixels, dtype=bool)
        if pixels.ndim != 2:
            raise ValueError("mask raster must be 2-D")
        ys, xs = np.nonzero(pixels)
        if ys.size == 0:
            raise ValueError("empty candidate mask")
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
        return cls(frame_id=frame_id, pixels=pixels, area=int(ys.size), bbox=bbox)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def validate(self) -> None:
        ys, xs = np.nonzero(self.pixels)
        if ys.size != self.area:
            raise ValueError(f"area {self.area} != set pixel count {ys.size}")
        if ys.size == 0:
            raise ValueError("empty candidate mask")
        tight = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
        if tight != tuple(self.bbox):
            raise ValueError(f"bbox {self.bbox} is not tight (expected {tight})")


@dataclass(frozen=True)
class ObjectEntry:
    object_index: int
    mask: CandidateMask


@dataclass(frozen=True)
class PartEntry:
    object_index: int
    part_index: int
    mask: CandidateMask


@dataclass
class Hierarchy:
    """Objects and their subordinate parts for one frame resolution."""

    height: int
    width: int
    objects: list[ObjectEntry] = field(default_factory=list)
    parts: list[PartEntry] = field(default_factory=list)

    def parts_of(self, object_index: int) -> list[PartEntry]:
        return [p for p in self.parts if p.object_index == object_index]

    def validate(self) -> None:
        taken = np.zeros((self.height, self.width), dtype=bool)
        by_index = {}
        for entry in self.objects:
            m = entry.mask.pixels
            if m.shape != (self.height, self.width):
                raise ValueError("object mask resolution mismatch")
            if (taken & m).any():
                raise ValueError("object masks overlap")
            taken |= m
            by_index[entry.object_index] = entry.mask
        part_canvas: dict[int, np.ndarray] = {}
        for entry in self.parts:
            parent = by_index.get(entry.object_index)
            if parent is None:
                raise ValueError(f"part references unknown object {entry.object_index}")
            m = entry.mask.pixels
            if (m & ~parent.pixels).any():
                raise ValueError("part mask escapes its parent object")
            canvas = part_canvas.setdefault(
                entry.object_index, np.zeros_like(m, dtype=bool)
            )
            if (canvas & m).any():
                raise ValueError("sibling part masks overlap")
            canvas |= m


def _check_same_frame(candidates: list[CandidateMask]) -> None:
    first = candidates[0]
    for c in candidates[1:]:
        if c.shape != first.shape:
            raise ValueError("candidate masks disagree on frame resolution")
        if c.frame_id != first.frame_id:
            raise ValueError("candidate masks belong to different frames")


def _canvas_filter(
    candidates: list[CandidateMask], descending: bool
) -> list[CandidateMask]:
    # Stable order: area first, input index breaks ties deterministically.
    order = sorted(
        range(len(candidates)),
        key=lambda i: (-candidates[i].area if descending else candidates[i].area, i),
    )
    canvas = np.zeros(candidates[0].shape, dtype=bool)
    accepted = []
    for i in order:
        m = candidates[i]
        x0, y0, x1, y1 = m.bbox
        window = m.pixels[y0 : y1 + 1, x0 : x1 + 1]
        if (canvas[y0 : y1 + 1, x0 : x1 + 1] & window).any():
            continue
        canvas[y0 : y1 + 1, x0 : x1 + 1] |= window
        accepted.append(m)
    return accepted


def filter_object_masks(candidates: list[CandidateMask]) -> list[CandidateMask]:
    """Keep the largest non-overlapping candidates (object-level pass)."""
    if not candidates:
        return []
    _check_same_frame(candidates)
    return _canvas_filter(candidates, descending=True)


def extract_part_masks(
    obj: CandidateMask, tile_candidates: list[CandidateMask]
) -> list[CandidateMask]:
    """Reserve small non-overlapping tile candidates as parts of one object.

    Tile candidates are rasters over the object's bbox crop. Accepted masks
    are translated back to frame coordinates and clipped to the parent mask;
    masks emptied by the clip are dropped.
    """
    if not tile_candidates:
        return []
    x0, y0, x1, y1 = obj.bbox
    tile_shape = (y1 - y0 + 1, x1 - x0 + 1)
    for c in tile_candidates:
        if c.shape != tile_shape:
            raise ValueError(
                f"tile candidate raster {c.shape} does not fit object tile {tile_shape}"
            )
    accepted = _canvas_filter(tile_candidates, descending=False)
    parts = []
    for m in accepted:
        frame_pixels = np.zeros(obj.shape, dtype=bool)
        frame_pixels[y0 : y1 + 1, x0 : x1 + 1] = m.pixels
        frame_pixels &= obj.pixels
        if not frame_pixels.any():
            continue
        parts.append(CandidateMask.from_pixels(obj.frame_id, frame_pixels))
    return parts


def hollow_ratio(mask: CandidateMask) -> float:
    """Total enclosed-hole area inside the bbox, as a fraction of mask area."""
    x0, y0, x1, y1 = mask.bbox
    window = mask.pixels[y0 : y1 + 1, x0 : x1 + 1]
    complement = ~window
    labels, n = ndimage.label(complement, structure=_HOLE_STRUCTURE)
    if n == 0:
        return 0.0
    border = np.zeros_like(complement)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    touching = np.unique(labels[border & complement])
    hole_area = 0
    for lab in range(1, n + 1):
        if lab in touching:
            continue
        hole_area += int((labels == lab).sum())
    return hole_area / mask.area


def filter_hollow(
    parts: list[CandidateMask], rho: float = DEFAULT_HOLLOW_RATIO
) -> list[CandidateMask]:
    """Drop masks whose enclosed holes cover at least ``rho`` of their area."""
    return [m for m in parts if hollow_ratio(m) < rho]


def build_hierarchy(
    objects: list[CandidateMask],
    parts_per_object: list[list[CandidateMask]],
) -> Hierarchy:
    """Assemble filtered objects and per-object parts into one Hierarchy."""
    if len(objects) != len(parts_per_object):
        raise ValueError("one part list per object required")
    if not objects:
        return Hierarchy(height=0, width=0)
    h, w = objects[0].shape
    hierarchy = Hierarchy(height=h, width=w)
    for oi, obj in enumerate(objects):
        hierarchy.objects.append(ObjectEntry(object_index=oi, mask=obj))
        for pi, part in enumerate(parts_per_object[oi]):
            hierarchy.parts.append(
                PartEntry(object_index=oi, part_index=pi, mask=part)
            )
    hierarchy.validate()
    return hierarchy


# --- RLE + corpus I/O -------------------------------------------------------
#
# Masks serialize as {area, bbox, counts} where counts is a run-length
# encoding over row-major pixel order, first run counting zeros (the first
# count is 0 when the very first pixel is set). Round-trips are bit-exact.


def mask_to_rle(pixels: np.ndarray) -> dict:
    flat = np.asarray(pixels, dtype=bool).reshape(-1)
    h, w = pixels.shape
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    changes = np.nonzero(np.diff(flat))[0] + 1
    boundaries = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(boundaries).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [h, w], "counts": counts}


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for count in rle["counts"]:
        if val:
            flat[pos : pos + count] = True
        pos += count
        val = not val
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, raster has {h * w}")
    return flat.reshape(h, w)


def mask_to_doc(mask: CandidateMask) -> dict:
    rle = mask_to_rle(mask.pixels)
    return {"area": mask.area, "bbox": list(mask.bbox), "counts": rle["counts"]}


def mask_from_doc(doc: dict, frame_id: int, height: int, width: int) -> CandidateMask:
    pixels = rle_to_mask({"size": [height, width], "counts": doc["counts"]})
    mask = CandidateMask(
        frame_id=frame_id,
        pixels=pixels,
        area=int(doc["area"]),
        bbox=tuple(doc["bbox"]),
    )
    mask.validate()
    return mask


@dataclass
class FrameCandidates:
    """One corpus document: image-scale candidates plus per-candidate tiles."""

    frame_id: int
    height: int
    width: int
    masks: list[CandidateMask]
    # candidate index -> tile-local candidates (rasters over that mask's bbox)
    tiles: dict[int, list[CandidateMask]]


def load_frame_candidates(path: str | Path) -> FrameCandidates:
    doc = json.loads(Path(path).read_text())
    frame_id = int(doc["frame_id"])
    h, w = int(doc["height"]), int(doc["width"])
    masks = [mask_from_doc(m, frame_id, h, w) for m in doc["masks"]]
    tiles: dict[int, list[CandidateMask]] = {}
    for tile in doc.get("tiles", []):
        ci = int(tile["candidate_index"])
        if not 0 <= ci < len(masks):
            raise ValueError(f"tile references unknown candidate {ci}")
        x0, y0, x1, y1 = masks[ci].bbox
        th, tw = y1 - y0 + 1, x1 - x0 + 1
        tiles[ci] = [mask_from_doc(m, frame_id, th, tw) for m in tile["masks"]]
    return FrameCandidates(frame_id=frame_id, height=h, width=w, masks=masks, tiles=tiles)


def save_frame_candidates(frame: FrameCandidates, path: str | Path) -> None:
    doc = {
        "frame_id": frame.frame_id,
        "height": frame.height,
        "width": frame.width,
        "masks": [mask_to_doc(m) for m in frame.masks],
        "tiles": [
            {"candidate_index": ci, "masks": [mask_to_doc(m) for m in tile_masks]}
            for ci, tile_masks in sorted(frame.tiles.items())
        ],
    }
    Path(path).write_text(json.dumps(doc))


def extract_hierarchy(
    frame: FrameCandidates, rho: float = DEFAULT_HOLLOW_RATIO
) -> Hierarchy:
    """Full per-frame extraction: object pass, per-tile part pass, hollow pass."""
    objects = filter_object_masks(frame.masks)
    candidate_index = {id(m): i for i, m in enumerate(frame.masks)}
    parts_per_object = []
    for obj in objects:
        tile_masks = frame.tiles.get(candidate_index[id(obj)], [])
        parts = extract_part_masks(obj, tile_masks)
        parts_per_object.append(filter_hollow(parts, rho=rho))
    return build_hierarchy(objects, parts_per_object)


def hierarchy_to_doc(hierarchy: Hierarchy) -> dict:
    return {
        "version": 1,
        "height": hierarchy.height,
        "width": hierarchy.width,
        "objects": [
            {"object_index": e.object_index, "mask": mask_to_doc(e.mask)}
            for e in hierarchy.objects
        ],
        "parts": [
            {
                "object_index": e.object_index,
                "part_index": e.part_index,
                "mask": mask_to_doc(e.mask),
            }
            for e in hierarchy.parts
        ],
    }


def hierarchy_from_doc(doc: dict) -> Hierarchy:
    h, w = int(doc["height"]), int(doc["width"])
    hierarchy = Hierarchy(height=h, width=w)
    for e in doc["objects"]:
        hierarchy.objects.append(
            ObjectEntry(
                object_index=int(e["object_index"]),
                mask=mask_from_doc(e["mask"], 0, h, w),
            )
        )
    for e in doc["parts"]:
        hierarchy.parts.append(
            PartEntry(
                object_index=int(e["object_index"]),
                part_index=int(e["part_index"]),
                mask=mask_from_doc(e["mask"], 0, h, w),
            )
        )
    hierarchy.validate()
    return hierarchy


def save_hierarchy(hierarchy: Hierarchy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(hierarchy_to_doc(hierarchy)))


def load_hierarchy(path: str | Path) -> Hierarchy:
    return hierarchy_from_doc(json.loads(Path(path).read_text()))

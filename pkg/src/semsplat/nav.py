"""Keypoint graph construction, shortest paths, and view interpolation.

Training camera centers are dilated with six axis-aligned neighbors at half
the average adjacent-camera spacing. Candidate edges (pairs within a radius
bound) are kept only if depth probes along the segment stay positive: a
non-positive depth means the frustum cuts through geometry or empty space.
Paths come from Dijkstra; view sequences interpolate the path either
segmentwise (piecewise linear through every keypoint, rotations slerped) or
in a literal straight-line mode that telescopes the keypoint sum.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import (
    CameraPose,
    look_at_rotation,
    orthonormalize,
    quat_slerp,
    quat_to_rotation,
    rotation_to_quat,
)

DEFAULT_CONNECTIVITY_SAMPLES = 8
DEFAULT_EDGE_RADIUS_SCALE = 1.5
DEFAULT_PROBE_RESOLUTION = 32
PROBE_WINDOW = 9  # central probe window side, pixels
MERGE_TOLERANCE = 1e-6
DEFAULT_FRAME_COUNT = 150

_GRAPH_MAGIC = b"SSKG"
_GRAPH_VERSION = 1

_DILATION_OFFSETS = (
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
)


@dataclass
class KeypointGraph:
    nodes: np.ndarray  # (N, 3) positions
    rotations: np.ndarray  # (N, 4) canonical view quaternions (w,x,y,z)
    edges: dict[tuple[int, int], float] = field(default_factory=dict)  # u < v
    dilation_step: float = 0.0

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def neighbors(self, u: int) -> list[tuple[int, float]]:
        out = []
        for (a, b), w in self.edges.items():
            if a == u:
                out.append((b, w))
            elif b == u:
                out.append((a, w))
        out.sort()
        return out

    def add_edge(self, u: int, v: int, weight: float) -> None:
        if u == v:
            return
        key = (min(u, v), max(u, v))
        self.edges[key] = weight

    def validate(self) -> None:
        for (u, v), w in self.edges.items():
            d = float(np.linalg.norm(self.nodes[u] - self.nodes[v]))
            if abs(d - w) > 1e-9:
                raise ValueError(f"edge ({u},{v}) weight {w} != distance {d}")


@dataclass
class NavPath:
    keypoints: list[int]
    total_length: float


def mean_adjacent_spacing(centers: np.ndarray) -> float:
    """Average distance between consecutive camera centers in input order."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] < 2:
        raise ValueError("need at least two cameras to define the spacing")
    return float(np.linalg.norm(np.diff(centers, axis=0), axis=1).mean())


def dilate_keypoints(
    cameras: list[CameraPose], step: float | None = None
) -> KeypointGraph:
    """Camera centers plus six axis neighbors at step/2; duplicates merged.

    ``step`` overrides the computed mean adjacent spacing (required when only
    one camera is available).
    """
    if not cameras:
        raise ValueError("no cameras")
    centers = np.stack([np.asarray(c.translation, dtype=np.float64) for c in cameras])
    if step is None:
        step = mean_adjacent_spacing(centers)
    if step <= 0:
        raise ValueError("dilation step must be positive")

    positions: list[np.ndarray] = []
    rotations: list[np.ndarray] = []

    def push(pos: np.ndarray, quat: np.ndarray) -> None:
        for existing in positions:
            if np.linalg.norm(existing - pos) <= MERGE_TOLERANCE:
                return
        positions.append(pos)
        rotations.append(quat)

    quats = [rotation_to_quat(c.rotation) for c in cameras]
    for center, quat in zip(centers, quats):
        push(center, quat)
    for center, quat in zip(centers, quats):
        for offset in _DILATION_OFFSETS:
            push(center + (step / 2.0) * np.asarray(offset, dtype=np.float64), quat)

    return KeypointGraph(
        nodes=np.stack(positions),
        rotations=np.stack(rotations),
        dilation_step=float(step),
    )


def _probe_camera(
    position: np.ndarray, direction: np.ndarray, resolution: int
) -> CameraPose:
    r = look_at_rotation(direction)
    return CameraPose(
        rotation=r,
        translation=np.asarray(position, dtype=np.float64),
        fx=float(resolution),
        fy=float(resolution),
        cx=resolution / 2.0,
        cy=resolution / 2.0,
        width=resolution,
        height=resolution,
    )


def check_connectivity(
    a: np.ndarray,
    b: np.ndarray,
    depth_renderer,
    samples: int = DEFAULT_CONNECTIVITY_SAMPLES,
    probe_resolution: int = DEFAULT_PROBE_RESOLUTION,
) -> bool:
    """Probe depth at points along a->b; any non-positive depth disconnects.

    ``depth_renderer(camera) -> (H, W) depth raster``. The probe view looks
    along the segment; only the central window of each raster is inspected.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.linalg.norm(b - a) < 1e-12:
        return True
    direction = b - a
    half = PROBE_WINDOW // 2
    lo = probe_resolution // 2 - half
    hi = lo + PROBE_WINDOW
    if lo < 0:
        raise ValueError("probe resolution too small for the probe window")
    for i in range(samples):
        t = i / (samples - 1) if samples > 1 else 0.0
        cam = _probe_camera(a + t * direction, direction, probe_resolution)
        depth = depth_renderer(cam)
        window = depth[lo:hi, lo:hi]
        if np.any(window <= 0.0):
            return False
    return True


def build_graph(
    graph: KeypointGraph,
    depth_renderer,
    samples: int = DEFAULT_CONNECTIVITY_SAMPLES,
    radius_scale: float = DEFAULT_EDGE_RADIUS_SCALE,
    probe_resolution: int = DEFAULT_PROBE_RESOLUTION,
) -> KeypointGraph:
    """Test all node pairs within radius_scale * dilation_step for connectivity."""
    out = replace(graph, edges={})
    n = len(graph)
    radius = radius_scale * graph.dilation_step
    for u in range(n):
        for v in range(u + 1, n):
            d = float(np.linalg.norm(graph.nodes[u] - graph.nodes[v]))
            if d > radius:
                continue
            if check_connectivity(
                graph.nodes[u],
                graph.nodes[v],
                depth_renderer,
                samples=samples,
                probe_resolution=probe_resolution,
            ):
                out.add_edge(u, v, d)
    return out


def shortest_path(graph: KeypointGraph, start: int, goal: int) -> NavPath | None:
    """Dijkstra; among equal-weight paths the lexicographically smallest
    node-index sequence wins. Returns None when goal is unreachable."""
    n = len(graph)
    if not (0 <= start < n and 0 <= goal < n):
        raise ValueError("unknown node id")
    if start == goal:
        return NavPath(keypoints=[start], total_length=0.0)

    adjacency: dict[int, list[tuple[int, float]]] = {u: [] for u in range(n)}
    for (u, v), w in graph.edges.items():
        adjacency[u].append((v, w))
        adjacency[v].append((u, w))
    for lst in adjacency.values():
        lst.sort()

    # Distance from every node to the goal, then a greedy forward walk that
    # always takes the smallest-index neighbor still on a shortest path.
    dist = np.full(n, np.inf)
    dist[goal] = 0.0
    heap = [(0.0, goal)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adjacency[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    if not np.isfinite(dist[start]):
        return None

    tol = 1e-9 * max(1.0, float(dist[start]))
    path = [start]
    u = start
    while u != goal:
        for v, w in adjacency[u]:
            if abs(w + dist[v] - dist[u]) <= tol:
                path.append(v)
                u = v
                break
        else:
            raise AssertionError("shortest-path walk lost the optimality equation")
    return NavPath(keypoints=path, total_length=float(dist[start]))


def _allocate_frames(lengths: list[float], m: int) -> list[int]:
    """Largest-remainder proportional split of m frames, each segment >= 1."""
    k = len(lengths)
    spare = m - k
    total = sum(lengths)
    if total <= 0:
        quotas = [spare / k] * k
    else:
        quotas = [spare * length / total for length in lengths]
    base = [int(np.floor(q)) for q in quotas]
    remainder = spare - sum(base)
    order = sorted(range(k), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:remainder]:
        base[i] += 1
    return [1 + b for b in base]


def interpolate_path(
    graph: KeypointGraph,
    path: NavPath,
    m: int = DEFAULT_FRAME_COUNT,
    mode: str = "segmentwise",
    template: CameraPose | None = None,
) -> list[CameraPose]:
    """Expand a keypoint path into M+1 camera poses.

    segmentwise (default): piecewise-linear through every keypoint, frames
    split across segments proportionally to length (each segment gets at
    least one), rotations slerped per segment.

    literal: straight line from the first to the last keypoint — the
    telescoped form of summing keypoint deltas scaled by i/M — with linearly
    blended, re-orthonormalized rotations.
    """
    if not path.keypoints:
        raise ValueError("empty path")
    if m < 1:
        raise ValueError("frame count must be at least 1")
    if template is None:
        template = CameraPose(
            rotation=np.eye(3), translation=np.zeros(3),
            fx=64.0, fy=64.0, cx=32.0, cy=32.0, width=64, height=64,
        )

    nodes = [graph.nodes[k] for k in path.keypoints]
    quats = [graph.rotations[k] for k in path.keypoints]

    if len(nodes) == 1:
        pose = template.with_pose(quat_to_rotation(quats[0]), np.array(nodes[0]))
        return [pose] * (m + 1)

    poses: list[CameraPose] = []
    if mode == "literal":
        t0, t1 = nodes[0], nodes[-1]
        r0, r1 = quat_to_rotation(quats[0]), quat_to_rotation(quats[-1])
        for i in range(m + 1):
            u = i / m
            t = t0 + u * (t1 - t0)
            r = orthonormalize((1.0 - u) * r0 + u * r1)
            poses.append(template.with_pose(r, t))
        return poses
    if mode != "segmentwise":
        raise ValueError(f"unknown interpolation mode {mode!r}")

    segments = len(nodes) - 1
    if m < segments:
        raise ValueError(f"cannot allocate {m} frames across {segments} segments")
    lengths = [float(np.linalg.norm(nodes[i + 1] - nodes[i])) for i in range(segments)]
    frames_per_segment = _allocate_frames(lengths, m)

    poses.append(template.with_pose(quat_to_rotation(quats[0]), np.array(nodes[0])))
    for seg in range(segments):
        a, b = nodes[seg], nodes[seg + 1]
        qa, qb = quats[seg], quats[seg + 1]
        steps = frames_per_segment[seg]
        for j in range(1, steps + 1):
            u = j / steps
            t = b if j == steps else a + u * (b - a)
            r = quat_to_rotation(quat_slerp(qa, qb, u))
            poses.append(template.with_pose(r, np.array(t)))
    return poses


# --- graph cache file -----------------------------------------------------------
#
# Layout (little-endian):
#   magic "SSKG" | u16 version | f64 dilation_step | u32 node count
#   per node: 3 x f64 position | 4 x f64 quaternion
#   u32 edge count | per edge: u32 u | u32 v | f64 weight


def save_graph(graph: KeypointGraph, path: str | Path) -> None:
    out = bytearray()
    out += _GRAPH_MAGIC
    out += struct.pack("<Hd", _GRAPH_VERSION, graph.dilation_step)
    out += struct.pack("<I", len(graph))
    for i in range(len(graph)):
        out += np.asarray(graph.nodes[i], dtype="<f8").tobytes()
        out += np.asarray(graph.rotations[i], dtype="<f8").tobytes()
    edges = sorted(graph.edges.items())
    out += struct.pack("<I", len(edges))
    for (u, v), w in edges:
        out += struct.pack("<IId", u, v, w)
    Path(path).write_bytes(bytes(out))


def load_graph(path: str | Path) -> KeypointGraph:
    raw = Path(path).read_bytes()
    if raw[:4] != _GRAPH_MAGIC:
        raise ValueError("not a keypoint graph file (bad magic)")
    version, step = struct.unpack_from("<Hd", raw, 4)
    if version != _GRAPH_VERSION:
        raise ValueError(f"unsupported graph file version {version}")
    offset = 14
    (n,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    nodes = np.empty((n, 3))
    rotations = np.empty((n, 4))
    for i in range(n):
        nodes[i] = np.frombuffer(raw, dtype="<f8", count=3, offset=offset)
        offset += 24
        rotations[i] = np.frombuffer(raw, dtype="<f8", count=4, offset=offset)
        offset += 32
    (ne,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    graph = KeypointGraph(nodes=nodes, rotations=rotations, dilation_step=step)
    for _ in range(ne):
        u, v, w = struct.unpack_from("<IId", raw, offset)
        offset += 16
        graph.add_edge(u, v, w)
    if offset != len(raw):
        raise ValueError("trailing bytes after last graph edge")
    return graph


def nearest_node(graph: KeypointGraph, position: np.ndarray) -> int:
    """Graph node closest to a world position (lowest index wins ties)."""
    d = np.linalg.norm(graph.nodes - np.asarray(position, dtype=np.float64), axis=1)
    return int(np.argmin(d))

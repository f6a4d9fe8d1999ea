"""Synthetic desk-scale scene for tests, demos, and the service fixture.

One labeled object ("widget") made of exactly 50 Gaussians — a 20-Gaussian
body between two 15-Gaussian knobs — forms a rectangular patch of a
continuous wall of Gaussians facing an arc of cameras, all enclosed by an
opaque far sphere so every probe direction returns positive depth. The wall
matters: every pixel is almost fully covered, so feature spill from patch
borders is absorbed by neighboring wall Gaussians instead of forcing border
features toward zero (isolated blobs cannot train to decodable codes).
Ground-truth identity rasters come from per-target blend-weight dominance,
so the whole pipeline (dictionary, ground-truth feature frames, training,
decoding, navigation graph) runs end to end without any external model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraPose, look_at_rotation, save_cameras
from .embeddings import LEVEL_OBJECT, LEVEL_PART, SyntheticProvider, save_embeddings_file
from .field import (
    GaussianScene,
    TrainingView,
    compute_blend_weights,
    optimize_features,
    render_feature_frame,
    save_scene,
)
from .mapping import (
    IdentityFrame,
    MappingDictionary,
    assign_target_ids,
    build_mapping_dictionary,
    generate_gt_feature_frames,
    save_dictionary,
)
from .masks import CandidateMask, Hierarchy, build_hierarchy
from .nav import KeypointGraph, build_graph, dilate_keypoints, save_graph

OBJECT_LABEL = "widget"
PART_LABELS = ("top knob", "bottom knob")
# A pixel must be dominated this strongly before it carries an identity; it
# then decodes with margin as long as 1 - threshold stays comfortably under
# the channel tolerance.
DOMINANCE_THRESHOLD = 0.85


@dataclass
class ToyScene:
    scene: GaussianScene  # untrained features (0.5 grey)
    trained: GaussianScene | None
    cameras: list[CameraPose]
    hierarchy: Hierarchy
    dictionary: MappingDictionary
    identity_frames: list[IdentityFrame]
    gt_frames: list[tuple[np.ndarray, np.ndarray]]
    provider: SyntheticProvider
    graph: KeypointGraph | None
    object_id: int
    part_ids: tuple[int, int]

    def training_views(self) -> list[TrainingView]:
        return [
            TrainingView(camera=cam, gt_object=gt[0], gt_part=gt[1])
            for cam, gt in zip(self.cameras, self.gt_frames)
        ]


def _wall_grid(cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    gx, gy = np.meshgrid(cols, rows)
    return np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)


def _knob_grid(cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """5x3 block with rounded corners: the 4 corner tiles move onto edge
    centers as stacked duplicates. Corner gaussians would put most of their
    mass outside the knob's own label region and train toward zero."""
    pts = []
    extras = []
    for ri, y in enumerate(rows):
        for ci, x in enumerate(cols):
            corner = (ri in (0, 2)) and (ci in (0, 4))
            if corner:
                extras.append((ri, ci))
            else:
                pts.append([x, y, 0.0])
    stack_at = [(0, 2), (2, 2), (1, 0), (1, 4)]
    for k in range(len(extras)):
        ri, ci = stack_at[k % len(stack_at)]
        pts.append([cols[ci], rows[ri], 0.01])
    return np.asarray(pts, dtype=np.float64)


def _backdrop(count: int, radius: float) -> np.ndarray:
    # Fibonacci sphere: roughly uniform directions
    i = np.arange(count, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    y = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    dirs = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    return radius * dirs


def _orbit_cameras(n_views: int, size: int, radius: float) -> list[CameraPose]:
    cams = []
    for k in range(n_views):
        angle = np.deg2rad(-30.0 + 60.0 * k / max(1, n_views - 1))
        pos = np.array([radius * np.sin(angle), 0.0, -radius * np.cos(angle)])
        r = look_at_rotation(-pos)  # look at the origin
        cams.append(
            CameraPose(
                rotation=r,
                translation=pos,
                fx=float(size),
                fy=float(size),
                cx=size / 2.0,
                cy=size / 2.0,
                width=size,
                height=size,
            )
        )
    return cams


def build_toy_scene(
    n_views: int = 5,
    size: int = 64,
    seed: int = 7,
    tolerance: float = 0.22,
    w: float = 0.7,
    train_iterations: int = 0,
    with_graph: bool = False,
    backdrop_count: int = 256,
) -> ToyScene:
    """Assemble the full toy artifact set; optionally train and build the graph.

    The object is a 5x10 tile patch of a wall grid in the z=0 plane: the top
    5x3 block is the top knob, the middle 5x4 the body, the bottom 5x3 the
    bottom knob (exactly 50 Gaussians). The horizontal camera arc never
    occludes one target with another.
    """
    spacing = 0.5
    obj_cols = (np.arange(5) - 2.0) * spacing
    obj_rows = (np.arange(10) - 4.5) * spacing
    top = _knob_grid(obj_cols, obj_rows[0:3])  # 15 (y-down: -y is up)
    body = _wall_grid(obj_cols, obj_rows[3:7])  # 20
    bottom = _knob_grid(obj_cols, obj_rows[7:10])  # 15
    # Cameras sit at negative z. Stagger depths so each target wins the
    # depth sort over its own silhouette; coplanar tiles would tie-break by
    # index and smear every tile's tail across its neighbours' pixels.
    top[:, 2] = bottom[:, 2] = -0.4
    body[:, 2] = -0.2
    target_means = np.concatenate([body, top, bottom])
    n_target = target_means.shape[0]
    part_index_sets = (
        np.arange(20, 35),  # top knob
        np.arange(35, 50),  # bottom knob
    )

    # Surrounding wall tiles (3 extra rings) absorb patch-border spill.
    wall_cols = (np.arange(11) - 5.0) * spacing
    wall_rows = (np.arange(16) - 7.5) * spacing
    wall = _wall_grid(wall_cols, wall_rows)
    in_patch = (np.abs(wall[:, 0]) <= obj_cols[-1] + 1e-9) & (
        np.abs(wall[:, 1]) <= obj_rows[-1] + 1e-9
    )
    wall = wall[~in_patch]

    # Backdrop extent must stay far from every camera/probe position
    # (within ~8 of the origin), or grazing projections blank the view.
    means = np.concatenate([target_means, wall, _backdrop(backdrop_count, 25.0)])
    n = means.shape[0]
    scales = np.full((n, 3), 0.35)
    scales[n_target + len(wall) :] = 2.5
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacities = np.full(n, 0.99)
    opacities[n_target + len(wall) :] = 1.0
    scene = GaussianScene(
        means=means,
        scales=scales,
        rotations=rotations,
        opacities=opacities,
        features_obj=np.full((n, 3), 0.5),
        features_part=np.full((n, 3), 0.5),
    )
    scene.validate()

    cameras = _orbit_cameras(n_views, size, radius=6.0)

    # Identity rasters from per-target blend-weight dominance.
    object_cols = np.arange(n_target)
    identity_frames = []
    weight_maps = []
    for frame_id, cam in enumerate(cameras):
        weights = compute_blend_weights(scene, cam)
        total = weights[:, object_cols].sum(axis=1).reshape(size, size)
        part_w = [
            weights[:, cols].sum(axis=1).reshape(size, size)
            for cols in part_index_sets
        ]
        object_ids = np.where(total >= DOMINANCE_THRESHOLD, 1, 0).astype(np.int32)
        part_ids = np.zeros((size, size), dtype=np.int32)
        part_ids[part_w[0] >= DOMINANCE_THRESHOLD] = 2
        part_ids[part_w[1] >= DOMINANCE_THRESHOLD] = 3
        identity_frames.append(
            IdentityFrame(frame_id=frame_id, object_ids=object_ids, part_ids=part_ids)
        )
        weight_maps.append((total, part_w))

    # Hierarchy masks come from the middle view, where both parts are visible
    # (the body occludes the far knob at the arc ends).
    ref = identity_frames[len(identity_frames) // 2]
    obj_mask = CandidateMask.from_pixels(ref.frame_id, ref.object_ids == 1)
    parts = [
        CandidateMask.from_pixels(ref.frame_id, ref.part_ids == tid) for tid in (2, 3)
    ]
    hierarchy = build_hierarchy([obj_mask], [parts])

    provider = SyntheticProvider(seed=seed)
    ids = assign_target_ids(hierarchy)
    labels_by_id = {
        ids[(LEVEL_OBJECT, 0, -1)]: OBJECT_LABEL,
        ids[(LEVEL_PART, 0, 0)]: PART_LABELS[0],
        ids[(LEVEL_PART, 0, 1)]: PART_LABELS[1],
    }
    embeddings = {tid: provider.embed_text(label) for tid, label in labels_by_id.items()}
    dictionary = build_mapping_dictionary(
        hierarchy, embeddings, w=w, t=tolerance, labels=labels_by_id
    )

    gt_frames = generate_gt_feature_frames(identity_frames, dictionary)

    toy = ToyScene(
        scene=scene,
        trained=None,
        cameras=cameras,
        hierarchy=hierarchy,
        dictionary=dictionary,
        identity_frames=identity_frames,
        gt_frames=gt_frames,
        provider=provider,
        graph=None,
        object_id=ids[(LEVEL_OBJECT, 0, -1)],
        part_ids=(ids[(LEVEL_PART, 0, 0)], ids[(LEVEL_PART, 0, 1)]),
    )

    if train_iterations > 0:
        toy.trained = optimize_features(
            scene, toy.training_views(), iterations=train_iterations
        )
    if with_graph:
        depth_scene = toy.trained if toy.trained is not None else scene

        def depth_renderer(cam):
            return render_feature_frame(
                depth_scene, cam, level="object", with_depth=True
            ).depth

        nodes = dilate_keypoints(cameras)
        toy.graph = build_graph(nodes, depth_renderer, probe_resolution=16)
    return toy


def write_toy_bundle(out_dir: str | Path, train_iterations: int = 1500, **kwargs) -> Path:
    """Write every artifact the CLI and service need into one directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    toy = build_toy_scene(
        train_iterations=train_iterations, with_graph=True, **kwargs
    )

    save_scene(toy.scene, out / "scene.bin")
    save_scene(toy.trained, out / "trained.bin")
    save_cameras(toy.cameras, out / "cameras.bin")
    save_dictionary(toy.dictionary, out / "dict.bin")
    save_graph(toy.graph, out / "graph.bin")

    records = {}
    for tid in toy.dictionary.ids():
        rec = toy.dictionary.get(tid)
        records[(tid, rec.level)] = rec.raw_embedding
    save_embeddings_file(records, out / "emb.bin")

    from .masks import save_hierarchy

    save_hierarchy(toy.hierarchy, out / "hierarchy.json")

    gt_dir = out / "gt"
    gt_dir.mkdir(exist_ok=True)
    save_cameras(toy.cameras, gt_dir / "cameras.bin")
    for i, (gt_obj, gt_part) in enumerate(toy.gt_frames):
        np.savez_compressed(gt_dir / f"view_{i:03d}.npz", object=gt_obj, part=gt_part)

    config = f"""# generated toy-scene service configuration
[artifacts]
scene = "{(out / 'trained.bin').resolve()}"
dictionary = "{(out / 'dict.bin').resolve()}"
graph = "{(out / 'graph.bin').resolve()}"
cameras = "{(out / 'cameras.bin').resolve()}"

[provider]
mode = "synthetic"
seed = {toy.provider.seed}

[decision_model]
mode = "rule"

[defaults]
frame_count = 24
k = 1

[server]
host = "127.0.0.1"
port = 8787
idle_timeout = 600.0

[policy]
denylist = ["emergency"]
"""
    (out / "service.toml").write_text(config)
    return out

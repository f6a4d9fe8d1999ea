"""Command-line entry points for the full pipeline.

    semsplat extract     candidate masks -> hierarchy.json
    semsplat map         hierarchy + embeddings -> dict.bin (+ GT frames)
    semsplat train       scene + GT frames -> trained scene
    semsplat query       open-vocabulary query -> mask.png + JSON sidecar
    semsplat nav         build-graph | path
    semsplat agent       interactive REPL
    semsplat serve       HTTP session service
    semsplat demo        synthetic toy-scene artifact bundle
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__


def _cmd_extract(args) -> int:
    from . import masks

    candidates_dir = Path(args.candidates)
    docs = sorted(candidates_dir.glob("*.json"))
    if not docs:
        print(f"no candidate documents in {candidates_dir}", file=sys.stderr)
        return 2
    frames = [masks.load_frame_candidates(p) for p in docs]
    target = next((f for f in frames if f.frame_id == args.frame), frames[0])

    if args.frames:
        from PIL import Image

        for img_path in sorted(Path(args.frames).glob("*.png")):
            with Image.open(img_path) as img:
                if img.size != (target.width, target.height):
                    print(
                        f"frame {img_path.name} is {img.size}, candidates expect "
                        f"{(target.width, target.height)}",
                        file=sys.stderr,
                    )
                    return 2

    hierarchy = masks.extract_hierarchy(target, rho=args.rho)
    masks.save_hierarchy(hierarchy, args.out)
    print(
        f"extracted {len(hierarchy.objects)} objects, {len(hierarchy.parts)} parts "
        f"-> {args.out}"
    )
    return 0


def _cmd_map(args) -> int:
    from . import mapping, masks
    from .embeddings import SyntheticProvider, load_embeddings_file

    hierarchy = masks.load_hierarchy(args.hierarchy)
    ids = mapping.assign_target_ids(hierarchy)

    if args.embeddings == "synthetic":
        provider = SyntheticProvider(seed=args.seed, dim=args.dim)
        embeddings = {
            tid: provider.embed_text(f"target-{tid}") for tid in ids.values()
        }
    else:
        records = load_embeddings_file(args.embeddings)
        embeddings = {}
        for (level, oi, pi), tid in ids.items():
            if (tid, level) not in records:
                print(f"embeddings file misses id={tid} level={level}", file=sys.stderr)
                return 2
            embeddings[tid] = records[(tid, level)]
        from .embeddings import normalize

        embeddings = {tid: normalize(v) for tid, v in embeddings.items()}

    dictionary = mapping.build_mapping_dictionary(
        hierarchy, embeddings, w=args.w, t=args.t
    )
    mapping.save_dictionary(dictionary, args.out)
    size = Path(args.out).stat().st_size
    print(f"dictionary: {len(dictionary)} records, {size} bytes -> {args.out}")

    if args.identity and args.gt_out:
        propagated = _load_propagated(Path(args.identity))
        resolution = (hierarchy.height, hierarchy.width)
        identity_frames = mapping.ingest_identity_frames(propagated, ids, resolution)
        gt = mapping.generate_gt_feature_frames(identity_frames, dictionary)
        out_dir = Path(args.gt_out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for frame, (gt_obj, gt_part) in zip(identity_frames, gt):
            np.savez_compressed(
                out_dir / f"view_{frame.frame_id:03d}.npz", object=gt_obj, part=gt_part
            )
        print(f"wrote {len(gt)} ground-truth feature frames -> {out_dir}")
    return 0


def _load_propagated(identity_dir: Path) -> dict:
    from .masks import rle_to_mask

    propagated: dict[int, dict[int, np.ndarray]] = {}
    for path in sorted(identity_dir.glob("*.json")):
        doc = json.loads(path.read_text())
        frame_id = int(doc["frame_id"])
        h, w = int(doc["height"]), int(doc["width"])
        propagated[frame_id] = {
            int(m["id"]): rle_to_mask({"size": [h, w], "counts": m["counts"]})
            for m in doc["masks"]
        }
    return propagated


def _cmd_train(args) -> int:
    from . import field
    from .camera import load_cameras

    scene = field.load_scene(args.scene)
    gt_dir = Path(args.gt)
    cameras = load_cameras(gt_dir / "cameras.bin")
    views = []
    for i, cam in enumerate(cameras):
        npz_path = gt_dir / f"view_{i:03d}.npz"
        if not npz_path.exists():
            continue
        data = np.load(npz_path)
        views.append(
            field.TrainingView(
                camera=cam, gt_object=data["object"], gt_part=data["part"]
            )
        )
    if not views:
        print(f"no view_*.npz ground truth in {gt_dir}", file=sys.stderr)
        return 2
    cfg = field.LossConfig(lam=args.lam)
    trained = field.optimize_features(
        scene, views, cfg=cfg, iterations=args.iters, step=args.step
    )
    field.save_scene(trained, args.out)
    print(f"trained {len(trained)} gaussians over {len(views)} views -> {args.out}")
    return 0


def _cmd_query(args) -> int:
    from PIL import Image

    from . import field
    from .camera import load_pose_json
    from .embeddings import SyntheticProvider
    from .mapping import load_dictionary
    from .query import (
        CANONICAL_PHRASES,
        Query,
        RelevancyContext,
        decode_mask,
        top_k_query,
    )

    dictionary = load_dictionary(args.dict)
    scene = field.load_scene(args.scene)
    pose = load_pose_json(args.camera)
    provider = SyntheticProvider(seed=args.seed, dim=dictionary.dim)
    ctx = RelevancyContext.from_provider(provider, CANONICAL_PHRASES)
    t = args.t if args.t is not None else dictionary.tolerance

    q = Query(
        text=args.text, embedding=provider.embed_text(args.text), level_hint=args.level
    )
    results = top_k_query(dictionary, q, ctx, args.k, text_embedder=provider)

    level_names = {0: "object", 1: "part"}
    frames: dict[str, np.ndarray] = {}
    sidecar = []
    union_mask = None
    for res in results:
        record = dictionary.get(res.target_id)
        level = level_names[record.level]
        if level not in frames:
            frames[level] = field.render_feature_frame(scene, pose, level=level).frame
        mask = decode_mask(frames[level], record.code, t)
        union_mask = mask if union_mask is None else (union_mask | mask)
        sidecar.append(
            {
                "id": res.target_id,
                "level": level,
                "label": record.label,
                "relevancy": res.relevancy,
                "path": res.path,
                "pixels": int(mask.sum()),
            }
        )

    out = Path(args.out)
    Image.fromarray((union_mask.astype(np.uint8) * 255)).convert("1").save(out)
    out.with_suffix(out.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    for entry in sidecar:
        print(
            f"id={entry['id']} level={entry['level']} relevancy={entry['relevancy']:.4f} "
            f"path={entry['path']} pixels={entry['pixels']}"
        )
    return 0


def _cmd_nav(args) -> int:
    from . import field, nav
    from .camera import load_cameras

    if args.nav_command == "build-graph":
        scene = field.load_scene(args.scene)
        cameras = load_cameras(args.cameras)

        def depth_renderer(cam):
            return field.render_feature_frame(
                scene, cam, level="object", with_depth=True
            ).depth

        nodes = nav.dilate_keypoints(cameras, step=args.step)
        graph = nav.build_graph(
            nodes,
            depth_renderer,
            samples=args.samples,
            radius_scale=args.radius_scale,
            probe_resolution=args.probe_resolution,
        )
        nav.save_graph(graph, args.out)
        print(f"graph: {len(graph)} nodes, {len(graph.edges)} edges -> {args.out}")
        return 0

    if args.nav_command == "path":
        graph = nav.load_graph(args.graph)
        path = nav.shortest_path(graph, args.from_node, args.to_node)
        if path is None:
            print("no path")
            return 1
        print(" -> ".join(str(k) for k in path.keypoints), f"(length {path.total_length:.6f})")
        return 0
    raise AssertionError("unreachable")


def _cmd_agent(args) -> int:
    from .agent import AgentModules, RuleBasedDecisionModel, TaskState, run_agent_step
    from .camera import load_cameras
    from . import field
    from .embeddings import SyntheticProvider
    from .mapping import load_dictionary
    from .nav import load_graph
    from .query import CANONICAL_PHRASES, RelevancyContext

    scene = field.load_scene(args.scene)
    dictionary = load_dictionary(args.dict)
    graph = load_graph(args.graph)
    cameras = load_cameras(args.cameras)
    provider = SyntheticProvider(seed=args.seed, dim=dictionary.dim)
    modules = AgentModules(
        scene=scene,
        dictionary=dictionary,
        graph=graph,
        ctx=RelevancyContext.from_provider(provider, CANONICAL_PHRASES),
        provider=provider,
        training_cameras=cameras,
        pose=cameras[0],
        frame_count=args.frames,
        denylist=tuple(args.deny or ()),
    )
    model = RuleBasedDecisionModel()
    state = TaskState()
    print("semsplat agent — type a command ('find the ...', 'move forward 1'), ctrl-d to exit")
    while True:
        try:
            line = input("> ").strip()
        except EOFError:
            print()
            return 0
        if not line:
            continue
        outcome = run_agent_step(state, line, model, modules)
        print(outcome["response"])
        if outcome["stream_poses"]:
            print(f"[{len(outcome['stream_poses'])} navigation frames rendered]")


def _cmd_serve(args) -> int:
    from .service import load_config, serve

    serve(load_config(args.config))
    return 0


def _cmd_demo(args) -> int:
    from .toyscene import write_toy_bundle

    out = write_toy_bundle(
        args.out, train_iterations=args.iters, seed=args.seed, size=args.size
    )
    print(f"toy bundle -> {out} (serve with: semsplat serve --config {out}/service.toml)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semsplat", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="filter candidate masks into a hierarchy")
    p.add_argument("--frames", default="", help="directory of frame PNGs (resolution check)")
    p.add_argument("--candidates", required=True, help="directory of candidate JSON docs")
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float, default=0.25, help="hollow-mask hole ratio")
    p.add_argument("--frame", type=int, default=0, help="frame id to extract from")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("map", help="build the mapping dictionary")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--embeddings", required=True, help="emb.bin path or 'synthetic'")
    p.add_argument("--w", type=float, default=0.7, help="part reserving weight")
    p.add_argument("--t", type=float, default=0.02, help="channel tolerance")
    p.add_argument("--out", required=True)
    p.add_argument("--identity", default="", help="propagated identity-mask dir")
    p.add_argument("--gt-out", default="", help="write GT feature frames here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=512)
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("train", help="optimize per-gaussian features")
    p.add_argument("--scene", required=True)
    p.add_argument("--gt", required=True, help="dir with cameras.bin and view_*.npz")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("query", help="open-vocabulary query against a trained scene")
    p.add_argument("--dict", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True, help="single-pose JSON")
    p.add_argument("--text", required=True)
    p.add_argument("--level", choices=("object", "part", "auto"), default="auto")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="1-bit mask PNG (JSON sidecar alongside)")
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("nav", help="navigation graph tools")
    nav_sub = p.add_subparsers(dest="nav_command", required=True)
    pg = nav_sub.add_parser("build-graph")
    pg.add_argument("--scene", required=True)
    pg.add_argument("--cameras", required=True)
    pg.add_argument("--out", required=True)
    pg.add_argument("--samples", type=int, default=8)
    pg.add_argument("--radius-scale", type=float, default=1.5)
    pg.add_argument("--probe-resolution", type=int, default=32)
    pg.add_argument("--step", type=float, default=None, help="override dilation step")
    pg.set_defaults(func=_cmd_nav)
    pp = nav_sub.add_parser("path")
    pp.add_argument("--graph", required=True)
    pp.add_argument("--from", dest="from_node", type=int, required=True)
    pp.add_argument("--to", dest="to_node", type=int, required=True)
    pp.set_defaults(func=_cmd_nav)

    p = sub.add_parser("agent", help="interactive agent REPL")
    agent_sub = p.add_subparsers(dest="agent_command", required=True)
    pr = agent_sub.add_parser("repl")
    pr.add_argument("--scene", required=True)
    pr.add_argument("--dict", required=True)
    pr.add_argument("--graph", required=True)
    pr.add_argument("--cameras", required=True)
    pr.add_argument("--frames", type=int, default=150)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--deny", action="append", help="denylist term (repeatable)")
    pr.set_defaults(func=_cmd_agent)

    p = sub.add_parser("serve", help="run the HTTP session service")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("demo", help="toy-scene artifact bundle")
    demo_sub = p.add_subparsers(dest="demo_command", required=True)
    pd = demo_sub.add_parser("build")
    pd.add_argument("--out", required=True)
    pd.add_argument("--iters", type=int, default=1500)
    pd.add_argument("--seed", type=int, default=7)
    pd.add_argument("--size", type=int, default=64)
    pd.set_defaults(func=_cmd_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Session service: scene lifecycle, chat, query, movement, frame streaming.

All engine artifacts (trained scene, dictionary, keypoint graph, cameras)
load once at startup and are shared read-only. Each session owns a camera
pose, an agent task state, a FIFO lock serializing its requests, and a frame
queue feeding its stream socket. Feature frames are cached per (pose,
dictionary version), so repeated queries at an unchanged pose never touch
the rasterizer.
"""

from __future__ import annotations

import hashlib
import io
import itertools
import os
import queue
import sys
import threading
import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response, WebSocket, WebSocketDisconnect
from PIL import Image
from pydantic import BaseModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import field as field_mod
from .agent import (
    AgentModules,
    HttpDecisionModel,
    RuleBasedDecisionModel,
    TaskState,
    pose_cache_key,
    run_agent_step,
)
from .camera import CameraPose, load_cameras, move_camera, pose_to_doc
from .embeddings import SyntheticProvider
from .mapping import load_dictionary
from .masks import mask_to_rle, rle_to_mask
from .nav import load_graph
from .query import (
    CANONICAL_PHRASES,
    Query,
    RelevancyContext,
    decode_mask,
    top_k_query,
)

ENV_PREFIX = "SEMSPLAT"

LEVEL_NAMES = {0: "object", 1: "part"}


@dataclass
class ServiceConfig:
    scene: str = ""
    dictionary: str = ""
    graph: str = ""
    cameras: str = ""
    provider_mode: str = "synthetic"
    provider_seed: int = 0
    provider_url: str = ""
    decision_mode: str = "rule"
    decision_url: str = ""
    frame_count: int = 150
    k: int = 1
    tolerance: float | None = None
    host: str = "127.0.0.1"
    port: int = 8787
    idle_timeout: float = 3600.0
    denylist: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.frame_count < 1:
            raise ValueError("frame_count must be at least 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.tolerance is not None and self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.idle_timeout <= 0:
            raise ValueError("idle_timeout must be positive")


def _env_override(section: str, key: str, current):
    raw = os.environ.get(f"{ENV_PREFIX}_{section.upper()}_{key.upper()}")
    if raw is None:
        return current
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        return float(raw)
    if isinstance(current, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def load_config(path: str | Path) -> ServiceConfig:
    """Parse the TOML config; SEMSPLAT_<SECTION>_<KEY> env vars override."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    artifacts = doc.get("artifacts", {})
    provider = doc.get("provider", {})
    decision = doc.get("decision_model", {})
    defaults = doc.get("defaults", {})
    server = doc.get("server", {})
    policy = doc.get("policy", {})
    cfg = ServiceConfig(
        scene=artifacts.get("scene", ""),
        dictionary=artifacts.get("dictionary", ""),
        graph=artifacts.get("graph", ""),
        cameras=artifacts.get("cameras", ""),
        provider_mode=provider.get("mode", "synthetic"),
        provider_seed=int(provider.get("seed", 0)),
        provider_url=provider.get("url", ""),
        decision_mode=decision.get("mode", "rule"),
        decision_url=decision.get("url", ""),
        frame_count=int(defaults.get("frame_count", 150)),
        k=int(defaults.get("k", 1)),
        tolerance=defaults.get("tolerance"),
        host=server.get("host", "127.0.0.1"),
        port=int(server.get("port", 8787)),
        idle_timeout=float(server.get("idle_timeout", 3600.0)),
        denylist=tuple(policy.get("denylist", ())),
    )
    cfg.scene = _env_override("artifacts", "scene", cfg.scene)
    cfg.dictionary = _env_override("artifacts", "dictionary", cfg.dictionary)
    cfg.graph = _env_override("artifacts", "graph", cfg.graph)
    cfg.cameras = _env_override("artifacts", "cameras", cfg.cameras)
    cfg.provider_seed = _env_override("provider", "seed", cfg.provider_seed)
    cfg.host = _env_override("server", "host", cfg.host)
    cfg.port = _env_override("server", "port", cfg.port)
    cfg.frame_count = _env_override("defaults", "frame_count", cfg.frame_count)
    cfg.denylist = _env_override("policy", "denylist", cfg.denylist)
    cfg.validate()
    return cfg


class ChatRequest(BaseModel):
    text: str


class QueryRequest(BaseModel):
    text: str
    level: str | None = None
    k: int | None = None


class MoveRequest(BaseModel):
    direction: str
    distance: float


@dataclass
class Session:
    session_id: str
    pose: CameraPose
    task_state: TaskState
    modules: AgentModules
    lock: threading.Lock = dataclass_field(default_factory=threading.Lock)
    frames: "queue.Queue[tuple[int, int, bytes]]" = dataclass_field(
        default_factory=queue.Queue
    )
    frame_seq: int = 0
    last_query_mask: np.ndarray | None = None
    created: float = dataclass_field(default_factory=time.time)
    last_active: float = dataclass_field(default_factory=time.time)

    def touch(self) -> None:
        self.last_active = time.time()


def frame_to_png(frame: np.ndarray, mask: np.ndarray | None = None) -> bytes:
    """Encode a feature frame as PNG; optionally composite a mask at 50% alpha."""
    img = np.clip(frame, 0.0, 1.0)
    if mask is not None:
        highlight = np.array([1.0, 0.2, 0.2])
        img = np.where(mask[:, :, None], 0.5 * img + 0.5 * highlight, img)
    data = (img * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class Engine:
    """Shared read-only artifacts plus the per-pose render cache."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.scene = field_mod.load_scene(config.scene)
        self.dictionary = load_dictionary(config.dictionary)
        self.graph = load_graph(config.graph)
        self.cameras = load_cameras(config.cameras)
        if not self.cameras:
            raise ValueError("cameras file holds no views")
        if config.provider_mode == "synthetic":
            self.provider = SyntheticProvider(
                seed=config.provider_seed, dim=self.dictionary.dim
            )
        elif config.provider_mode == "http":
            from .embeddings import HttpProvider

            self.provider = HttpProvider(config.provider_url, dim=self.dictionary.dim)
        else:
            raise ValueError(
                f"provider mode {config.provider_mode!r} cannot embed query text"
            )
        self.ctx = RelevancyContext.from_provider(self.provider, CANONICAL_PHRASES)
        self.dict_version = hashlib.sha256(
            Path(config.dictionary).read_bytes()
        ).hexdigest()[:16]
        self.tolerance = (
            config.tolerance if config.tolerance is not None else self.dictionary.tolerance
        )
        self._frame_cache: dict = {}
        self._cache_lock = threading.Lock()

    def decision_model(self):
        if self.config.decision_mode == "http":
            return HttpDecisionModel(self.config.decision_url)
        return RuleBasedDecisionModel()

    def rendered_frame(self, pose: CameraPose, level: str) -> np.ndarray:
        key = (pose_cache_key(pose), level, self.dict_version)
        with self._cache_lock:
            cached = self._frame_cache.get(key)
        if cached is not None:
            return cached
        frame = field_mod.render_feature_frame(self.scene, pose, level=level).frame
        with self._cache_lock:
            if len(self._frame_cache) > 64:
                self._frame_cache.clear()
            self._frame_cache[key] = frame
        return frame


def create_app(config: ServiceConfig) -> FastAPI:
    engine = Engine(config)
    app = FastAPI(title="semsplat service")
    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()
    ids = itertools.count(1)

    app.state.engine = engine
    app.state.sessions = sessions

    def get_session(session_id: str) -> Session:
        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return session

    def purge_idle() -> None:
        now = time.time()
        with sessions_lock:
            stale = [
                sid
                for sid, s in sessions.items()
                if now - s.last_active > config.idle_timeout
            ]
            for sid in stale:
                del sessions[sid]

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(sessions)}

    @app.post("/sessions")
    def create_session():
        purge_idle()
        pose = engine.cameras[0]
        modules = AgentModules(
            scene=engine.scene,
            dictionary=engine.dictionary,
            graph=engine.graph,
            ctx=engine.ctx,
            provider=engine.provider,
            training_cameras=engine.cameras,
            pose=pose,
            frame_count=config.frame_count,
            tolerance=engine.tolerance,
            denylist=config.denylist,
        )
        session = Session(
            session_id=f"s{next(ids):06d}",
            pose=pose,
            task_state=TaskState(),
            modules=modules,
        )
        with sessions_lock:
            sessions[session.session_id] = session
        return {"session_id": session.session_id}

    @app.post("/sessions/{session_id}/chat")
    def chat(session_id: str, req: ChatRequest):
        session = get_session(session_id)
        with session.lock:
            session.touch()
            session.modules.pose = session.pose
            outcome = run_agent_step(
                session.task_state, req.text, engine.decision_model(), session.modules
            )
            session.pose = session.modules.pose
            stream_poses = outcome.pop("stream_poses")
            stream_url = None
            if stream_poses:
                total = len(stream_poses)
                for pose in stream_poses:
                    png = frame_to_png(engine.rendered_frame(pose, "object"))
                    session.frames.put((session.frame_seq, total, png))
                    session.frame_seq += 1
                session.frame_seq = 0
                stream_url = f"/sessions/{session_id}/stream"
            return {
                "response": outcome["response"],
                "refused": outcome["refused"],
                "degraded": outcome["degraded"],
                "stream_url": stream_url,
                "pose": pose_to_doc(session.pose),
            }

    @app.post("/sessions/{session_id}/query")
    def query(session_id: str, req: QueryRequest):
        session = get_session(session_id)
        with session.lock:
            session.touch()
            if len(engine.dictionary) == 0:
                raise HTTPException(status_code=400, detail="empty dictionary")
            level = req.level or "auto"
            if level not in ("auto", "object", "part"):
                raise HTTPException(status_code=422, detail=f"bad level {level!r}")
            k = req.k or config.k
            q = Query(
                text=req.text,
                embedding=engine.provider.embed_text(req.text),
                level_hint=level,
            )
            results = top_k_query(
                engine.dictionary, q, engine.ctx, k, text_embedder=engine.provider
            )
            payload = []
            for res in results:
                record = engine.dictionary.get(res.target_id)
                frame = engine.rendered_frame(
                    session.pose, LEVEL_NAMES[record.level]
                )
                mask = decode_mask(frame, record.code, engine.tolerance)
                payload.append(
                    {
                        "id": res.target_id,
                        "level": LEVEL_NAMES[record.level],
                        "label": record.label,
                        "relevancy": res.relevancy,
                        "path": res.path,
                        "mask_rle": mask_to_rle(mask),
                    }
                )
            if payload:
                session.last_query_mask = rle_to_mask(payload[0]["mask_rle"])
            return {"results": payload}

    @app.post("/sessions/{session_id}/move")
    def move(session_id: str, req: MoveRequest):
        session = get_session(session_id)
        with session.lock:
            session.touch()
            try:
                session.pose = move_camera(session.pose, req.direction, req.distance)
            except ValueError as err:
                raise HTTPException(status_code=422, detail=str(err))
            session.modules.pose = session.pose
            session.last_query_mask = None  # stale at the new pose
            return {"pose": pose_to_doc(session.pose)}

    @app.get("/sessions/{session_id}/frame")
    def frame(session_id: str, overlay: bool = False, level: str = "object"):
        session = get_session(session_id)
        with session.lock:
            session.touch()
            if level not in ("object", "part"):
                raise HTTPException(status_code=422, detail=f"bad level {level!r}")
            img = engine.rendered_frame(session.pose, level)
            mask = session.last_query_mask if overlay else None
            png = frame_to_png(img, mask)
        return Response(content=png, media_type="image/png")

    @app.websocket("/sessions/{session_id}/stream")
    async def stream(websocket: WebSocket, session_id: str):
        import asyncio

        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            await websocket.close(code=4404)
            return
        await websocket.accept()
        try:
            while True:
                try:
                    seq, total, png = session.frames.get_nowait()
                except queue.Empty:
                    await asyncio.sleep(0.02)
                    continue
                header = seq.to_bytes(4, "little") + total.to_bytes(4, "little")
                await websocket.send_bytes(header + png)
        except (WebSocketDisconnect, RuntimeError):
            return

    return app


def create_app_from_file(path: str | Path) -> FastAPI:
    return create_app(load_config(path))


def serve(config: ServiceConfig) -> None:
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")

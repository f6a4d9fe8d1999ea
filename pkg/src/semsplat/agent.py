"""Interactive scene agent: an outer loop per user requirement, an inner
loop executing and revising a subtask sequence.

The decision model (rule-based by default, HTTP-pluggable) turns a command
into subtasks over the function modules — localization, navigation,
movement, render, respond, refuse — and revises the remaining sequence when
a module reports failure (no path, target not visible). Movement-class
subtasks are screened against a configurable denylist before execution.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import requests

from . import field as field_mod
from .camera import CameraPose, move_camera
from .mapping import MappingDictionary
from .nav import KeypointGraph, interpolate_path, nearest_node, shortest_path
from .query import Query, QueryResult, RelevancyContext, decode_mask, resolve_target

LEVEL_NAMES = {0: "object", 1: "part"}

_MOVE_RE = re.compile(
    r"\b(?:move|go|step)\s+(forward|back|backward|left|right|up|down)"
    r"(?:\s+(?:by\s+)?([0-9]*\.?[0-9]+))?",
    re.IGNORECASE,
)
_FIND_RE = re.compile(
    r"\b(?:find|locate|look\s+at|show(?:\s+me)?|where\s+is)\s+(.+)", re.IGNORECASE
)


@dataclass
class Subtask:
    module: str  # localization | navigation | movement | render | respond | refuse
    params: dict
    status: str = "pending"  # pending | done | failed | refused | skipped
    feedback: dict = dataclass_field(default_factory=dict)


@dataclass
class TaskState:
    requirement: str = ""
    status: str = "idle"  # idle | running | completed | refused | failed
    subtasks: list[Subtask] = dataclass_field(default_factory=list)
    history: list[dict] = dataclass_field(default_factory=list)

    def log(self, event: dict) -> None:
        self.history.append(event)

    def history_json(self) -> str:
        return json.dumps(self.history, sort_keys=True, separators=(",", ":"))


@dataclass
class AgentModules:
    """Everything the function modules need, bundled per session."""

    scene: "field_mod.GaussianScene"
    dictionary: MappingDictionary
    graph: KeypointGraph
    ctx: RelevancyContext
    provider: object  # needs embed_text
    training_cameras: list[CameraPose]
    pose: CameraPose
    frame_count: int = 150
    tolerance: float | None = None  # None -> dictionary tolerance
    denylist: tuple[str, ...] = ()
    _view_cache: dict = dataclass_field(default_factory=dict)

    def decode_tolerance(self) -> float:
        return self.tolerance if self.tolerance is not None else self.dictionary.tolerance

    def render_view(self, cam: CameraPose, level: str) -> np.ndarray:
        key = (pose_cache_key(cam), level)
        if key not in self._view_cache:
            self._view_cache[key] = field_mod.render_feature_frame(
                self.scene, cam, level=level
            ).frame
        return self._view_cache[key]


def pose_cache_key(pose: CameraPose) -> bytes:
    """Content hash of a pose, for caching renders at an unchanged view."""
    return (
        np.asarray(pose.rotation, dtype=np.float64).tobytes()
        + np.asarray(pose.translation, dtype=np.float64).tobytes()
        + np.asarray(
            [pose.fx, pose.fy, pose.cx, pose.cy, pose.width, pose.height],
            dtype=np.float64,
        ).tobytes()
    )


def screen_denylist(text: str, denylist: tuple[str, ...]) -> str | None:
    """First denylisted term found in the text, or None."""
    lowered = text.lower()
    for term in denylist:
        if term.lower() in lowered:
            return term
    return None


class RuleBasedDecisionModel:
    """Deterministic command parser; no external dependencies."""

    name = "rule"

    def plan(self, user_input: str, modules: AgentModules) -> list[Subtask]:
        term = screen_denylist(user_input, modules.denylist)
        if term is not None:
            return [
                Subtask(
                    module="refuse",
                    params={"reason": f"command mentions denylisted term {term!r}"},
                )
            ]
        m = _MOVE_RE.search(user_input)
        if m:
            direction = m.group(1).lower()
            if direction == "backward":
                direction = "back"
            distance = float(m.group(2)) if m.group(2) else 1.0
            return [
                Subtask(module="movement", params={"direction": direction, "distance": distance}),
                Subtask(module="render", params={}),
                Subtask(module="respond", params={"template": "moved"}),
            ]
        m = _FIND_RE.search(user_input)
        if m:
            target = m.group(1).strip().rstrip(".!?")
            target = re.sub(r"^(the|a|an)\s+", "", target, flags=re.IGNORECASE)
            return [
                Subtask(module="localization", params={"text": target}),
                Subtask(module="navigation", params={}),
                Subtask(module="render", params={"stream": True}),
                Subtask(module="respond", params={"template": "found"}),
            ]
        return [
            Subtask(
                module="respond",
                params={
                    "template": "help",
                    "text": "I can find targets ('find the ...') or move the camera "
                    "('move forward 1').",
                },
            )
        ]

    def revise(
        self, failed: Subtask, remaining: list[Subtask], modules: AgentModules
    ) -> list[Subtask]:
        reason = failed.feedback.get("error", "module failure")
        return [Subtask(module="respond", params={"template": "failure", "text": reason})]


class HttpDecisionModel:
    """External planner; falls back to the rule-based model when unreachable."""

    name = "http"

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.fallback = RuleBasedDecisionModel()
        self.degraded = False

    def _request(self, payload: dict) -> list[Subtask] | None:
        try:
            resp = requests.post(self.url, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            doc = resp.json()
        except (requests.RequestException, ValueError):
            self.degraded = True
            return None
        return [
            Subtask(module=st["module"], params=st.get("params", {}))
            for st in doc["subtasks"]
        ]

    def plan(self, user_input: str, modules: AgentModules) -> list[Subtask]:
        self.degraded = False
        plan = self._request(
            {
                "input": user_input,
                "state": {
                    "pose": np.asarray(modules.pose.translation, dtype=float).tolist(),
                    "targets": len(modules.dictionary),
                },
            }
        )
        if plan is None:
            return self.fallback.plan(user_input, modules)
        for st in plan:
            term = screen_denylist(json.dumps(st.params), modules.denylist)
            if st.module in ("movement", "navigation") and term is not None:
                return [
                    Subtask(
                        module="refuse",
                        params={"reason": f"subtask mentions denylisted term {term!r}"},
                    )
                ]
        return plan

    def revise(self, failed, remaining, modules):
        plan = self._request({"failed": failed.module, "error": failed.feedback})
        if plan is None:
            return self.fallback.revise(failed, remaining, modules)
        return plan


def _best_view_node(modules: AgentModules, result: QueryResult) -> tuple[int, int]:
    """(graph node, visible pixel count) of the training view seeing the target best."""
    record = modules.dictionary.get(result.target_id)
    level = LEVEL_NAMES[record.level]
    t = modules.decode_tolerance()
    best_cam, best_pixels = -1, 0
    for i, cam in enumerate(modules.training_cameras):
        frame = modules.render_view(cam, level)
        pixels = int(decode_mask(frame, record.code, t).sum())
        if pixels > best_pixels:
            best_cam, best_pixels = i, pixels
    if best_cam < 0:
        return -1, 0
    node = nearest_node(modules.graph, modules.training_cameras[best_cam].translation)
    return node, best_pixels


def _execute(
    subtask: Subtask, state: TaskState, modules: AgentModules, scratch: dict
) -> None:
    """Run one subtask, record feedback, raise nothing (failures go to status)."""
    if subtask.module == "refuse":
        subtask.status = "refused"
        subtask.feedback = {"reason": subtask.params["reason"]}
        scratch["response"] = f"I can't do that: {subtask.params['reason']}."
        scratch["refused"] = True
        return

    if subtask.module == "localization":
        if len(modules.dictionary) == 0:
            subtask.status = "failed"
            subtask.feedback = {"error": "the scene dictionary is empty"}
            return
        text = subtask.params["text"]
        query = Query(text=text, embedding=modules.provider.embed_text(text))
        result = resolve_target(
            modules.dictionary, query, modules.ctx, text_embedder=modules.provider
        )
        scratch["target"] = result
        subtask.status = "done"
        subtask.feedback = {
            "target_id": result.target_id,
            "level": LEVEL_NAMES[result.level],
            "relevancy": round(result.relevancy, 9),
            "path": result.path,
        }
        return

    if subtask.module == "navigation":
        result = scratch.get("target")
        if result is None:
            subtask.status = "failed"
            subtask.feedback = {"error": "nothing to navigate to (no localized target)"}
            return
        term = screen_denylist(json.dumps(subtask.params), modules.denylist)
        if term is not None:
            subtask.status = "refused"
            subtask.feedback = {"reason": f"denylisted term {term!r}"}
            scratch["refused"] = True
            return
        goal, pixels = _best_view_node(modules, result)
        if goal < 0:
            subtask.status = "failed"
            subtask.feedback = {"error": "target is not visible from any known view"}
            return
        start = nearest_node(modules.graph, modules.pose.translation)
        path = shortest_path(modules.graph, start, goal)
        if path is None:
            subtask.status = "failed"
            subtask.feedback = {"error": "no path to the target view"}
            return
        poses = interpolate_path(
            modules.graph, path, m=modules.frame_count, template=modules.pose
        )
        scratch["stream_poses"] = poses
        modules.pose = poses[-1]
        subtask.status = "done"
        subtask.feedback = {
            "start": start,
            "goal": goal,
            "nodes": list(path.keypoints),
            "length": round(path.total_length, 9),
            "visible_pixels": pixels,
        }
        return

    if subtask.module == "movement":
        term = screen_denylist(json.dumps(subtask.params), modules.denylist)
        if term is not None:
            subtask.status = "refused"
            subtask.feedback = {"reason": f"denylisted term {term!r}"}
            scratch["refused"] = True
            return
        direction = subtask.params["direction"]
        distance = float(subtask.params.get("distance", 1.0))
        modules.pose = move_camera(modules.pose, direction, distance)
        subtask.status = "done"
        subtask.feedback = {
            "direction": direction,
            "distance": distance,
            "position": [round(float(v), 9) for v in modules.pose.translation],
        }
        return

    if subtask.module == "render":
        poses = scratch.pop("stream_poses", None)
        if poses is None:
            poses = [modules.pose]
        scratch["frames"] = poses
        subtask.status = "done"
        subtask.feedback = {"frames": len(poses)}
        return

    if subtask.module == "respond":
        template = subtask.params.get("template", "text")
        if template == "found":
            result = scratch.get("target")
            record = modules.dictionary.get(result.target_id)
            name = record.label or f"target {result.target_id}"
            text = (
                f"Found {name} ({LEVEL_NAMES[record.level]}-level, "
                f"relevancy {result.relevancy:.3f}); showing the way."
            )
        elif template == "moved":
            text = "Camera moved."
        else:
            text = subtask.params.get("text", "Done.")
        scratch["response"] = text
        subtask.status = "done"
        subtask.feedback = {"text": text}
        return

    subtask.status = "failed"
    subtask.feedback = {"error": f"unknown module {subtask.module!r}"}


def run_agent_step(
    state: TaskState,
    user_input: str,
    decision_model,
    modules: AgentModules,
) -> dict:
    """One outer-loop turn: plan, execute, revise on feedback, respond.

    Returns {response, refused, degraded, stream_poses} and appends the full
    execution trace to state.history.
    """
    state.requirement = user_input
    state.status = "running"
    state.log({"event": "user_input", "text": user_input})

    subtasks = decision_model.plan(user_input, modules)
    state.subtasks = subtasks
    state.log(
        {
            "event": "plan",
            "model": getattr(decision_model, "name", "unknown"),
            "modules": [st.module for st in subtasks],
        }
    )

    scratch: dict = {}
    queue = list(subtasks)
    executed: list[Subtask] = []
    while queue:
        subtask = queue.pop(0)
        _execute(subtask, state, modules, scratch)
        executed.append(subtask)
        state.log(
            {
                "event": "subtask",
                "module": subtask.module,
                "params": subtask.params,
                "status": subtask.status,
                "feedback": subtask.feedback,
            }
        )
        if subtask.status == "refused":
            for rest in queue:
                rest.status = "skipped"
            state.status = "refused"
            queue = []
            break
        if subtask.status == "failed":
            queue = decision_model.revise(subtask, queue, modules)
            state.subtasks = executed + queue
            state.log(
                {"event": "revise", "modules": [st.module for st in queue]}
            )

    if state.status != "refused":
        state.status = "completed" if all(
            st.status in ("done", "skipped") for st in state.subtasks
        ) else "failed"
    state.log({"event": "outcome", "status": state.status})

    response = scratch.get("response", "Done.")
    return {
        "response": response,
        "refused": bool(scratch.get("refused", False)),
        "degraded": bool(getattr(decision_model, "degraded", False)),
        "stream_poses": scratch.get("frames", []),
    }

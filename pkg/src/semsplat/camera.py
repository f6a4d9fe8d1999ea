"""Camera poses, quaternion helpers, and camera file I/O.

Pose convention is camera-to-world: the columns of R are the camera's
right / down / forward axes expressed in world coordinates (x right, y down,
z forward), and T is the camera center. A world point p maps to camera
coordinates as R^T (p - T).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

_CAM_MAGIC = b"SSCA"
_CAM_VERSION = 1

MOVE_DIRECTIONS = {
    "forward": np.array([0.0, 0.0, 1.0]),
    "back": np.array([0.0, 0.0, -1.0]),
    "right": np.array([1.0, 0.0, 0.0]),
    "left": np.array([-1.0, 0.0, 0.0]),
    "up": np.array([0.0, -1.0, 0.0]),  # y-down camera convention
    "down": np.array([0.0, 1.0, 0.0]),
}


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray  # 3x3, camera axes as columns (right, down, forward)
    translation: np.ndarray  # camera center in world coordinates
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self, tol: float = 1e-6) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation determinant must be +1")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def with_pose(self, rotation: np.ndarray, translation: np.ndarray) -> "CameraPose":
        return replace(self, rotation=rotation, translation=translation)


def move_camera(pose: CameraPose, direction: str, d: float) -> CameraPose:
    """Shift the camera center by d along one of its own axes; R unchanged."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    if direction not in MOVE_DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    axis = MOVE_DIRECTIONS[direction]
    t_new = np.asarray(pose.translation, dtype=np.float64) + d * (pose.rotation @ axis)
    return pose.with_pose(np.array(pose.rotation, copy=True), t_new)


def look_at_rotation(forward: np.ndarray, world_up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Rotation whose +z column points along ``forward``.

    Falls back to the world x axis when forward is parallel to world_up.
    """
    f = np.asarray(forward, dtype=np.float64)
    n = np.linalg.norm(f)
    if n < 1e-12:
        raise ValueError("zero forward direction")
    f = f / n
    up = np.asarray(world_up, dtype=np.float64)
    x = np.cross(up, f)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(np.array([1.0, 0.0, 0.0]), f)
        if np.linalg.norm(x) < 1e-8:
            x = np.cross(np.array([0.0, 0.0, 1.0]), f)
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    return np.stack([x, y, f], axis=1)


# --- quaternions (w, x, y, z) -------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    trace = np.trace(r)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        w = 0.25 / s
        x = (r[2, 1] - r[1, 2]) * s
        y = (r[0, 2] - r[2, 0]) * s
        z = (r[1, 0] - r[0, 1]) * s
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = 2.0 * np.sqrt(max(1e-12, 1.0 + r[0, 0] - r[1, 1] - r[2, 2]))
            w = (r[2, 1] - r[1, 2]) / s
            x = 0.25 * s
            y = (r[0, 1] + r[1, 0]) / s
            z = (r[0, 2] + r[2, 0]) / s
        elif i == 1:
            s = 2.0 * np.sqrt(max(1e-12, 1.0 + r[1, 1] - r[0, 0] - r[2, 2]))
            w = (r[0, 2] - r[2, 0]) / s
            x = (r[0, 1] + r[1, 0]) / s
            y = 0.25 * s
            z = (r[1, 2] + r[2, 1]) / s
        else:
            s = 2.0 * np.sqrt(max(1e-12, 1.0 + r[2, 2] - r[0, 0] - r[1, 1]))
            w = (r[1, 0] - r[0, 1]) / s
            x = (r[0, 2] + r[2, 0]) / s
            y = (r[1, 2] + r[2, 1]) / s
            z = 0.25 * s
    return quat_normalize(np.array([w, x, y, z]))


def quat_slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical interpolation on the unit quaternion sphere (shortest arc)."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(q0 + u * (q1 - q0))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    return (np.sin((1.0 - u) * theta) * q0 + np.sin(u * theta) * q1) / np.sin(theta)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix back onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


# --- camera files ---------------------------------------------------------------
#
# Binary multi-view file (little-endian):
#   magic "SSCA" | u16 version | u32 count
#   per view: 9 x f64 R row-major | 3 x f64 T | 4 x f64 fx fy cx cy | u32 W | u32 H


def save_cameras(cameras: list[CameraPose], path: str | Path) -> None:
    out = bytearray()
    out += _CAM_MAGIC
    out += struct.pack("<HI", _CAM_VERSION, len(cameras))
    for cam in cameras:
        out += np.asarray(cam.rotation, dtype="<f8").tobytes()
        out += np.asarray(cam.translation, dtype="<f8").tobytes()
        out += struct.pack("<dddd", cam.fx, cam.fy, cam.cx, cam.cy)
        out += struct.pack("<II", cam.width, cam.height)
    Path(path).write_bytes(bytes(out))


def load_cameras(path: str | Path) -> list[CameraPose]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CAM_MAGIC:
        raise ValueError("not a cameras file (bad magic)")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != _CAM_VERSION:
        raise ValueError(f"unsupported cameras file version {version}")
    offset = 10
    cameras = []
    for _ in range(count):
        r = np.frombuffer(raw, dtype="<f8", count=9, offset=offset).reshape(3, 3).copy()
        offset += 72
        t = np.frombuffer(raw, dtype="<f8", count=3, offset=offset).copy()
        offset += 24
        fx, fy, cx, cy = struct.unpack_from("<dddd", raw, offset)
        offset += 32
        w, h = struct.unpack_from("<II", raw, offset)
        offset += 8
        cam = CameraPose(
            rotation=r, translation=t, fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h
        )
        cam.validate()
        cameras.append(cam)
    return cameras


def pose_to_doc(pose: CameraPose) -> dict:
    return {
        "rotation": np.asarray(pose.rotation, dtype=float).tolist(),
        "translation": np.asarray(pose.translation, dtype=float).tolist(),
        "fx": pose.fx,
        "fy": pose.fy,
        "cx": pose.cx,
        "cy": pose.cy,
        "width": pose.width,
        "height": pose.height,
    }


def pose_from_doc(doc: dict) -> CameraPose:
    pose = CameraPose(
        rotation=np.asarray(doc["rotation"], dtype=np.float64),
        translation=np.asarray(doc["translation"], dtype=np.float64),
        fx=float(doc["fx"]),
        fy=float(doc["fy"]),
        cx=float(doc["cx"]),
        cy=float(doc["cy"]),
        width=int(doc["width"]),
        height=int(doc["height"]),
    )
    pose.validate()
    return pose


def load_pose_json(path: str | Path) -> CameraPose:
    return pose_from_doc(json.loads(Path(path).read_text()))


def save_pose_json(pose: CameraPose, path: str | Path) -> None:
    Path(path).write_text(json.dumps(pose_to_doc(pose)))

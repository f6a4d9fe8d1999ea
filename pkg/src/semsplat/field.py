"""CPU feature-field rasterizer and per-Gaussian feature optimizer.

Each Gaussian carries two trainable 3-component feature codes (object level
and part level) over frozen geometry. Rendering projects every Gaussian with
the local affine approximation, bins them into 16x16 pixel tiles, and
alpha-composites front to back:

    F(p) = sum_i f_i * a_i * prod_{j<i} (1 - a_j)

with a_i = opacity_i * exp(-0.5 d^T Sigma'^-1 d), clamped to 0.99. Blending
stops per pixel once transmittance drops below 1e-4. Optimization minimizes
(1-lambda)*L1 + lambda*(1-SSIM)/2 against ground-truth code rasters; because
geometry is frozen the per-pixel blend weights are constant, so each
training view reduces to a fixed linear map from features to pixels.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import CameraPose, quat_to_rotation

TILE = 16
ALPHA_CLAMP = 0.99
ALPHA_MIN = 1e-7  # per-Gaussian extent cutoff (tile binning radius)
TRANSMITTANCE_CUTOFF = 1e-4
COV_FLOOR = 0.3  # low-pass floor added to the 2D covariance diagonal, px^2
NEAR_PLANE = 0.2  # the affine projection degenerates at grazing depths
FRUSTUM_MARGIN = 0.3  # extra image fraction a projected mean may fall outside

_SCENE_MAGIC = b"SSCN"
_SCENE_VERSION = 1

_counter_lock = threading.Lock()
_render_invocations = 0


def render_invocations() -> int:
    """Total rasterizer invocations since process start (or last reset)."""
    with _counter_lock:
        return _render_invocations


def reset_render_invocations() -> None:
    global _render_invocations
    with _counter_lock:
        _render_invocations = 0


def _count_invocation() -> None:
    global _render_invocations
    with _counter_lock:
        _render_invocations += 1


@dataclass
class GaussianScene:
    """Struct-of-arrays scene: frozen geometry plus two feature channels."""

    means: np.ndarray  # (N, 3) f64
    scales: np.ndarray  # (N, 3) f64, positive
    rotations: np.ndarray  # (N, 4) f64 unit quaternions, w first
    opacities: np.ndarray  # (N,) f64 in [0, 1]
    features_obj: np.ndarray  # (N, 3) f64
    features_part: np.ndarray  # (N, 3) f64

    def __len__(self) -> int:
        return self.means.shape[0]

    def features(self, level: str) -> np.ndarray:
        if level == "object":
            return self.features_obj
        if level == "part":
            return self.features_part
        raise ValueError(f"unknown feature level {level!r}")

    def validate(self) -> None:
        n = len(self)
        for name, arr, shape in (
            ("means", self.means, (n, 3)),
            ("scales", self.scales, (n, 3)),
            ("rotations", self.rotations, (n, 4)),
            ("opacities", self.opacities, (n,)),
            ("features_obj", self.features_obj, (n, 3)),
            ("features_part", self.features_part, (n, 3)),
        ):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if not np.all(self.scales > 0):
            raise ValueError("scales must be positive")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities must lie in [0, 1]")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("rotation quaternions must be unit length")


@dataclass
class FeatureFrame:
    frame: np.ndarray  # (H, W, 3) f64
    camera: CameraPose
    depth: np.ndarray | None = None  # (H, W) f64, 0 where blend weight < 1e-4


@dataclass
class LossConfig:
    lam: float = 0.2  # D-SSIM weight
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2  # stabilizers for dynamic range 1.0
    ssim_c2: float = 0.03**2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def covariance_3d(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T per Gaussian, (N, 3, 3)."""
    n = scales.shape[0]
    cov = np.empty((n, 3, 3))
    for i in range(n):
        r = quat_to_rotation(rotations[i])
        s = np.diag(scales[i] ** 2)
        cov[i] = r @ s @ r.T
    return cov


def project_gaussians(scene: GaussianScene, cam: CameraPose):
    """EWA projection: 2D means, regularized 2D covariances, view depths.

    Returns (means2d (N,2), cov2d (N,2,2), depth (N,), valid (N,) bool).
    Gaussians behind the near plane are culled, as are those whose projected
    mean lands far outside the image (grazing projections are meaningless
    under the affine approximation and would otherwise blanket the frame).
    """
    q = cam.world_to_camera(scene.means)  # (N, 3)
    depth = q[:, 2]
    valid = depth > NEAR_PLANE

    n = len(scene)
    means2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 2, 2))
    if not valid.any():
        return means2d, cov2d, depth, valid

    z = np.where(valid, depth, 1.0)
    means2d[:, 0] = cam.fx * q[:, 0] / z + cam.cx
    means2d[:, 1] = cam.fy * q[:, 1] / z + cam.cy
    margin = FRUSTUM_MARGIN * max(cam.width, cam.height)
    valid &= (
        (means2d[:, 0] >= -margin)
        & (means2d[:, 0] <= cam.width + margin)
        & (means2d[:, 1] >= -margin)
        & (means2d[:, 1] <= cam.height + margin)
    )

    cov3d = covariance_3d(scene.scales, scene.rotations)
    w = cam.rotation.T  # world -> camera
    for i in np.nonzero(valid)[0]:
        x, y, zi = q[i]
        j = np.array(
            [
                [cam.fx / zi, 0.0, -cam.fx * x / (zi * zi)],
                [0.0, cam.fy / zi, -cam.fy * y / (zi * zi)],
            ]
        )
        a = j @ w
        c = a @ cov3d[i] @ a.T
        c[0, 0] += COV_FLOOR
        c[1, 1] += COV_FLOOR
        det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
        if not np.isfinite(det) or det <= 0:
            raise ValueError(f"degenerate 2D covariance for gaussian {i}")
        cov2d[i] = c
    return means2d, cov2d, depth, valid


def project_gaussian(
    mean: np.ndarray,
    scale: np.ndarray,
    rotation: np.ndarray,
    cam: CameraPose,
):
    """Single-Gaussian projection; returns (mean2d, cov2d, depth) or None if culled."""
    scene = GaussianScene(
        means=np.asarray(mean, dtype=np.float64).reshape(1, 3),
        scales=np.asarray(scale, dtype=np.float64).reshape(1, 3),
        rotations=np.asarray(rotation, dtype=np.float64).reshape(1, 4),
        opacities=np.ones(1),
        features_obj=np.zeros((1, 3)),
        features_part=np.zeros((1, 3)),
    )
    means2d, cov2d, depth, valid = project_gaussians(scene, cam)
    if not valid[0]:
        return None
    return means2d[0], cov2d[0], float(depth[0])


def _rasterize(
    scene: GaussianScene,
    cam: CameraPose,
    feats: np.ndarray,
    with_depth: bool = False,
    collect_weights: bool = False,
):
    _count_invocation()
    h, w = cam.height, cam.width
    npix = h * w
    n = len(scene)

    frame = np.zeros((npix, 3))
    depth_img = np.zeros(npix) if with_depth else None
    weight_sum = np.zeros(npix) if with_depth else None
    weights = np.zeros((npix, n)) if collect_weights else None
    if n == 0:
        out_frame = frame.reshape(h, w, 3)
        out_depth = depth_img.reshape(h, w) if with_depth else None
        return out_frame, out_depth, weights

    means2d, cov2d, depth, valid = project_gaussians(scene, cam)
    opac = np.asarray(scene.opacities, dtype=np.float64)
    live = valid & (opac > ALPHA_MIN)
    idx = np.nonzero(live)[0]
    if idx.size == 0:
        out_frame = frame.reshape(h, w, 3)
        out_depth = depth_img.reshape(h, w) if with_depth else None
        return out_frame, out_depth, weights

    # Stable front-to-back order; ties resolve by gaussian index.
    idx = idx[np.argsort(depth[idx], kind="stable")]

    # Inverse covariances and binning radii (alpha >= ALPHA_MIN extent).
    c = cov2d[idx]
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    inv = np.empty_like(c)
    inv[:, 0, 0] = c[:, 1, 1] / det
    inv[:, 1, 1] = c[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -c[:, 0, 1] / det
    half_trace = 0.5 * (c[:, 0, 0] + c[:, 1, 1])
    lam_max = half_trace + np.sqrt(
        np.maximum(0.25 * (c[:, 0, 0] - c[:, 1, 1]) ** 2 + c[:, 0, 1] ** 2, 0.0)
    )
    radius = np.sqrt(2.0 * np.log(opac[idx] / ALPHA_MIN) * lam_max)

    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    tile_lists: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    for rank, gi in enumerate(idx):
        mx, my = means2d[gi]
        r = radius[rank]
        tx0 = max(0, int((mx - r) // TILE))
        tx1 = min(tiles_x - 1, int((mx + r) // TILE))
        ty0 = max(0, int((my - r) // TILE))
        ty1 = min(tiles_y - 1, int((my + r) // TILE))
        if tx1 < 0 or ty1 < 0 or tx0 >= tiles_x or ty0 >= tiles_y:
            continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                tile_lists[ty * tiles_x + tx].append(rank)

    for ty in range(tiles_y):
        y0 = ty * TILE
        y1 = min(h, y0 + TILE)
        for tx in range(tiles_x):
            ranks = tile_lists[ty * tiles_x + tx]
            if not ranks:
                continue
            x0 = tx * TILE
            x1 = min(w, x0 + TILE)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            pix = (ys * w + xs).ravel()
            px = xs.ravel().astype(np.float64)
            py = ys.ravel().astype(np.float64)
            trans = np.ones(pix.size)
            for rank in ranks:
                gi = idx[rank]
                dx = px - means2d[gi, 0]
                dy = py - means2d[gi, 1]
                power = -0.5 * (
                    inv[rank, 0, 0] * dx * dx
                    + 2.0 * inv[rank, 0, 1] * dx * dy
                    + inv[rank, 1, 1] * dy * dy
                )
                alpha = np.minimum(opac[gi] * np.exp(power), ALPHA_CLAMP)
                contrib = alpha * trans * (trans >= TRANSMITTANCE_CUTOFF)
                frame[pix] += contrib[:, None] * feats[gi]
                if with_depth:
                    depth_img[pix] += contrib * depth[gi]
                    weight_sum[pix] += contrib
                if collect_weights:
                    weights[pix, gi] += contrib
                trans = trans * (1.0 - alpha)
                if np.all(trans < TRANSMITTANCE_CUTOFF):
                    break

    out_frame = frame.reshape(h, w, 3)
    out_depth = None
    if with_depth:
        depth_img[weight_sum < TRANSMITTANCE_CUTOFF] = 0.0
        out_depth = depth_img.reshape(h, w)
    return out_frame, out_depth, weights


def render_feature_frame(
    scene: GaussianScene,
    cam: CameraPose,
    level: str = "object",
    with_depth: bool = False,
) -> FeatureFrame:
    """Composite one view of the chosen feature channel (and optional depth)."""
    cam.validate()
    feats = scene.features(level)
    frame, depth, _ = _rasterize(scene, cam, feats, with_depth=with_depth)
    return FeatureFrame(frame=frame, camera=cam, depth=depth)


def compute_blend_weights(scene: GaussianScene, cam: CameraPose) -> np.ndarray:
    """Per-pixel compositing weights, (H*W, N); render(f) == weights @ f."""
    _, _, weights = _rasterize(
        scene, cam, np.zeros((len(scene), 3)), collect_weights=True
    )
    return weights


# --- loss ---------------------------------------------------------------------


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _filter2(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    return ndimage.correlate(img, window, mode="constant", cval=0.0)


def compute_loss(
    rendered: np.ndarray, gt: np.ndarray, cfg: LossConfig = LossConfig()
) -> tuple[float, np.ndarray]:
    """(1-lambda)*L1 + lambda*(1-SSIM)/2 with its analytic pixel gradient.

    SSIM uses a Gaussian window per channel (zero padding at borders), the
    mean is taken over all pixels and channels, and the gradient follows the
    closed form of the windowed statistics.
    """
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"frame shapes differ or malformed: {x.shape} vs {y.shape}")
    h, w, c = x.shape
    total = h * w * c

    diff = x - y
    l1 = float(np.abs(diff).mean())
    grad_l1 = np.sign(diff) / total

    lam = cfg.lam
    if lam == 0.0:
        return l1, (1.0 - lam) * grad_l1

    win = _gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    ssim_sum = 0.0
    grad_ssim = np.zeros_like(x)
    for ch in range(c):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mu_x = _filter2(xc, win)
        mu_y = _filter2(yc, win)
        var_x = _filter2(xc * xc, win) - mu_x * mu_x
        var_y = _filter2(yc * yc, win) - mu_y * mu_y
        cov = _filter2(xc * yc, win) - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + c1
        a2 = 2.0 * cov + c2
        b1 = mu_x * mu_x + mu_y * mu_y + c1
        b2 = var_x + var_y + c2
        ssim_map = (a1 * a2) / (b1 * b2)
        ssim_sum += float(ssim_map.mean())
        # d ssim(p) / d x(q) = win(p-q) * (E(p) + F(p) y(q) + G(p) x(q));
        # summing over p is one more correlation with the (symmetric) window.
        bb = b1 * b2
        e_field = 2.0 * mu_y * (a2 - a1) / bb + 2.0 * a1 * a2 * mu_x * (
            1.0 / (b1 * b2 * b2) - 1.0 / (b1 * b1 * b2)
        )
        f_field = 2.0 * a1 / bb
        g_field = -2.0 * a1 * a2 / (b1 * b2 * b2)
        grad_ssim[:, :, ch] = (
            _filter2(e_field, win) + yc * _filter2(f_field, win) + xc * _filter2(g_field, win)
        ) / total

    ssim = ssim_sum / c
    loss = (1.0 - lam) * l1 + lam * (1.0 - ssim) / 2.0
    grad = (1.0 - lam) * grad_l1 - (lam / 2.0) * grad_ssim
    return float(loss), grad


# --- optimization ---------------------------------------------------------------


@dataclass
class TrainingView:
    camera: CameraPose
    gt_object: np.ndarray | None = None  # (H, W, 3)
    gt_part: np.ndarray | None = None


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    def update(self, params, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step += 1
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad * grad
        m_hat = self.m / (1 - beta1**self.step)
        v_hat = self.v / (1 - beta2**self.step)
        return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def optimize_features(
    scene: GaussianScene,
    views: list[TrainingView],
    cfg: LossConfig = LossConfig(),
    iterations: int = 2000,
    step: float = 0.02,
    step_decay: float = 0.01,
) -> GaussianScene:
    """Fit both feature channels to per-view ground truth; geometry is frozen.

    Views are visited round-robin, one per iteration. Adam with an
    exponentially decaying step (step -> step * step_decay across the run)
    keeps the L1 plateau from oscillating at the end.
    """
    if not views:
        raise ValueError("no training views")
    if iterations < 0:
        raise ValueError("negative iteration count")
    feats = {
        "object": np.array(scene.features_obj, dtype=np.float64),
        "part": np.array(scene.features_part, dtype=np.float64),
    }
    if iterations == 0:
        return replace(scene, features_obj=feats["object"], features_part=feats["part"])

    weights = [compute_blend_weights(scene, v.camera) for v in views]
    gts = [
        {"object": v.gt_object, "part": v.gt_part}
        for v in views
    ]
    adam = {
        level: _AdamState(m=np.zeros_like(f), v=np.zeros_like(f))
        for level, f in feats.items()
    }
    for it in range(iterations):
        vi = it % len(views)
        cam = views[vi].camera
        lr = step * step_decay ** (it / max(1, iterations - 1))
        for level in ("object", "part"):
            gt = gts[vi][level]
            if gt is None:
                continue
            rendered = (weights[vi] @ feats[level]).reshape(cam.height, cam.width, 3)
            _, grad_pix = compute_loss(rendered, gt, cfg)
            grad_feat = weights[vi].T @ grad_pix.reshape(-1, 3)
            feats[level] = adam[level].update(feats[level], grad_feat, lr)
    return replace(scene, features_obj=feats["object"], features_part=feats["part"])


# --- scene files -----------------------------------------------------------------
#
# Layout (little-endian):
#   magic "SSCN" | u16 version | u32 count
#   per gaussian: 3 x f32 mean | 3 x f32 scale | 4 x f32 quat (w,x,y,z)
#                 | f32 opacity | 3 x f32 object feature | 3 x f32 part feature


def save_scene(scene: GaussianScene, path: str | Path) -> None:
    n = len(scene)
    out = bytearray()
    out += _SCENE_MAGIC
    out += struct.pack("<HI", _SCENE_VERSION, n)
    packed = np.concatenate(
        [
            scene.means,
            scene.scales,
            scene.rotations,
            scene.opacities[:, None],
            scene.features_obj,
            scene.features_part,
        ],
        axis=1,
    ).astype("<f4")
    out += packed.tobytes()
    Path(path).write_bytes(bytes(out))


def load_scene(path: str | Path) -> GaussianScene:
    raw = Path(path).read_bytes()
    if raw[:4] != _SCENE_MAGIC:
        raise ValueError("not a scene file (bad magic)")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != _SCENE_VERSION:
        raise ValueError(f"unsupported scene file version {version}")
    data = np.frombuffer(raw, dtype="<f4", offset=10).reshape(n, 17).astype(np.float64)
    scene = GaussianScene(
        means=data[:, 0:3].copy(),
        scales=data[:, 3:6].copy(),
        rotations=data[:, 6:10].copy(),
        opacities=data[:, 10].copy(),
        features_obj=data[:, 11:14].copy(),
        features_part=data[:, 14:17].copy(),
    )
    # Stored quaternions are float32; renormalize to satisfy the unit invariant.
    norms = np.linalg.norm(scene.rotations, axis=1, keepdims=True)
    scene.rotations = scene.rotations / norms
    scene.validate()
    return scene


def import_ply(path: str | Path) -> GaussianScene:
    """Import geometry from a standard splatting point-cloud PLY export.

    Reads x/y/z, scale_0..2 (log-space), rot_0..3, opacity (logit-space);
    feature channels initialize to zero.
    """
    raw = Path(path).read_bytes()
    header_end = raw.find(b"end_header\n")
    if header_end < 0:
        raise ValueError("not a PLY file (no end_header)")
    header = raw[:header_end].decode("ascii").splitlines()
    body = raw[header_end + len(b"end_header\n") :]

    fmt = None
    count = 0
    names: list[str] = []
    types: list[str] = []
    in_vertex = False
    type_map = {
        "float": "<f4",
        "float32": "<f4",
        "double": "<f8",
        "float64": "<f8",
        "uchar": "u1",
        "uint8": "u1",
        "int": "<i4",
        "int32": "<i4",
    }
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            types.append(parts[1])
            names.append(parts[2])
    if fmt != "binary_little_endian":
        raise ValueError(f"unsupported PLY format {fmt!r}")
    dtype = np.dtype([(n, type_map[t]) for n, t in zip(names, types)])
    data = np.frombuffer(body, dtype=dtype, count=count)

    def col(name):
        if name not in names:
            raise ValueError(f"PLY is missing property {name!r}")
        return data[name].astype(np.float64)

    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    scales = np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1))
    rots = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    rots = rots / np.linalg.norm(rots, axis=1, keepdims=True)
    opac = 1.0 / (1.0 + np.exp(-col("opacity")))
    n = means.shape[0]
    scene = GaussianScene(
        means=means,
        scales=scales,
        rotations=rots,
        opacities=opac,
        features_obj=np.zeros((n, 3)),
        features_part=np.zeros((n, 3)),
    )
    scene.validate()
    return scene

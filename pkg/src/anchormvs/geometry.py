"""Pinhole cameras, pose algebra and depth hypotheses.

Conventions
-----------
* Camera frame: x right, y down, z forward.
* ``Pose`` is camera-to-world: ``X_world = R @ X_cam + C`` where ``C`` is
  the camera center.
* Pixel-center convention: integer pixel (col i, row j) samples the
  continuous coordinate (i + 0.5, j + 0.5).  ``cx``/``cy`` are continuous.
* Everything is float64.  Functions broadcast over leading axes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside "
                                f"{self.width}x{self.height} image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the image downsampled by an integer ``factor``."""
        if self.width % factor or self.height % factor:
            raise GeometryError(f"{self.width}x{self.height} not divisible by {factor}")
        return Intrinsics(self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor,
                          self.width // factor, self.height // factor)

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def check(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
            raise GeometryError("rotation is not a proper orthonormal matrix")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (np.abs(self.rotation - other.rotation).max() <= tol
                and np.abs(self.translation - other.translation).max() <= tol)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Pose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CameraView:
    intrinsics: Intrinsics
    pose: Pose
    image: np.ndarray
    timestamp_index: int = 0

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        k = self.intrinsics
        if img.shape != (k.height, k.width, 3):
            raise GeometryError(f"image shape {img.shape} does not match intrinsics "
                                f"{k.height}x{k.width}x3")
        object.__setattr__(self, "image", img)


@dataclass(frozen=True, eq=False)
class DepthHypothesisSet:
    d_min: float
    d_max: float
    count: int
    values: np.ndarray

    @property
    def log_values(self) -> np.ndarray:
        return np.log(self.values)

    def normalized_log(self) -> np.ndarray:
        """log d_k rescaled to [0, 1] over the volume bounds."""
        return (np.log(self.values) - math.log(self.d_min)) / math.log(self.d_max / self.d_min)

    def nearest_bin(self, depth) -> np.ndarray:
        """Index of the hypothesis closest to ``depth`` in log space."""
        d = np.asarray(depth, dtype=np.float64)
        return np.abs(np.log(d)[..., None] - self.log_values).argmin(axis=-1)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.eye(3)
    k = skew(axis / n)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``center`` looking toward ``target``."""
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise GeometryError("look_at: up vector parallel to viewing direction")
    x /= nx
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), c)


def random_pose(rng: np.random.Generator, max_translation: float = 2.0) -> Pose:
    """Uniform random rotation (via a normalized quaternion) and translation."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Pose(r, rng.uniform(-max_translation, max_translation, 3))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def pixel_rays_camera(u, v, intrinsics: Intrinsics) -> np.ndarray:
    """Camera-frame rays ``K^-1 [u, v, 1]`` (z = 1) for continuous pixels."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u - intrinsics.cx) / intrinsics.fx
    y = (v - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def backproject(pixel, depth, view: CameraView | tuple[Intrinsics, Pose]) -> np.ndarray:
    """World point whose camera-frame depth (z) at ``pixel`` is ``depth``.

    ``pixel`` is (..., 2) continuous (u, v).  Raises on non-positive depth.
    """
    intr, pose = _unpack(view)
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise GeometryError("backproject requires positive depth")
    cam = pixel_rays_camera(pixel[..., 0], pixel[..., 1], intr) * depth[..., None]
    return pose.apply(cam)


def project(points, view: CameraView | tuple[Intrinsics, Pose]):
    """Project world points; returns ``(u, v, z, valid)``.

    ``valid`` is false when the camera-frame depth is not positive or the
    pixel falls outside ``[0, width) x [0, height)``.
    """
    intr, pose = _unpack(view)
    pts = np.asarray(points, dtype=np.float64)
    cam = (pts - pose.translation) @ pose.rotation
    z = cam[..., 2]
    front = z > 0
    safe = np.where(front, z, 1.0)
    u = intr.fx * cam[..., 0] / safe + intr.cx
    v = intr.fy * cam[..., 1] / safe + intr.cy
    valid = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return u, v, z, valid


def camera_ray(pixel, view: CameraView | tuple[Intrinsics, Pose]):
    """World-frame ray ``(origin, unit direction)`` through ``pixel``."""
    intr, pose = _unpack(view)
    pixel = np.asarray(pixel, dtype=np.float64)
    d = pixel_rays_camera(pixel[..., 0], pixel[..., 1], intr) @ pose.rotation.T
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    origin = np.broadcast_to(pose.translation, d.shape).copy()
    return origin, d


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform taking frame-``a`` coordinates to frame-``b`` coordinates."""
    return b.inverse().compose(a)


def make_hypotheses(d_min: float, d_max: float, count: int = 64) -> DepthHypothesisSet:
    if not (0 < d_min < d_max):
        raise GeometryError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    if count < 2:
        raise GeometryError(f"need at least 2 hypotheses, got {count}")
    lo, span = math.log(d_min), math.log(d_max / d_min)
    values = np.exp(lo + np.arange(count) / (count - 1) * span)
    values[0], values[-1] = d_min, d_max
    values.setflags(write=False)
    return DepthHypothesisSet(float(d_min), float(d_max), int(count), values)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(height, width, 2) continuous pixel-center coordinates."""
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([u, v], axis=-1)


def depth_to_points(depth: np.ndarray, intrinsics: Intrinsics, pose: Pose | None = None) -> np.ndarray:
    """Back-project a full depth map (no positivity check) to (H, W, 3)."""
    grid = pixel_grid(intrinsics.width, intrinsics.height)
    cam = pixel_rays_camera(grid[..., 0], grid[..., 1], intrinsics) * np.asarray(depth)[..., None]
    return cam if pose is None else pose.apply(cam)


def _unpack(view) -> tuple[Intrinsics, Pose]:
    if isinstance(view, CameraView):
        return view.intrinsics, view.pose
    intr, pose = view
    return intr, pose


# ---------------------------------------------------------------------------
# camera files
# ---------------------------------------------------------------------------

def camera_to_dict(intrinsics: Intrinsics, pose: Pose) -> dict:
    return {
        "fx": intrinsics.fx, "fy": intrinsics.fy, "cx": intrinsics.cx, "cy": intrinsics.cy,
        "width": intrinsics.width, "height": intrinsics.height,
        "rotation": [float(x) for x in pose.rotation.ravel()],
        "translation": [float(x) for x in pose.translation],
    }


def camera_from_dict(d: dict, source: str = "<camera>") -> tuple[Intrinsics, Pose]:
    required = ("fx", "fy", "cx", "cy", "width", "height", "rotation", "translation")
    missing = [k for k in required if k not in d]
    if missing:
        raise GeometryError(f"{source}: missing camera keys {missing}")
    if len(d["rotation"]) != 9 or len(d["translation"]) != 3:
        raise GeometryError(f"{source}: rotation needs 9 reals and translation 3")
    intr = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      int(d["width"]), int(d["height"]))
    pose = Pose(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), np.array(d["translation"]))
    return intr, pose


def write_cameras(path, cameras: list[tuple[Intrinsics, Pose]]) -> None:
    payload = [camera_to_dict(i, p) for i, p in cameras]
    Path(path).write_text(json.dumps(payload if len(payload) != 1 else payload[0], indent=1))


def read_cameras(path) -> list[tuple[Intrinsics, Pose]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"camera file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GeometryError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    items = data if isinstance(data, list) else [data]
    return [camera_from_dict(d, str(path)) for d in items]

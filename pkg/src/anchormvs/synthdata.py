"""Procedural textured scenes with exact depth, and sequence file I/O.

Scenes are ray cast analytically against planes, boxes and spheres.  Every
primitive carries a 3D value-noise texture evaluated at the hit point, so
images are multi-view consistent by construction.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image

from .geometry import (
    CameraView, GeometryError, Intrinsics, Pose, camera_to_dict, look_at,
    pixel_grid, read_cameras, write_cameras,
)
from .objectives import DepthMap
from .pfm import read_pfm, write_pfm
from .prompt import PromptCorruption, SparsePrompt, synthesize_prompt

log = logging.getLogger(__name__)

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays."""
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _lattice(ix, iy, iz, seed: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = _mix(ix.astype(np.int64).view(np.uint64) + np.uint64(0x9E3779B97F4A7C15) * np.uint64(seed + 1))
        h = _mix(h ^ iy.astype(np.int64).view(np.uint64))
        h = _mix(h ^ iz.astype(np.int64).view(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, frequency: float, seed: int, octaves: int = 3) -> np.ndarray:
    """Smooth fractal value noise in [0, 1] at 3D points (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    out = np.zeros(p.shape[:-1])
    amp_total = 0.0
    for o in range(octaves):
        q = p * (frequency * 2.0 ** o)
        i0 = np.floor(q)
        f = q - i0
        f = f * f * (3.0 - 2.0 * f)
        i0 = i0.astype(np.int64)
        acc = 0.0
        for dx in (0, 1):
            wx = f[..., 0] if dx else 1.0 - f[..., 0]
            for dy in (0, 1):
                wy = f[..., 1] if dy else 1.0 - f[..., 1]
                for dz in (0, 1):
                    wz = f[..., 2] if dz else 1.0 - f[..., 2]
                    acc = acc + wx * wy * wz * _lattice(i0[..., 0] + dx, i0[..., 1] + dy,
                                                        i0[..., 2] + dz, seed * 131 + o)
        amp = 0.5 ** o
        out += amp * acc
        amp_total += amp
    return out / amp_total


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Texture:
    seed: int = 0
    frequency: float = 2.0
    octaves: int = 3
    base: tuple[float, float, float] = (0.8, 0.8, 0.8)

    def color(self, points: np.ndarray) -> np.ndarray:
        chans = [value_noise(points, self.frequency, self.seed * 3 + c, self.octaves) for c in range(3)]
        n = np.stack(chans, axis=-1)
        return np.clip(np.asarray(self.base) * (0.15 + 0.85 * n), 0.0, 1.0)


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    texture: Texture = Texture()
    half_extent: tuple[float, float] | None = None

    kind = "plane"

    def _basis(self):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        a = np.cross(helper, n)
        a /= np.linalg.norm(a)
        return n, a, np.cross(n, a)

    def intersect(self, origin, dirs):
        n, a, b = self._basis()
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - origin) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        if self.half_extent is not None:
            hit = origin + t[:, None] * dirs - np.asarray(self.point)
            with np.errstate(invalid="ignore"):
                inside = (np.abs(hit @ a) <= self.half_extent[0]) & (np.abs(hit @ b) <= self.half_extent[1])
            t = np.where(inside, t, np.inf)
        return np.where(t > 1e-9, t, np.inf)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture = Texture()

    kind = "sphere"

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - root) / (2 * a)
        t1 = (-b + root) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_size: tuple[float, float, float]
    yaw: float = 0.0
    texture: Texture = Texture()

    kind = "box"

    def intersect(self, origin, dirs):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        o = (origin - np.asarray(self.center)) @ rot
        d = dirs @ rot
        hs = np.asarray(self.half_size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-hs - o) * inv
            t2 = (hs - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)


Primitive = Union[Plane, Sphere, Box]


def primitive_to_dict(p: Primitive) -> dict:
    d = asdict(p)
    d["kind"] = p.kind
    return d


def primitive_from_dict(d: dict) -> Primitive:
    d = dict(d)
    kind = d.pop("kind")
    d["texture"] = Texture(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["texture"].items()})
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return {"plane": Plane, "sphere": Sphere, "box": Box}[kind](**d)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def trajectory(kind: str, frames: int, *, start=(0.0, 0.0, 0.0), direction=(1.0, 0.0, 0.0),
               step: float = 0.1, rotation=None, target=(0.0, 0.0, 6.0), radius: float = 1.0,
               revolution: int | None = None, epsilon: float = 1e-3) -> list[Pose]:
    """Parametric camera paths.

    ``translate`` moves by exactly ``step`` meters per frame along
    ``direction``; ``orbit`` circles ``target`` in the horizontal plane with
    ``revolution`` frames per full turn; ``static`` repeats one pose;
    ``low_parallax`` translates with total baseline below ``epsilon``.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rot = np.eye(3) if rotation is None else np.asarray(rotation, float)
    start = np.asarray(start, float)
    if kind == "static":
        return [Pose(rot, start) for _ in range(frames)]
    if kind in ("translate", "low_parallax"):
        d = np.asarray(direction, float)
        d = d / np.linalg.norm(d)
        if kind == "low_parallax":
            step = 0.5 * epsilon / max(frames - 1, 1)
        return [Pose(rot, start + t * step * d) for t in range(frames)]
    if kind == "orbit":
        rev = revolution or frames
        tgt = np.asarray(target, float)
        poses = []
        for t in range(frames):
            a = 2.0 * math.pi * t / rev
            center = tgt + radius * np.array([math.sin(a), 0.0, -math.cos(a)])
            center[1] = start[1]
            poses.append(look_at(center, tgt))
        return poses
    raise ValueError(f"unknown trajectory kind {kind!r}")


# ---------------------------------------------------------------------------
# scenes and rendering
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    primitives: list
    intrinsics: Intrinsics
    poses: list                       # per frame: list of Pose (one per rig view)
    d_min: float = 1.0
    d_max: float = 100.0
    num_sources: int = 4              # temporal neighbors -1, +1, -2, +2
    corruption: PromptCorruption = field(default_factory=PromptCorruption.identity)
    seed: int = 0
    name: str = "scene"
    min_texture_energy: float = 1e-3

    def __post_init__(self):
        self.poses = [[p] if isinstance(p, Pose) else list(p) for p in self.poses]
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")

    @property
    def frames(self) -> int:
        return len(self.poses)

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "d_min": self.d_min, "d_max": self.d_max,
                "num_sources": self.num_sources, "frames": self.frames,
                "intrinsics": camera_to_dict(self.intrinsics, Pose.identity()),
                "primitives": [primitive_to_dict(p) for p in self.primitives],
                "corruption": asdict(self.corruption),
                "poses": [[camera_to_dict(self.intrinsics, p) for p in views] for views in self.poses]}


@dataclass
class FrameBundle:
    reference: CameraView
    sources: list
    depth: DepthMap
    prompts: list                   # reference prompt first, then one per source
    source_depths: list = field(default_factory=list)
    index: int = 0
    source_ids: list = field(default_factory=list)

    @property
    def prompt(self) -> SparsePrompt:
        return self.prompts[0]


def cast(primitives: Sequence[Primitive], intrinsics: Intrinsics, pose: Pose):
    """Depth (camera z) and color of the nearest hit for every pixel."""
    h, w = intrinsics.height, intrinsics.width
    grid = pixel_grid(w, h).reshape(-1, 2)
    cam = np.stack([(grid[:, 0] - intrinsics.cx) / intrinsics.fx,
                    (grid[:, 1] - intrinsics.cy) / intrinsics.fy, np.ones(len(grid))], axis=1)
    dirs = cam @ pose.rotation.T
    origin = pose.translation
    ts = np.stack([p.intersect(origin, dirs) for p in primitives])
    which = np.argmin(ts, axis=0)
    t = ts[which, np.arange(ts.shape[1])]
    hit = np.isfinite(t)
    color = np.zeros((len(t), 3))
    pts = origin + np.where(hit, t, 0.0)[:, None] * dirs
    for i, p in enumerate(primitives):
        sel = hit & (which == i)
        if sel.any():
            color[sel] = p.texture.color(pts[sel])
    # camera rays have unit z, so the ray parameter is the camera-frame depth
    depth = np.where(hit, t, 0.0).reshape(h, w)
    return depth, color.reshape(h, w, 3), hit.reshape(h, w)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def texture_energy(image: np.ndarray, valid: np.ndarray) -> float:
    """Mean absolute intensity gradient over valid pixels."""
    g = image.mean(axis=-1)
    gx = np.abs(np.diff(g, axis=1))[:-1, :]
    gy = np.abs(np.diff(g, axis=0))[:, :-1]
    m = valid[:-1, :-1] & valid[1:, :-1] & valid[:-1, 1:]
    return float((gx + gy)[m].mean()) if m.any() else 0.0


def _prompt_seed(seed: int, t: int, v: int) -> int:
    return int(np.random.SeedSequence([seed, t, v]).generate_state(1)[0])


def _render_view(spec: SceneSpec, t: int, v: int):
    pose = spec.poses[t][v]
    depth, color, hit = cast(spec.primitives, spec.intrinsics, pose)
    if hit.any():
        lo, hi = depth[hit].min(), depth[hit].max()
        if lo < spec.d_min or hi > spec.d_max:
            raise GeometryError(f"frame {t} view {v}: depth range [{lo:.3f}, {hi:.3f}] "
                                f"outside [{spec.d_min}, {spec.d_max}]")
    view = CameraView(spec.intrinsics, pose, quantize(color), timestamp_index=t)
    gt = DepthMap(depth, hit)
    corr = replace(spec.corruption, seed=_prompt_seed(spec.seed, t, v),
                   d_min=spec.d_min, d_max=spec.d_max)
    return view, gt, synthesize_prompt(gt.values, view, corr)


def source_indices(t: int, frames: int, count: int) -> list[int]:
    """Temporal neighbors in order -1, +1, -2, +2, ... restricted to the sequence."""
    out = []
    for k in range(1, frames):
        for cand in (t - k, t + k):
            if 0 <= cand < frames and len(out) < count:
                out.append(cand)
    return out


def assemble(rendered, num_sources: int) -> list[FrameBundle]:
    """Build bundles from ``rendered[t][v] = (view, depth, prompt)``."""
    frames = len(rendered)
    bundles = []
    for t in range(frames):
        ids = [(t, v) for v in range(1, len(rendered[t]))]
        ids += [(s, 0) for s in source_indices(t, frames, max(num_sources - len(ids), 0))]
        ids = ids[:num_sources] if num_sources else ids
        ref_view, ref_depth, ref_prompt = rendered[t][0]
        bundles.append(FrameBundle(
            reference=ref_view,
            sources=[rendered[s][v][0] for s, v in ids],
            depth=ref_depth,
            prompts=[ref_prompt] + [rendered[s][v][2] for s, v in ids],
            source_depths=[rendered[s][v][1] for s, v in ids],
            index=t, source_ids=ids))
    return bundles


def reprompt(bundles: Sequence[FrameBundle], corruption: PromptCorruption, seed: int = 0,
             d_min: float = 1.0, d_max: float = 100.0) -> list[FrameBundle]:
    """Fresh prompts for every view from its ground-truth depth.

    Seeds derive from ``(seed, frame, view)`` as in :func:`render`, so a view
    shared between bundles receives one prompt.
    """
    cache: dict = {}

    def prompt(key, view, depth):
        if key not in cache:
            corr = replace(corruption, seed=_prompt_seed(seed, *key), d_min=d_min, d_max=d_max)
            cache[key] = synthesize_prompt(depth.values, view, corr)
        return cache[key]

    out = []
    for b in bundles:
        if len(b.source_depths) != len(b.sources) or len(b.source_ids) != len(b.sources):
            raise ValueError(f"frame {b.index}: source depths or ids missing; cannot re-prompt")
        prompts = [prompt((b.index, 0), b.reference, b.depth)]
        prompts += [prompt(tuple(k), v, d) for k, v, d in zip(b.source_ids, b.sources, b.source_depths)]
        out.append(replace(b, prompts=prompts))
    return out


def render(spec: SceneSpec, jobs: int = 1) -> list[FrameBundle]:
    """Render every frame and view, synthesize prompts and assemble bundles.

    The output does not depend on ``jobs``.
    """
    if not spec.primitives:
        raise ValueError("scene has no primitives")
    tasks = [(t, v) for t in range(spec.frames) for v in range(len(spec.poses[t]))]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(lambda tv: _render_view(spec, *tv), tasks))
    else:
        results = [_render_view(spec, *tv) for tv in tasks]
    it = iter(results)
    rendered = [[next(it) for _ in spec.poses[t]] for t in range(spec.frames)]
    view0, depth0, _ = rendered[0][0]
    energy = texture_energy(view0.image, depth0.valid)
    if energy < spec.min_texture_energy:
        raise ValueError(f"degenerate texture: energy {energy:.2e} below {spec.min_texture_energy:.0e}")
    return assemble(rendered, spec.num_sources)


# ---------------------------------------------------------------------------
# canned scenes
# ---------------------------------------------------------------------------

def plane_scene(width: int = 128, height: int = 96, depth: float = 7.75, frames: int = 3,
                baseline: float = 3.5, seed: int = 0, d_min: float = 1.0, d_max: float = 100.0,
                frequency: float = 3.0, octaves: int = 3, focal: float | None = None, **kw) -> SceneSpec:
    """One textured fronto-parallel plane under a sideways translation.

    The reference is the middle frame; with three frames its two neighbors
    sit ``baseline`` meters to either side.
    """
    f = focal or 0.9 * width
    intr = Intrinsics(f, f, width / 2, height / 2, width, height)
    plane = Plane((0.0, 0.0, depth), (0.0, 0.0, -1.0), Texture(seed, frequency, octaves))
    start = (-baseline * (frames - 1) / 2, 0.0, 0.0)
    poses = trajectory("translate", frames, start=start, step=baseline)
    return SceneSpec([plane], intr, poses, d_min, d_max, seed=seed, name="plane", **kw)


def default_scene(width: int = 64, height: int = 48, frames: int = 4, kind: str = "translate",
                  seed: int = 0, d_min: float = 1.0, d_max: float = 20.0, step: float = 0.15,
                  **kw) -> SceneSpec:
    """A back wall, a ground plane and a few boxes and spheres."""
    rng = np.random.default_rng(seed)
    f = 0.9 * width
    intr = Intrinsics(f, f, width / 2, height / 2, width, height)
    tex = lambda k, fr: Texture(seed * 16 + k, fr, 3, tuple(rng.uniform(0.5, 1.0, 3)))  # noqa: E731
    wall_z = float(rng.uniform(10.0, 14.0))
    prims: list = [Plane((0.0, 0.0, wall_z), (0.0, 0.0, -1.0), tex(0, 1.0)),
                   Plane((0.0, 1.4, 0.0), (0.0, -1.0, 0.0), tex(1, 1.5))]
    for k in range(2):
        c = (float(rng.uniform(-2.0, 2.0)), float(rng.uniform(0.4, 0.9)), float(rng.uniform(4.0, 8.0)))
        hs = tuple(float(x) for x in rng.uniform(0.3, 0.7, 3))
        prims.append(Box(c, hs, float(rng.uniform(-0.6, 0.6)), tex(2 + k, 2.5)))
    r = float(rng.uniform(0.5, 0.8))
    prims.append(Sphere((float(rng.uniform(-1.5, 1.5)), 1.4 - r, float(rng.uniform(3.5, 6.0))), r, tex(5, 3.0)))
    if kind == "orbit":
        poses = trajectory("orbit", frames, target=(0.0, 0.0, 6.0), radius=6.0, revolution=max(frames * 8, 8))
    elif kind == "static":
        poses = trajectory("static", frames)
    elif kind == "low_parallax":
        poses = trajectory("low_parallax", frames)
    else:
        start = (-step * (frames - 1) / 2, 0.0, 0.0)
        poses = trajectory("translate", frames, start=start, step=step)
    return SceneSpec(prims, intr, poses, d_min, d_max, seed=seed, name=f"scene{seed}", **kw)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _suffix(v: int) -> str:
    return "" if v == 0 else f"_{v:02d}"


def save_sequence(bundles: Sequence[FrameBundle], directory, spec: SceneSpec | None = None) -> Path:
    """Write one directory per frame plus ``seq.json``.

    Views are unique per (frame, rig view); sources are stored as references.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    views: dict[tuple[int, int], tuple] = {}
    for b in bundles:
        views[(b.index, 0)] = (b.reference, b.depth, b.prompts[0])
        for (t, v), sv, sd, sp in zip(b.source_ids, b.sources, b.source_depths, b.prompts[1:]):
            views.setdefault((t, v), (sv, sd, sp))
    frames = sorted({t for t, _ in views})
    for t in frames:
        fdir = root / f"frame_{t:04d}"
        fdir.mkdir(exist_ok=True)
        cams = []
        for v in sorted(v for tt, v in views if tt == t):
            view, depth, prompt = views[(t, v)]
            save_png(fdir / f"view_{v:02d}.png", view.image)
            write_pfm(fdir / f"depth{_suffix(v)}.pfm", np.where(depth.valid, depth.values, 0.0))
            write_pfm(fdir / f"prompt{_suffix(v)}.pfm", np.where(prompt.mask, prompt.depth, 0.0))
            cams.append((view.intrinsics, view.pose))
        write_cameras(fdir / "camera.json", cams)
    meta = {"frames": [{"index": b.index, "sources": [list(s) for s in b.source_ids]} for b in bundles],
            "scene": spec.to_dict() if spec is not None else None}
    if spec is not None:
        meta["d_min"], meta["d_max"] = spec.d_min, spec.d_max
    (root / "seq.json").write_text(json.dumps(meta, indent=1))
    return root


def _load_view(root: Path, t: int, v: int, cams_cache: dict):
    fdir = root / f"frame_{t:04d}"
    if t not in cams_cache:
        cams_cache[t] = read_cameras(fdir / "camera.json")
    intr, pose = cams_cache[t][v]
    image = load_png(fdir / f"view_{v:02d}.png")
    depth = read_pfm(fdir / f"depth{_suffix(v)}.pfm").astype(np.float64)
    prompt = read_pfm(fdir / f"prompt{_suffix(v)}.pfm").astype(np.float64)
    return (CameraView(intr, pose, image, timestamp_index=t), DepthMap(depth, depth > 0),
            SparsePrompt.from_depth(prompt))


def load_sequence(directory) -> list[FrameBundle]:
    root = Path(directory)
    meta_path = root / "seq.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"sequence metadata not found: {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{meta_path}: malformed JSON at byte offset {exc.pos}: {exc.msg}") from None
    cache: dict = {}
    loaded: dict = {}

    def get(t, v):
        if (t, v) not in loaded:
            loaded[(t, v)] = _load_view(root, t, v, cache)
        return loaded[(t, v)]

    bundles = []
    for fr in meta["frames"]:
        t = fr["index"]
        ids = [tuple(s) for s in fr["sources"]]
        ref = get(t, 0)
        srcs = [get(*s) for s in ids]
        bundles.append(FrameBundle(ref[0], [s[0] for s in srcs], ref[1], [ref[2]] + [s[2] for s in srcs],
                                   [s[1] for s in srcs], t, ids))
    return bundles


def sequence_bounds(directory) -> tuple[float, float] | None:
    meta = json.loads((Path(directory) / "seq.json").read_text())
    if "d_min" in meta:
        return float(meta["d_min"]), float(meta["d_max"])
    return None

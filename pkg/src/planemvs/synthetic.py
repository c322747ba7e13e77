"""Synthetic calibrated scenes rendered by ray-plane intersection.

Scenes are a handful of (optionally bounded) textured planes seen by a ring of
pinhole cameras looking at a common point. Rendering is exact: every pixel
takes the colour of the nearest plane hit along its ray, and the range to
that hit is the ground-truth depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigError, DegenerateGeometry
from .geometry import pixel_rays
from .scene_io import CameraView, GroundTruth, SceneBundle

WORLD_UP = np.array([0.0, 1.0, 0.0])
TEXTURES = ("checkerboard", "noise", "constant")


@dataclass
class PlaneSpec:
    """One planar surface.

    ``u_axis`` and the derived ``v_axis = normal x u_axis`` span texture
    coordinates centred on ``point``. ``extent`` gives half sizes along those
    axes (None for an unbounded plane). Inside ``flat_half`` the texture is
    replaced by ``flat_color``.
    """

    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    u_axis: tuple[float, float, float] | None = None
    extent: tuple[float, float] | None = None
    texture: str = "checkerboard"
    colors: tuple = ((0.1, 0.1, 0.1), (0.9, 0.9, 0.9))
    cell: float = 0.25
    scale: float = 0.25
    octaves: int = 4
    flat_half: tuple[float, float] | None = None
    flat_color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")

    def frame(self):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        if self.u_axis is None:
            helper = WORLD_UP if abs(n @ WORLD_UP) < 0.9 else np.array([1.0, 0.0, 0.0])
            u = np.cross(helper, n)
        else:
            u = np.asarray(self.u_axis, dtype=np.float64)
            u = u - (u @ n) * n
        u = u / np.linalg.norm(u)
        return n, u, np.cross(n, u)


@dataclass
class CameraRing:
    count: int = 2
    radius: float = 6.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    height: float = 0.0
    arc_deg: float = 30.0
    center_deg: float = 0.0


@dataclass
class SyntheticSpec:
    planes: list[PlaneSpec]
    cameras: CameraRing = field(default_factory=CameraRing)
    width: int = 160
    height: int = 120
    fx: float = 150.0
    fy: float | None = None
    noise_sigma: float = 0.0
    seed: int = 0
    depth_range: tuple[float, float] | None = None
    scene_size: float | None = None
    gt_spacing: float | None = None
    supersample: int = 3

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        try:
            planes = [PlaneSpec(**p) for p in data.pop("planes", [])]
            cams = CameraRing(**data.pop("cameras", {}))
            return cls(planes=planes, cameras=cams, **data)
        except TypeError as exc:
            raise ConfigError(f"invalid synthetic scene spec: {exc}") from exc

    @classmethod
    def from_toml(cls, path: str | Path) -> "SyntheticSpec":
        with open(path, "rb") as f:
            try:
                data = tomli.load(f)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: malformed TOML: {exc}") from exc
        return cls.from_dict(data)


def look_at_pose(center, target, up=WORLD_UP) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``center``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    down = -np.asarray(up, dtype=np.float64)
    x = np.cross(down, z)
    if np.linalg.norm(x) < 1e-9:
        raise DegenerateGeometry("viewing direction is parallel to the up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def ring_centers(ring: CameraRing) -> np.ndarray:
    if ring.count <= 0:
        raise ValueError("camera ring needs at least one camera")
    if ring.arc_deg >= 360.0:
        phis = ring.center_deg + np.arange(ring.count) * 360.0 / ring.count
    elif ring.count == 1:
        phis = np.array([ring.center_deg])
    else:
        phis = ring.center_deg + np.linspace(-ring.arc_deg / 2, ring.arc_deg / 2, ring.count)
    phis = np.deg2rad(phis)
    offs = np.stack([np.sin(phis), np.zeros_like(phis), -np.cos(phis)], axis=1) * ring.radius
    return np.asarray(ring.look_at, dtype=np.float64) + offs + np.array([0.0, ring.height, 0.0])


def _hash01(ix, iy, salt):
    """Deterministic lattice hash to [0, 1)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(salt) * np.uint64(0x165667B19E3779F9)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(a, b, scale, octaves=4, seed=0) -> np.ndarray:
    """Smooth fractal value noise in [0, 1] over plane coordinates."""
    total = np.zeros_like(a, dtype=np.float64)
    amp, norm = 1.0, 0.0
    for octave in range(octaves):
        freq = (2.0**octave) / scale
        x, y = a * freq, b * freq
        ix, iy = np.floor(x), np.floor(y)
        fx, fy = x - ix, y - iy
        fx = fx * fx * fx * (fx * (fx * 6 - 15) + 10)
        fy = fy * fy * fy * (fy * (fy * 6 - 15) + 10)
        ix = ix.astype(np.int64)
        iy = iy.astype(np.int64)
        salt = seed * 97 + octave
        v00 = _hash01(ix, iy, salt)
        v10 = _hash01(ix + 1, iy, salt)
        v01 = _hash01(ix, iy + 1, salt)
        v11 = _hash01(ix + 1, iy + 1, salt)
        top = v00 + fx * (v10 - v00)
        bot = v01 + fx * (v11 - v01)
        total += amp * (top + fy * (bot - top))
        norm += amp
        amp *= 0.5
    # stretch the octave average back towards the full range
    return np.clip((total / norm - 0.5) * 2.0 + 0.5, 0.0, 1.0)


def shade_plane(plane: PlaneSpec, a: np.ndarray, b: np.ndarray, seed: int) -> np.ndarray:
    colors = np.asarray(plane.colors, dtype=np.float64).reshape(-1, 3)
    if plane.texture == "constant":
        rgb = np.broadcast_to(colors[0], a.shape + (3,)).copy()
    elif plane.texture == "checkerboard":
        parity = (np.floor(a / plane.cell) + np.floor(b / plane.cell)).astype(np.int64) % 2
        rgb = colors[parity]
    else:
        v = value_noise(a, b, plane.scale, plane.octaves, seed)[..., None]
        rgb = colors[0] + v * (colors[1] - colors[0])
    if plane.flat_half is not None:
        fa, fb = plane.flat_half
        inside = (np.abs(a) <= fa) & (np.abs(b) <= fb)
        rgb[inside] = np.asarray(plane.flat_color, dtype=np.float64)
    return rgb


def _intersect(view: CameraView, planes: list[PlaneSpec], dirs: np.ndarray):
    """Nearest plane hit along world-frame unit ``dirs`` from the camera centre."""
    origin = view.center
    depth = np.full(dirs.shape[:-1], np.inf)
    index = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    coords = np.zeros(dirs.shape[:-1] + (2,))
    for k, plane in enumerate(planes):
        n, u, v = plane.frame()
        p0 = np.asarray(plane.point, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((p0 - origin) @ n) / denom
        ok = (np.abs(denom) > 1e-12) & (s > 0)
        hit = origin + s[..., None] * dirs
        a = (hit - p0) @ u
        b = (hit - p0) @ v
        if plane.extent is not None:
            ok &= (np.abs(a) <= plane.extent[0]) & (np.abs(b) <= plane.extent[1])
        closer = ok & (s < depth)
        depth[closer] = s[closer]
        index[closer] = k
        coords[closer, 0] = a[closer]
        coords[closer, 1] = b[closer]
    return depth, index, coords


def _shade(planes, index, coords, seed):
    rgb = np.zeros(index.shape + (3,))
    for k, plane in enumerate(planes):
        sel = index == k
        if sel.any():
            rgb[sel] = shade_plane(plane, coords[sel, 0], coords[sel, 1], seed + 1000 * k)
    return rgb


def render_view(view: CameraView, planes: list[PlaneSpec], seed: int = 0, supersample: int = 1):
    """Return ``(rgb, depth, plane_index)``; misses get depth 0 and index -1.

    Depth and index are those of the pixel-centre ray. Colours average an
    ``supersample`` x ``supersample`` grid of rays per pixel (box filter);
    rays that miss contribute black.
    """
    rot = view.rotation
    depth, index, coords = _intersect(view, planes, pixel_rays(view) @ rot)
    if supersample <= 1:
        rgb = _shade(planes, index, coords, seed)
    else:
        offs = (np.arange(supersample) + 0.5) / supersample - 0.5
        vv, uu = np.mgrid[0 : view.height, 0 : view.width].astype(np.float64)
        rgb = np.zeros(view.shape + (3,))
        for oy in offs:
            for ox in offs:
                homog = np.stack([uu + ox, vv + oy, np.ones_like(uu)], axis=-1) @ view.K_inv.T
                dirs = homog / np.linalg.norm(homog, axis=-1, keepdims=True)
                _, idx, crd = _intersect(view, planes, dirs @ rot)
                rgb += _shade(planes, idx, crd, seed)
        rgb /= supersample**2
    depth[index < 0] = 0.0
    return rgb, depth, index


def _voxel_downsample(points: np.ndarray, spacing: float) -> np.ndarray:
    keys = np.floor(points / spacing).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


def generate_synthetic_scene(spec: SyntheticSpec) -> tuple[SceneBundle, GroundTruth]:
    """Render every camera of ``spec`` and return the scene with exact ground truth."""
    if not spec.planes:
        raise DegenerateGeometry("synthetic scene has no planes")
    rng = np.random.default_rng(spec.seed)
    fy = spec.fy if spec.fy is not None else spec.fx
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    views, depths, all_points = [], {}, []
    for view_id, center in enumerate(ring_centers(spec.cameras)):
        R, t = look_at_pose(center, spec.cameras.look_at)
        cam = CameraView(view_id, spec.width, spec.height, spec.fx, fy, cx, cy, R, t)
        rgb, depth, index = render_view(cam, spec.planes, spec.seed, spec.supersample)
        if not (index >= 0).any():
            raise DegenerateGeometry(f"every ray of view {view_id} misses the scene")
        if spec.noise_sigma > 0:
            # same offset on all channels so the luma sees exactly N(0, sigma)
            rgb = np.clip(rgb + rng.normal(0.0, spec.noise_sigma, cam.shape)[..., None], 0.0, 1.0)
        views.append(CameraView(view_id, spec.width, spec.height, spec.fx, fy, cx, cy, R, t, rgb=rgb))
        depths[view_id] = depth.astype(np.float32)
        pts = pixel_rays(cam)[depth > 0] * depth[depth > 0, None]
        all_points.append((pts - t) @ R)

    points = np.concatenate(all_points)
    lo, hi = points.min(axis=0), points.max(axis=0)
    scene_size = spec.scene_size or float(np.linalg.norm(hi - lo))
    if spec.depth_range is not None:
        depth_range = tuple(float(x) for x in spec.depth_range)
    else:
        valid = np.concatenate([d[d > 0] for d in depths.values()])
        depth_range = (0.8 * float(valid.min()), 1.2 * float(valid.max()))
    spacing = spec.gt_spacing or scene_size / 400.0
    gt_points = _voxel_downsample(points, spacing)
    bundle = SceneBundle(views, depth_range, scene_size, metric=False)
    return bundle, GroundTruth(depths, gt_points)

import numpy as np
import pytest

from planemvs.scene_io import CameraView
from planemvs.synthetic import CameraRing, PlaneSpec, SyntheticSpec, generate_synthetic_scene


def make_view(view_id=0, width=64, height=48, f=60.0, R=None, t=None, rgb=None):
    R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
    t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64)
    if rgb is None:
        rgb = np.full((height, width, 3), 0.5)
    return CameraView(view_id, width, height, f, f, (width - 1) / 2, (height - 1) / 2, R, t, rgb=rgb)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def textured_plane_scene(count=4, width=96, height=72, texture="noise", normal=(0.2, 0.0, -1.0), **kw):
    plane = PlaneSpec(
        point=(0.0, 0.0, 0.0), normal=normal, texture=texture, scale=0.35, octaves=3,
        cell=0.25, colors=((0.2, 0.25, 0.3), (0.8, 0.75, 0.7)),
    )
    spec = SyntheticSpec(
        planes=[plane], cameras=CameraRing(count=count, radius=5.0, arc_deg=20.0),
        width=width, height=height, fx=float(width), **kw,
    )
    return generate_synthetic_scene(spec)


@pytest.fixture(scope="session")
def noise_scene():
    """Four views of a slanted value-noise plane with exact ground truth."""
    return textured_plane_scene()


@pytest.fixture(scope="session")
def wall_scene():
    """The packaged wall scene: textured border around a constant-coloured centre."""
    from importlib.resources import files

    return generate_synthetic_scene(SyntheticSpec.from_toml(files("planemvs") / "data" / "wall.toml"))


@pytest.fixture(scope="session")
def two_view_scene():
    return textured_plane_scene(count=2, width=80, height=60)


def plane_map(view, depth, world_normal):
    """Depth map with the camera-frame normal of a single world plane, facing the camera."""
    from planemvs.geometry import pixel_rays
    from planemvs.scene_io import DepthNormalMap

    n = view.rotation @ np.asarray(world_normal, dtype=np.float64)
    n /= np.linalg.norm(n)
    normal = np.broadcast_to(n, view.shape + (3,)).copy()
    flip = np.einsum("hwc,hwc->hw", normal, pixel_rays(view)) > 0
    normal[flip] *= -1
    return DepthNormalMap(np.where(np.isfinite(depth), depth, 0.0), normal)

"""Pinhole projection and plane-induced correspondences.

Depth throughout the package is the range along the unit pixel ray (distance
from the camera centre), not the z coordinate. A local plane is stored in the
reference camera frame as a unit normal plus the depth at an anchoring pixel;
its offset ``delta = n . X`` follows from those two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import BehindCamera, RayParallelToPlane
from .scene_io import CameraView

PARALLEL_EPS = 1e-9


@dataclass(frozen=True)
class LocalPlane:
    normal: np.ndarray
    depth: float
    pixel: tuple[float, float]

    def offset(self, view: CameraView) -> float:
        return float(self.depth * (self.normal @ pixel_ray(view, self.pixel)))


def pixel_ray(view: CameraView, pixel) -> np.ndarray:
    """Unit viewing ray of ``pixel`` in the camera frame."""
    u, v = pixel
    r = view.K_inv @ np.array([u, v, 1.0])
    return r / np.linalg.norm(r)


def pixel_rays(view: CameraView) -> np.ndarray:
    """(H, W, 3) unit rays for every pixel centre."""
    vv, uu = np.mgrid[0 : view.height, 0 : view.width].astype(np.float64)
    homog = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ view.K_inv.T
    return homog / np.linalg.norm(homog, axis=-1, keepdims=True)


def to_camera(view: CameraView, point) -> np.ndarray:
    return view.rotation @ np.asarray(point, dtype=np.float64) + view.translation


def to_world(view: CameraView, point_cam) -> np.ndarray:
    return view.rotation.T @ (np.asarray(point_cam, dtype=np.float64) - view.translation)


def unproject(view: CameraView, pixel, depth: float) -> np.ndarray:
    return to_world(view, depth * pixel_ray(view, pixel))


def project(view: CameraView, point) -> np.ndarray:
    xc = to_camera(view, point)
    if xc[2] <= 0:
        raise BehindCamera(f"point has depth {xc[2]:.3g} in view {view.view_id}")
    x = view.K @ xc
    return x[:2] / x[2]


def unproject_depth_map(view: CameraView, depth: np.ndarray) -> np.ndarray:
    """World points for every pixel; invalid (0) depths map to the camera centre."""
    cam = pixel_rays(view) * np.asarray(depth, dtype=np.float64)[..., None]
    return (cam - view.translation) @ view.rotation


def facing(normal, ray) -> np.ndarray:
    """Flip ``normal`` so it points back towards the camera along ``ray``."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    return -n if n @ ray > 0 else n


def make_local_plane(view: CameraView, pixel, depth: float, normal) -> LocalPlane:
    return LocalPlane(facing(normal, pixel_ray(view, pixel)), float(depth), (float(pixel[0]), float(pixel[1])))


def plane_from_point_normal(point, normal) -> tuple[np.ndarray, float]:
    """Plane ``{X : n . X = d}`` through ``point`` with unit normal ``n``."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    return n, float(n @ np.asarray(point, dtype=np.float64))


def plane_to_camera(view: CameraView, plane) -> tuple[np.ndarray, float]:
    n_w, d_w = plane
    n_c = view.rotation @ n_w
    return n_c, float(d_w + n_c @ view.translation)


def depth_of_plane_at_pixel(view: CameraView, plane, pixel) -> float:
    """Range from the camera to a plane along the ray of ``pixel``.

    ``plane`` is either a world-frame ``(n, d)`` pair or a :class:`LocalPlane`
    of this view.
    """
    ray = pixel_ray(view, pixel)
    if isinstance(plane, LocalPlane):
        n_c, delta = plane.normal, plane.offset(view)
    else:
        n_c, delta = plane_to_camera(view, plane)
    denom = float(n_c @ ray)
    if abs(denom) < PARALLEL_EPS:
        raise RayParallelToPlane(f"ray through {pixel} is parallel to the plane")
    return delta / denom


def relative_pose(ref: CameraView, src: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """``(R, t)`` with ``X_src = R @ X_ref + t`` for camera-frame points."""
    R = src.rotation @ ref.rotation.T
    return R, src.translation - R @ ref.translation


def plane_homography(ref: CameraView, src: CameraView, normal, delta: float) -> np.ndarray:
    R, t = relative_pose(ref, src)
    return src.K @ (R + np.outer(t, normal) / delta) @ ref.K_inv


def plane_induced_warp(ref: CameraView, src: CameraView, plane: LocalPlane, pixel=None) -> np.ndarray:
    """Map ``pixel`` (default: the plane's anchor) from ``ref`` into ``src``."""
    if pixel is None:
        pixel = plane.pixel
    H = plane_homography(ref, src, plane.normal, plane.offset(ref))
    x = H @ np.array([pixel[0], pixel[1], 1.0])
    if x[2] <= 0:
        raise BehindCamera(f"plane maps {pixel} behind source view {src.view_id}")
    return x[:2] / x[2]


# ---------------------------------------------------------------------------
# jitted helpers shared by the optimisation kernels


@nb.njit(cache=True, nogil=True)
def ray_nb(Kinv, u, v, out):
    x = Kinv[0, 0] * u + Kinv[0, 1] * v + Kinv[0, 2]
    y = Kinv[1, 0] * u + Kinv[1, 1] * v + Kinv[1, 2]
    z = Kinv[2, 0] * u + Kinv[2, 1] * v + Kinv[2, 2]
    norm = np.sqrt(x * x + y * y + z * z)
    out[0] = x / norm
    out[1] = y / norm
    out[2] = z / norm


@nb.njit(cache=True, nogil=True)
def homography_nb(Ks, R, t, Kr_inv, n, delta, out):
    """``out = Ks (R + t n^T / delta) Kr_inv``."""
    M = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            M[i, j] = R[i, j] + t[i] * n[j] / delta
    T = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            T[i, j] = M[i, 0] * Kr_inv[0, j] + M[i, 1] * Kr_inv[1, j] + M[i, 2] * Kr_inv[2, j]
    for i in range(3):
        for j in range(3):
            out[i, j] = Ks[i, 0] * T[0, j] + Ks[i, 1] * T[1, j] + Ks[i, 2] * T[2, j]

"""Bilateral weighted NCC, the photometric likelihood and geometric consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .geometry import LocalPlane, make_local_plane, plane_homography, relative_pose
from .scene_io import CameraView, DepthNormalMap

MIN_SAMPLES = 9
ZERO_VAR = 1e-12


@dataclass(frozen=True)
class MatchWindow:
    half_size: int = 5
    sigma_spatial: float = 3.0
    sigma_color: float = 0.12
    sigma_rho: float = 0.6

    def __post_init__(self):
        if self.half_size < 1:
            raise ValueError("half_size must be >= 1")
        if min(self.sigma_spatial, self.sigma_color, self.sigma_rho) <= 0:
            raise ValueError("window sigmas must be positive")

    def spatial_table(self) -> np.ndarray:
        h = self.half_size
        dy, dx = np.mgrid[-h : h + 1, -h : h + 1]
        return np.exp(-(dx**2 + dy**2) / (2.0 * self.sigma_spatial**2))

    @property
    def inv_two_sigma_color_sq(self) -> float:
        return 1.0 / (2.0 * self.sigma_color**2)


@nb.njit(cache=True, nogil=True)
def ref_window_nb(gray, px, py, half, spatial, inv2sc2, qx, qy, val, wts):
    """Fill the clipped reference window around (px, py); returns its size."""
    h, w = gray.shape
    gc = gray[py, px]
    n = 0
    for dy in range(-half, half + 1):
        y = py + dy
        if y < 0 or y >= h:
            continue
        for dx in range(-half, half + 1):
            x = px + dx
            if x < 0 or x >= w:
                continue
            g = gray[y, x]
            d = g - gc
            qx[n] = x
            qy[n] = y
            val[n] = g
            wts[n] = spatial[dy + half, dx + half] * math.exp(-d * d * inv2sc2)
            n += 1
    return n


@nb.njit(cache=True, nogil=True)
def bilinear_nb(img, x, y, w, h):
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    a = img[y0, x0]
    b = img[y0, x1]
    c = img[y1, x0]
    d = img[y1, x1]
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    return top + fy * (bot - top)


@nb.njit(cache=True, nogil=True)
def ncc_window_nb(n, qx, qy, val, wts, src, src_w, src_h, H):
    """Weighted NCC of a prepared reference window against its warp into ``src``.

    Returns -1 when more than half of the window falls outside the source or
    fewer than MIN_SAMPLES samples remain; 0 for zero-variance windows.
    """
    r0 = val[0]
    s0 = 0.0
    have_s0 = False
    sw = 0.0
    sr = 0.0
    ss = 0.0
    srr = 0.0
    sss = 0.0
    srs = 0.0
    n_ok = 0
    xmax = src_w - 1.0
    ymax = src_h - 1.0
    for i in range(n):
        x = qx[i]
        y = qy[i]
        hz = H[2, 0] * x + H[2, 1] * y + H[2, 2]
        if hz <= 0.0:
            continue
        sx = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / hz
        sy = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / hz
        if not (sx >= 0.0 and sx <= xmax and sy >= 0.0 and sy <= ymax):
            continue
        s = bilinear_nb(src, sx, sy, src_w, src_h)
        if not have_s0:
            s0 = s
            have_s0 = True
        # shifted sums keep constant windows at exactly zero variance
        r = val[i] - r0
        s = s - s0
        wt = wts[i]
        sw += wt
        sr += wt * r
        ss += wt * s
        srr += wt * r * r
        sss += wt * s * s
        srs += wt * r * s
        n_ok += 1
    if 2 * (n - n_ok) > n or n_ok < MIN_SAMPLES:
        return -1.0
    mr = sr / sw
    ms = ss / sw
    var_r = srr / sw - mr * mr
    var_s = sss / sw - ms * ms
    if var_r < ZERO_VAR or var_s < ZERO_VAR:
        return 0.0
    rho = (srs / sw - mr * ms) / math.sqrt(var_r * var_s)
    return min(1.0, max(-1.0, rho))


@nb.njit(cache=True, nogil=True)
def geometric_cost_nb(px, py, H, src_depth, src_w, src_h, Ks_inv, R, t, Kr, psi_max):
    """Forward-backward reprojection error through the source depth, in [0, 1]."""
    hz = H[2, 0] * px + H[2, 1] * py + H[2, 2]
    if hz <= 0.0:
        return 1.0
    sx = (H[0, 0] * px + H[0, 1] * py + H[0, 2]) / hz
    sy = (H[1, 0] * px + H[1, 1] * py + H[1, 2]) / hz
    ix = int(math.floor(sx + 0.5))
    iy = int(math.floor(sy + 0.5))
    if ix < 0 or iy < 0 or ix >= src_w or iy >= src_h:
        return 1.0
    d = src_depth[iy, ix]
    if d <= 0.0:
        return 1.0
    rx = Ks_inv[0, 0] * sx + Ks_inv[0, 1] * sy + Ks_inv[0, 2]
    ry = Ks_inv[1, 0] * sx + Ks_inv[1, 1] * sy + Ks_inv[1, 2]
    rz = Ks_inv[2, 0] * sx + Ks_inv[2, 1] * sy + Ks_inv[2, 2]
    scale = d / math.sqrt(rx * rx + ry * ry + rz * rz)
    xs0 = rx * scale - t[0]
    xs1 = ry * scale - t[1]
    xs2 = rz * scale - t[2]
    # X_ref = R^T (X_src - t)
    xr0 = R[0, 0] * xs0 + R[1, 0] * xs1 + R[2, 0] * xs2
    xr1 = R[0, 1] * xs0 + R[1, 1] * xs1 + R[2, 1] * xs2
    xr2 = R[0, 2] * xs0 + R[1, 2] * xs1 + R[2, 2] * xs2
    if xr2 <= 0.0:
        return 1.0
    u = (Kr[0, 0] * xr0 + Kr[0, 1] * xr1 + Kr[0, 2] * xr2) / xr2
    v = (Kr[1, 0] * xr0 + Kr[1, 1] * xr1 + Kr[1, 2] * xr2) / xr2
    err = math.sqrt((u - px) ** 2 + (v - py) ** 2)
    return min(err, psi_max) / psi_max


def bilateral_ncc(ref: CameraView, src: CameraView, pixel, plane: LocalPlane, win: MatchWindow = MatchWindow()) -> float:
    """Bilateral weighted NCC between the window at ``pixel`` and its plane-induced warp."""
    px, py = int(round(pixel[0])), int(round(pixel[1]))
    size = (2 * win.half_size + 1) ** 2
    qx, qy = np.empty(size), np.empty(size)
    val, wts = np.empty(size), np.empty(size)
    n = ref_window_nb(ref.gray, px, py, win.half_size, win.spatial_table(), win.inv_two_sigma_color_sq, qx, qy, val, wts)
    H = plane_homography(ref, src, plane.normal, plane.offset(ref))
    return float(ncc_window_nb(n, qx, qy, val, wts, src.gray, src.width, src.height, H))


def photo_density(rho, sigma_rho: float):
    return np.exp(-((1.0 - np.asarray(rho)) ** 2) / (2.0 * sigma_rho**2))


def photo_likelihood(rho, win: MatchWindow = MatchWindow()):
    """Return ``(density, cost)`` for a correlation value.

    ``density`` is the visible-branch likelihood up to its normaliser;
    ``cost`` is ``1 - rho``.
    """
    return photo_density(rho, win.sigma_rho), 1.0 - np.asarray(rho)


def geometric_cost(
    ref: CameraView,
    src: CameraView,
    ref_map: DepthNormalMap,
    src_map: DepthNormalMap,
    pixel,
    plane: LocalPlane | None = None,
    psi_max: float = 3.0,
) -> float:
    """Truncated forward-backward reprojection error normalised to [0, 1].

    When ``plane`` is None the hypothesis is read from ``ref_map`` at ``pixel``;
    missing depths on either side cost 1.
    """
    px, py = int(round(pixel[0])), int(round(pixel[1]))
    if plane is None:
        if not ref_map.mask[py, px]:
            return 1.0
        plane = make_local_plane(ref, (px, py), float(ref_map.depth[py, px]), ref_map.normal[py, px])
    R, t = relative_pose(ref, src)
    H = plane_homography(ref, src, plane.normal, plane.offset(ref))
    src_depth = src_map.depth.astype(np.float64)
    return float(geometric_cost_nb(float(px), float(py), H, src_depth, src.width, src.height, src.K_inv, R, t, ref.K, psi_max))

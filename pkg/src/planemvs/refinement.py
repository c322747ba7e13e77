"""Depth-map cleanup: speckle removal and gap filling by an approximate bilateral median."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .scene_io import DepthNormalMap, rgb_to_gray


@dataclass(frozen=True)
class SpeckleConfig:
    max_area_fraction: float = 1.0 / 5000.0
    continuity_fraction: float = 0.10

    def __post_init__(self):
        for name in ("max_area_fraction", "continuity_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True)
class FillConfig:
    window_radius: int = 7
    k_min: int = 5
    sigma_spatial: float = 3.0
    sigma_color: float = 0.12


@nb.njit(cache=True, nogil=True)
def _speckle_components(depth, thr):
    h, w = depth.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    sizes = np.zeros(h * w, dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    n_labels = 0
    for sy in range(h):
        for sx in range(w):
            if depth[sy, sx] <= 0.0 or labels[sy, sx] >= 0:
                continue
            labels[sy, sx] = n_labels
            top = 0
            stack[top] = sy * w + sx
            top += 1
            size = 0
            while top > 0:
                top -= 1
                idx = stack[top]
                y = idx // w
                x = idx - y * w
                size += 1
                d = depth[y, x]
                for k in range(4):
                    ny = y + (1 if k == 0 else -1 if k == 1 else 0)
                    nx = x + (1 if k == 2 else -1 if k == 3 else 0)
                    if ny < 0 or ny >= h or nx < 0 or nx >= w:
                        continue
                    nd = depth[ny, nx]
                    if nd <= 0.0 or labels[ny, nx] >= 0 or abs(nd - d) > thr:
                        continue
                    labels[ny, nx] = n_labels
                    stack[top] = ny * w + nx
                    top += 1
            sizes[n_labels] = size
            n_labels += 1
    return labels, sizes[:n_labels]


def speckle_filter(dmap: DepthNormalMap, cfg: SpeckleConfig, scene_size: float) -> DepthNormalMap:
    """Invalidate 4-connected depth blobs smaller than ``max_area_fraction`` of the image.

    Neighbouring pixels are connected when their depths differ by at most
    ``continuity_fraction * scene_size``. Surviving pixels are left untouched.
    """
    h, w = dmap.shape
    labels, sizes = _speckle_components(dmap.depth.astype(np.float64), cfg.continuity_fraction * scene_size)
    min_area = cfg.max_area_fraction * h * w
    small = np.append(sizes < min_area, False)  # label -1 indexes the trailing False
    drop = small[labels]
    out = dmap.copy()
    out.depth[drop] = 0.0
    out.normal[drop] = 0.0
    return out


@nb.njit(cache=True, nogil=True)
def _median_fill(depth, normal, gray, rays, radius, k_min, inv2ss, inv2sc):
    h, w = depth.shape
    out_d = depth.copy()
    out_n = normal.copy()
    size = (2 * radius + 1) ** 2
    nd = np.empty(size)
    nw = np.empty(size)
    nn = np.empty((size, 3))
    for y in range(h):
        for x in range(w):
            if depth[y, x] > 0.0:
                continue
            cnt = 0
            gc = gray[y, x]
            for dy in range(-radius, radius + 1):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                for dx in range(-radius, radius + 1):
                    xx = x + dx
                    if xx < 0 or xx >= w or depth[yy, xx] <= 0.0:
                        continue
                    dg = gray[yy, xx] - gc
                    nd[cnt] = depth[yy, xx]
                    nw[cnt] = math.exp(-(dx * dx + dy * dy) * inv2ss - dg * dg * inv2sc)
                    nn[cnt, 0] = normal[yy, xx, 0]
                    nn[cnt, 1] = normal[yy, xx, 1]
                    nn[cnt, 2] = normal[yy, xx, 2]
                    cnt += 1
            if cnt < k_min:
                continue
            lo = nd[0]
            hi = nd[0]
            for i in range(cnt):
                lo = min(lo, nd[i])
                hi = max(hi, nd[i])
            counts = np.zeros(3, dtype=np.int64)
            sums = np.zeros(3)
            bins = np.zeros(cnt, dtype=np.int64)
            span = hi - lo
            for i in range(cnt):
                b = 0
                if span > 0.0:
                    b = min(int((nd[i] - lo) / span * 3.0), 2)
                bins[i] = b
                counts[b] += 1
                sums[b] += nd[i]
            best = 0
            for b in range(1, 3):
                if counts[b] == 0:
                    continue
                if counts[b] > counts[best] or (
                    counts[b] == counts[best] and sums[b] / counts[b] < sums[best] / counts[best]
                ):
                    best = b
            sw = 0.0
            sd = 0.0
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            bmin = np.inf
            bmax = -np.inf
            for i in range(cnt):
                if bins[i] != best:
                    continue
                wt = nw[i]
                sw += wt
                sd += wt * nd[i]
                s0 += wt * nn[i, 0]
                s1 += wt * nn[i, 1]
                s2 += wt * nn[i, 2]
                bmin = min(bmin, nd[i])
                bmax = max(bmax, nd[i])
            if sw > 0.0:
                d = sd / sw
            else:
                d = 0.5 * (bmin + bmax)
            out_d[y, x] = min(max(d, bmin), bmax)
            norm = math.sqrt(s0 * s0 + s1 * s1 + s2 * s2)
            if norm > 1e-12:
                out_n[y, x, 0] = s0 / norm
                out_n[y, x, 1] = s1 / norm
                out_n[y, x, 2] = s2 / norm
            else:
                out_n[y, x, 0] = -rays[y, x, 0]
                out_n[y, x, 1] = -rays[y, x, 1]
                out_n[y, x, 2] = -rays[y, x, 2]
    return out_d, out_n


def median_fill(dmap: DepthNormalMap, rgb: np.ndarray, cfg: FillConfig = FillConfig(), rays: np.ndarray | None = None) -> DepthNormalMap:
    """Fill invalid pixels from the dominant bin of a 3-bin depth histogram of their neighbours.

    Single pass over a frozen snapshot; pixels with fewer than ``k_min`` valid
    neighbours stay invalid. ``rays`` (H, W, 3) supplies a fallback normal for
    neighbourhoods whose normals are all zero.
    """
    gray = rgb_to_gray(rgb) if np.ndim(rgb) == 3 else np.asarray(rgb, dtype=np.float64)
    if rays is None:
        rays = np.zeros(dmap.shape + (3,))
        rays[..., 2] = 1.0
    d, n = _median_fill(
        dmap.depth.astype(np.float64), dmap.normal.astype(np.float64), gray, rays,
        cfg.window_radius, cfg.k_min,
        1.0 / (2.0 * cfg.sigma_spatial**2), 1.0 / (2.0 * cfg.sigma_color**2),
    )
    return DepthNormalMap(d, n)

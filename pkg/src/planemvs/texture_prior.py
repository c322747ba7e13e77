"""Textureness weighting and superpixel plane priors.

Flat, evenly coloured regions give the photometric score nothing to work
with. The tools here measure how textured each pixel is, fit a plane to the
reliable depth inside every superpixel, and turn those planes into extra
per-pixel depth/normal hypotheses for the PatchMatch sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from skimage.filters import sobel
from skimage.segmentation import watershed

from .geometry import PARALLEL_EPS, pixel_rays, plane_to_camera, unproject_depth_map
from .refinement import SpeckleConfig, speckle_filter
from .scene_io import CameraView, DepthNormalMap

EPS_VAR = 0.00005
T_MIN = 0.5


# ---------------------------------------------------------------------------
# textureness


@dataclass
class TexturenessMap:
    t: np.ndarray
    variance: np.ndarray
    eps_var: float = EPS_VAR
    t_min: float = T_MIN


def local_variance(gray: np.ndarray, size: int = 5) -> np.ndarray:
    """Population variance of the size x size window, clipped at the borders."""
    r = size // 2
    padded = np.pad(np.asarray(gray, dtype=np.float64), r, constant_values=np.nan)
    windows = sliding_window_view(padded, (size, size)).reshape(*np.shape(gray), -1)
    return np.nanvar(windows, axis=-1)


def textureness_from_variance(var, eps_var: float = EPS_VAR, t_min: float = T_MIN):
    var = np.asarray(var, dtype=np.float64)
    return (var + eps_var) / (var + eps_var / t_min)


# local std of one 8-bit grey level: below it a pixel is treated as flat
FIT_MIN_TEXTURENESS = float(textureness_from_variance((1.0 / 255.0) ** 2))


def compute_textureness(gray: np.ndarray, eps_var: float = EPS_VAR, t_min: float = T_MIN) -> TexturenessMap:
    var = local_variance(gray, 5)
    return TexturenessMap(textureness_from_variance(var, eps_var, t_min), var, eps_var, t_min)


def weights(t_x):
    """``(w_plus, w_minus)`` for a textureness value (scalar or array)."""
    t_x = np.asarray(t_x, dtype=np.float64)
    w_plus = 0.8 + 0.2 * t_x
    w_minus = 1.0 - 0.2 * t_x
    if w_plus.ndim == 0:
        return float(w_plus), float(w_minus)
    return w_plus, w_minus


# ---------------------------------------------------------------------------
# superpixels


@dataclass
class SuperpixelSegmentation:
    labels: np.ndarray
    histograms: np.ndarray  # (n_segments, bins**3), rows sum to 1
    adjacency: list[set[int]]
    level: str = "fine"

    @property
    def n_segments(self) -> int:
        return len(self.histograms)

    def pixels(self, k: int) -> np.ndarray:
        """Flat indices of the pixels of segment ``k``."""
        return np.flatnonzero(self.labels.ravel() == k)


def rgb_histograms(rgb: np.ndarray, labels: np.ndarray, n_segments: int, bins: int = 8) -> np.ndarray:
    q = np.clip((np.asarray(rgb) * bins).astype(np.int64), 0, bins - 1)
    code = (q[..., 0] * bins + q[..., 1]) * bins + q[..., 2]
    flat = labels.ravel() * bins**3 + code.ravel()
    hist = np.bincount(flat, minlength=n_segments * bins**3).reshape(n_segments, bins**3).astype(np.float64)
    return hist / np.maximum(hist.sum(axis=1, keepdims=True), 1.0)


def label_adjacency(labels: np.ndarray, n_segments: int) -> list[set[int]]:
    adj = [set() for _ in range(n_segments)]
    for a, b in (
        (labels[:, :-1], labels[:, 1:]),
        (labels[:-1, :], labels[1:, :]),
    ):
        diff = a != b
        pairs = np.unique(np.stack([a[diff], b[diff]], axis=1), axis=0)
        for i, j in pairs:
            adj[i].add(int(j))
            adj[j].add(int(i))
    return adj


def marker_grid(height: int, width: int, target_count: int) -> tuple[int, int]:
    """Rows and columns of a seed grid with about ``target_count`` roughly square cells."""
    best = None
    for cols in range(1, target_count + 1):
        rows = max(1, round(target_count / cols))
        aspect = abs(math.log((width / cols) / (height / rows)))
        score = abs(rows * cols - target_count) / target_count + 0.5 * aspect
        if best is None or score < best[0]:
            best = (score, rows, cols)
    return best[1], best[2]


def segment_superpixels(rgb: np.ndarray, target_count: int, level: str = "fine", bins: int = 8, compactness: float = 0.01) -> SuperpixelSegmentation:
    """Connected, boundary-respecting oversegmentation near ``target_count`` segments.

    Compact watershed of the colour gradient, flooded from a regular grid of
    seeds: every segment grows from one seed, so segments are connected and
    their number is fixed by the grid. ``compactness`` trades boundary
    adherence for regular shapes.
    """
    if target_count < 2:
        raise ValueError("target_count must be >= 2")
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w = rgb.shape[:2]
    rows, cols = marker_grid(h, w, target_count)
    markers = np.zeros((h, w), dtype=np.int64)
    ys = ((np.arange(rows) + 0.5) * h / rows).astype(np.int64)
    xs = ((np.arange(cols) + 0.5) * w / cols).astype(np.int64)
    markers[np.ix_(ys, xs)] = np.arange(1, rows * cols + 1).reshape(rows, cols)
    gradient = sum(sobel(rgb[..., c]) for c in range(rgb.shape[2]))
    labels = watershed(gradient, markers, connectivity=1, compactness=compactness) - 1
    n = rows * cols
    return SuperpixelSegmentation(
        labels, rgb_histograms(rgb, labels, n, bins), label_adjacency(labels, n), level
    )


def bhattacharyya_coefficient(h1: np.ndarray, h2: np.ndarray) -> float:
    return float(np.sum(np.sqrt(h1 * h2)))


# ---------------------------------------------------------------------------
# plane fitting


@dataclass
class RansacConfig:
    threshold: float = 0.10
    # "absolute", "scene_fraction", or "auto": absolute unless the scene is marked non-metric
    threshold_mode: str = "auto"
    threshold_fraction: float = 0.005
    max_iters: int = 1000
    confidence: float = 0.99

    def resolved(self, metric: bool) -> "RansacConfig":
        """Copy with ``auto`` replaced by the mode suited to a metric or non-metric scene."""
        if self.threshold_mode != "auto":
            return self
        return replace(self, threshold_mode="absolute" if metric else "scene_fraction")

    def absolute_threshold(self, scene_size: float) -> float:
        if self.threshold_mode in ("absolute", "auto"):
            return self.threshold
        if self.threshold_mode == "scene_fraction":
            return self.threshold_fraction * scene_size
        raise ValueError(f"unknown ransac threshold mode {self.threshold_mode!r}")


@dataclass
class PlanePrior:
    """World-frame plane ``n . X = offset`` or ABSENT (``normal is None``)."""

    normal: np.ndarray | None
    offset: float
    inlier_ratio: float
    support: int
    inliers: int = 0

    @property
    def present(self) -> bool:
        return self.normal is not None


def _fit_lsq(points: np.ndarray):
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    return n, float(n @ c)


def ransac_plane(points: np.ndarray, threshold: float, rng: np.random.Generator, max_iters: int = 1000, confidence: float = 0.99, batch: int = 64):
    """Fit ``n . X = d`` robustly; returns ``(n, d, inlier_mask)`` or None for < 3 points."""
    points = np.asarray(points, dtype=np.float64)
    N = len(points)
    if N < 3:
        return None
    best_count, best = -1, None
    needed, done = max_iters, 0
    while done < needed:
        b = min(batch, needed - done)
        idx = rng.integers(0, N, size=(b, 3))
        p0, p1, p2 = points[idx[:, 0]], points[idx[:, 1]], points[idx[:, 2]]
        normals = np.cross(p1 - p0, p2 - p0)
        norms = np.linalg.norm(normals, axis=1)
        ok = norms > 1e-12
        normals[ok] /= norms[ok, None]
        offsets = np.einsum("ij,ij->i", normals, p0)
        counts = (np.abs(points @ normals.T - offsets) <= threshold).sum(axis=0)
        counts[~ok] = -1
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best = int(counts[j]), (normals[j], offsets[j])
            ratio = best_count / N
            if ratio >= 1.0:
                needed = done + b
            elif ratio > 0:
                bound = math.log(1.0 - confidence) / math.log(1.0 - ratio**3)
                needed = min(max_iters, max(done + b, int(math.ceil(bound))))
        done += b
    if best_count <= 0:
        # every sample was degenerate (e.g. collinear points)
        return None
    n, d = best
    mask = np.abs(points @ n - d) <= threshold
    if mask.sum() >= 3:
        n2, d2 = _fit_lsq(points[mask])
        mask2 = np.abs(points @ n2 - d2) <= threshold
        if mask2.sum() >= mask.sum():
            n, d, mask = n2, d2, mask2
    return n, float(d), mask


def fit_superpixel_planes(
    seg: SuperpixelSegmentation,
    dmap: DepthNormalMap,
    view: CameraView,
    ransac: RansacConfig,
    scene_size: float,
    rng: np.random.Generator,
    world_points: np.ndarray | None = None,
) -> list[PlanePrior]:
    """RANSAC plane per superpixel over its valid (already speckle-filtered) depths."""
    threshold = ransac.absolute_threshold(scene_size)
    if world_points is None:
        world_points = unproject_depth_map(view, dmap.depth)
    pts = world_points.reshape(-1, 3)
    valid = dmap.mask.ravel()
    labels = seg.labels.ravel()
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(seg.n_segments + 1))
    priors = []
    for k in range(seg.n_segments):
        members = order[bounds[k] : bounds[k + 1]]
        members = members[valid[members]]
        support = len(members)
        fit = ransac_plane(pts[members], threshold, rng, ransac.max_iters, ransac.confidence) if support >= 3 else None
        if fit is None:
            priors.append(PlanePrior(None, 0.0, 0.0, support))
            continue
        n, d, mask = fit
        inl = int(mask.sum())
        priors.append(PlanePrior(n, d, inl / support, support, inl))
    return priors


# ---------------------------------------------------------------------------
# hypotheses


def neighbor_weights(seg: SuperpixelSegmentation, k: int, priors: list[PlanePrior], mode: str = "coefficient"):
    """Candidate neighbours of ``k`` with usable priors and their sampling weights.

    ``mode="coefficient"`` weights by histogram similarity (Bhattacharyya
    coefficient); ``mode="distance"`` by the Hellinger-form Bhattacharyya
    distance ``sqrt(1 - BC)``.
    """
    cand = sorted(j for j in seg.adjacency[k] if priors[j].present)
    bc = np.array([bhattacharyya_coefficient(seg.histograms[k], seg.histograms[j]) for j in cand])
    if mode == "coefficient":
        w = bc
    elif mode == "distance":
        w = np.sqrt(np.clip(1.0 - bc, 0.0, 1.0))
    else:
        raise ValueError(f"unknown neighbour weighting {mode!r}")
    return np.array(cand, dtype=np.int64), w


def choose_planes(
    seg: SuperpixelSegmentation,
    priors: list[PlanePrior],
    rng: np.random.Generator,
    mode: str = "coefficient",
) -> np.ndarray:
    """Per-pixel index of the prior to use, or -1 when there is none.

    A pixel of segment k keeps its own plane with probability r_k; otherwise
    it borrows a neighbour's plane, drawn proportionally to the neighbour
    weights (uniformly when those are all zero).
    """
    labels = seg.labels.ravel()
    choice = np.full(labels.shape, -1, dtype=np.int64)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(seg.n_segments + 1))
    for k in range(seg.n_segments):
        pix = order[bounds[k] : bounds[k + 1]]
        if len(pix) == 0:
            continue
        v = rng.random(len(pix))
        own = (v <= priors[k].inlier_ratio) & priors[k].present
        choice[pix[own]] = k
        rest = pix[~own]
        if len(rest) == 0:
            continue
        cand, w = neighbor_weights(seg, k, priors, mode)
        if len(cand) == 0:
            continue
        if w.sum() <= 0:
            w = np.ones(len(cand))
        cdf = np.cumsum(w) / w.sum()
        pick = np.searchsorted(cdf, rng.random(len(rest)), side="right")
        choice[rest] = cand[np.minimum(pick, len(cand) - 1)]
    return choice.reshape(seg.labels.shape)


def planes_to_pixels(
    view: CameraView,
    priors: list[PlanePrior],
    choice: np.ndarray,
    depth_range: tuple[float, float],
    rays: np.ndarray | None = None,
):
    """Evaluate the chosen world planes at every pixel.

    Returns ``(depth, normal)`` in the camera frame with depth 0 where no
    usable hypothesis exists (no plane, ray-parallel, or out of range).
    """
    if rays is None:
        rays = pixel_rays(view)
    h, w = choice.shape
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    present = [k for k, p in enumerate(priors) if p.present]
    if not present:
        return depth, normal
    nc = np.zeros((len(priors), 3))
    delta = np.zeros(len(priors))
    for k in present:
        nc[k], delta[k] = plane_to_camera(view, (priors[k].normal, priors[k].offset))
    has = choice >= 0
    k = choice[has]
    r = rays[has]
    n = nc[k]
    denom = np.einsum("ij,ij->i", n, r)
    ok = np.abs(denom) >= PARALLEL_EPS
    d = np.zeros_like(denom)
    d[ok] = delta[k][ok] / denom[ok]
    ok &= (d >= depth_range[0]) & (d <= depth_range[1])
    n = np.where((denom > 0)[:, None], -n, n)
    depth[has] = np.where(ok, d, 0.0)
    normal[has] = np.where(ok[:, None], n, 0.0)
    return depth, normal


def planar_hypothesis(pixel, seg: SuperpixelSegmentation, priors: list[PlanePrior], rng: np.random.Generator, view: CameraView, depth_range, mode: str = "coefficient"):
    """Single-pixel draw; returns ``(depth, camera_normal)`` or None."""
    from .geometry import make_local_plane

    px, py = int(round(pixel[0])), int(round(pixel[1]))
    k = int(seg.labels[py, px])
    if priors[k].present and rng.random() <= priors[k].inlier_ratio:
        j = k
    else:
        cand, w = neighbor_weights(seg, k, priors, mode)
        if len(cand) == 0:
            return None
        if w.sum() <= 0:
            w = np.ones(len(cand))
        j = int(rng.choice(cand, p=w / w.sum()))
    sel = np.full(seg.labels.shape, -1, dtype=np.int64)
    sel[py, px] = j
    rays = np.zeros(seg.labels.shape + (3,))
    from .geometry import pixel_ray

    rays[py, px] = pixel_ray(view, (px, py))
    d, n = planes_to_pixels(view, priors, sel, depth_range, rays)
    if d[py, px] <= 0:
        return None
    return make_local_plane(view, (px, py), d[py, px], n[py, px])


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class PriorConfig:
    fine_divisor: float = 20.0
    coarse_divisor: float = 30.0
    enable_fine: bool = True
    enable_coarse: bool = True
    hist_bins: int = 8
    neighbor_weighting: str = "coefficient"
    compactness: float = 0.01
    # plane fits only use pixels at least this textured (0 keeps every valid pixel)
    fit_min_textureness: float = FIT_MIN_TEXTURENESS
    ransac: RansacConfig = field(default_factory=RansacConfig)
    speckle: SpeckleConfig = field(default_factory=SpeckleConfig)


def segment_levels(rgb: np.ndarray, cfg: PriorConfig) -> dict[str, SuperpixelSegmentation]:
    width = rgb.shape[1]
    out = {}
    if cfg.enable_fine:
        out["fine"] = segment_superpixels(rgb, max(2, round(width / cfg.fine_divisor)), "fine", cfg.hist_bins, cfg.compactness)
    if cfg.enable_coarse:
        out["coarse"] = segment_superpixels(rgb, max(2, round(width / cfg.coarse_divisor)), "coarse", cfg.hist_bins, cfg.compactness)
    return out


@dataclass
class PlanarPriors:
    """Per-pixel planar hypotheses, one (depth, normal) layer per level."""

    depth: dict[str, np.ndarray]
    normal: dict[str, np.ndarray]
    planes: dict[str, list[PlanePrior]]


def build_planar_priors(
    view: CameraView,
    dmap: DepthNormalMap,
    cfg: PriorConfig,
    depth_range: tuple[float, float],
    scene_size: float,
    seed,
    segmentations: dict[str, SuperpixelSegmentation] | None = None,
    rays: np.ndarray | None = None,
    textureness: np.ndarray | None = None,
) -> PlanarPriors:
    """Speckle-filter ``dmap``, fit plane priors per superpixel and draw per-pixel hypotheses.

    ``seed`` is any SeedSequence entropy; each level draws from its own
    child stream so fine and coarse draws are independent.
    """
    if segmentations is None:
        segmentations = segment_levels(view.rgb, cfg)
    if rays is None:
        rays = pixel_rays(view)
    filtered = speckle_filter(dmap, cfg.speckle, scene_size)
    if cfg.fit_min_textureness > 0:
        if textureness is None:
            textureness = compute_textureness(view.gray).t
        filtered = DepthNormalMap(np.where(textureness >= cfg.fit_min_textureness, filtered.depth, 0.0), filtered.normal)
    world = unproject_depth_map(view, filtered.depth)
    out = PlanarPriors({}, {}, {})
    streams = np.random.SeedSequence(seed).spawn(2)
    for level, ss in zip(("fine", "coarse"), streams):
        seg = segmentations.get(level)
        if seg is None:
            continue
        rng = np.random.default_rng(ss)
        priors = fit_superpixel_planes(seg, filtered, view, cfg.ransac, scene_size, rng, world)
        choice = choose_planes(seg, priors, rng, cfg.neighbor_weighting)
        d, n = planes_to_pixels(view, priors, choice, depth_range, rays)
        out.depth[level], out.normal[level], out.planes[level] = d, n, priors
    return out

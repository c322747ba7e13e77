"""Greedy multi-view depth-map fusion and point-cloud / depth-map evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyCloud
from .geometry import pixel_rays
from .scene_io import CameraView, DepthNormalMap, PointCloud


@dataclass
class FusionConfig:
    max_reproj_error: float = 1.0
    max_depth_error: float = 0.01
    max_normal_error: float = 20.0
    min_consistent_views: int = 3

    def __post_init__(self):
        if min(self.max_reproj_error, self.max_depth_error, self.max_normal_error) <= 0:
            raise ValueError("fusion tolerances must be positive")
        if self.min_consistent_views < 2:
            raise ValueError("min_consistent_views must be >= 2")


@dataclass
class _ViewData:
    view: CameraView
    depth: np.ndarray
    points: np.ndarray  # (H, W, 3) world
    normals: np.ndarray  # (H, W, 3) world
    valid: np.ndarray


def _prepare(view: CameraView, dmap: DepthNormalMap) -> _ViewData:
    if dmap.shape != view.shape:
        raise DimensionMismatch(f"map of view {view.view_id} is {dmap.shape}, image is {view.shape}")
    depth = dmap.depth.astype(np.float64)
    cam = pixel_rays(view) * depth[..., None]
    points = (cam - view.translation) @ view.rotation
    normals = dmap.normal.astype(np.float64) @ view.rotation
    return _ViewData(view, depth, points, normals, depth > 0)


def fuse(
    maps: dict[int, DepthNormalMap],
    views: list[CameraView],
    cfg: FusionConfig = FusionConfig(),
    return_consumed: bool = False,
):
    """Fuse per-view depth/normal maps into one cloud.

    Views are visited in ascending id order, so the result does not depend on
    the order of ``views``. Every valid, not yet consumed pixel of the current
    view is checked against all other views: it is consistent with view ``s``
    when the depth stored at its projection in ``s`` reprojects back within
    ``max_reproj_error`` pixels, agrees in range within ``max_depth_error``
    (relative) and in normal within ``max_normal_error`` degrees. Pixels with
    at least ``min_consistent_views`` consistent views (the pixel's own view
    included) emit the mean point, renormalised mean normal and mean colour,
    and every contributing pixel is marked consumed. Pixels consumed earlier
    still count as evidence.

    Returns the cloud, or ``(cloud, consumed)`` with per-view boolean masks.
    """
    ordered = sorted((v for v in views if v.view_id in maps), key=lambda v: v.view_id)
    data = [_prepare(v, maps[v.view_id]) for v in ordered]
    consumed = {d.view.view_id: np.zeros(d.view.shape, dtype=bool) for d in data}
    cos_max = math.cos(math.radians(cfg.max_normal_error))
    out_p, out_n, out_c = [], [], []
    for r, ref in enumerate(data):
        cand = ref.valid & ~consumed[ref.view.view_id]
        ys, xs = np.nonzero(cand)
        if len(ys) == 0:
            continue
        X = ref.points[ys, xs]
        N = ref.normals[ys, xs]
        count = np.ones(len(ys), dtype=np.int64)
        sum_p = X.copy()
        sum_n = N.copy()
        sum_c = ref.view.rgb[ys, xs].astype(np.float64)
        hits = []
        for s, src in enumerate(data):
            if s == r:
                continue
            v = src.view
            xc = X @ v.rotation.T + v.translation
            front = xc[:, 2] > 0
            z = np.where(front, xc[:, 2], 1.0)
            proj = xc @ v.K.T
            u = np.floor(proj[:, 0] / z + 0.5).astype(np.int64)
            w = np.floor(proj[:, 1] / z + 0.5).astype(np.int64)
            inside = front & (u >= 0) & (u < v.width) & (w >= 0) & (w < v.height)
            u = np.where(inside, u, 0)
            w = np.where(inside, w, 0)
            ok = inside & src.valid[w, u]
            # range agreement along the source ray
            rng = np.linalg.norm(xc, axis=1)
            ds = src.depth[w, u]
            ok &= np.abs(ds - rng) <= cfg.max_depth_error * np.maximum(ds, 1e-12)
            # source point reprojected into the reference
            Y = src.points[w, u]
            yc = Y @ ref.view.rotation.T + ref.view.translation
            zc = np.where(yc[:, 2] > 0, yc[:, 2], 1.0)
            py = yc @ ref.view.K.T
            err = np.hypot(py[:, 0] / zc - xs, py[:, 1] / zc - ys)
            ok &= (yc[:, 2] > 0) & (err <= cfg.max_reproj_error)
            Ns = src.normals[w, u]
            ok &= np.einsum("ij,ij->i", N, Ns) >= cos_max
            count += ok
            sum_p[ok] += Y[ok]
            sum_n[ok] += Ns[ok]
            sum_c[ok] += v.rgb[w[ok], u[ok]]
            hits.append((v.view_id, ok, w, u))
        keep = count >= cfg.min_consistent_views
        if not keep.any():
            continue
        consumed[ref.view.view_id][ys[keep], xs[keep]] = True
        for vid, ok, w, u in hits:
            sel = ok & keep
            consumed[vid][w[sel], u[sel]] = True
        k = count[keep][:, None].astype(np.float64)
        mean_n = sum_n[keep] / k
        mean_n /= np.maximum(np.linalg.norm(mean_n, axis=1, keepdims=True), 1e-12)
        out_p.append(sum_p[keep] / k)
        out_n.append(mean_n)
        out_c.append(np.clip(np.round(sum_c[keep] / k * 255.0), 0, 255).astype(np.uint8))
    if out_p:
        cloud = PointCloud(np.concatenate(out_p), np.concatenate(out_n), np.concatenate(out_c))
    else:
        cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8))
    return (cloud, consumed) if return_consumed else cloud


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    taus: list[float]
    accuracy: list[float]
    completeness: list[float]
    f1: list[float]
    n_model: int = 0
    n_gt: int = 0
    depth_cdf: dict | None = None
    textureness_table: dict | None = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        return list(zip(self.taus, self.accuracy, self.completeness, self.f1))

    def to_tsv(self) -> str:
        lines = ["tau\taccuracy\tcompleteness\tf1"]
        lines += [f"{t!r}\t{a!r}\t{c!r}\t{f!r}" for t, a, c, f in self.rows()]
        return "\n".join(lines) + "\n"

    def write(self, tsv_path: str | Path, json_path: str | Path | None = None) -> None:
        Path(tsv_path).write_text(self.to_tsv())
        if json_path is not None:
            Path(json_path).write_text(json.dumps(asdict(self), indent=2))


def f1_score(accuracy: float, completeness: float) -> float:
    s = accuracy + completeness
    return 0.0 if s == 0 else 2.0 * accuracy * completeness / s


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Euclidean distance from every query point to its nearest reference point."""
    d, _ = cKDTree(reference).query(query, k=1)
    return d


def evaluate(cloud, gt_points, taus) -> EvalReport:
    """Accuracy, completeness and F1 (all in percent) for every threshold ``tau``.

    ``cloud`` and ``gt_points`` are PointClouds or (N, 3) arrays.
    """
    model = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    gt = np.asarray(getattr(gt_points, "points", gt_points), dtype=np.float64)
    if len(model) == 0 or len(gt) == 0:
        raise EmptyCloud("both the model and the ground-truth cloud must be non-empty")
    d_model = nearest_distances(model, gt)
    d_gt = nearest_distances(gt, model)
    taus = [float(t) for t in taus]
    acc = [100.0 * float(np.count_nonzero(d_model <= t)) / len(model) for t in taus]
    comp = [100.0 * float(np.count_nonzero(d_gt <= t)) / len(gt) for t in taus]
    f1 = [f1_score(a, c) for a, c in zip(acc, comp)]
    return EvalReport(taus, acc, comp, f1, len(model), len(gt))


def _pct(hits: int, total: int) -> float:
    return 100.0 * hits / total if total else float("nan")


def depth_error_report(
    estimated: dict[int, DepthNormalMap | np.ndarray],
    ground_truth: dict[int, np.ndarray],
    textureness: dict[int, np.ndarray] | None,
    thresholds,
    cutoffs=(0.6, 0.7, 0.8, 0.9, 1.0),
) -> dict:
    """Depth-error distribution over ground-truth-valid pixels.

    Missing estimates count as an infinite error. Returns ``{"cdf": {thr: %},
    "textureness": {v: {thr: %}}}`` where the textureness table restricts to
    pixels with ``t < v``.
    """
    errs, texs = [], []
    for vid, gt in ground_truth.items():
        est = estimated[vid]
        est = np.asarray(getattr(est, "depth", est), dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if est.shape != gt.shape:
            raise DimensionMismatch(f"view {vid}: estimate {est.shape} vs ground truth {gt.shape}")
        valid = gt > 0
        err = np.where(est > 0, np.abs(est - gt), np.inf)[valid]
        errs.append(err)
        if textureness is not None:
            t = np.asarray(textureness[vid], dtype=np.float64)
            if t.shape != gt.shape:
                raise DimensionMismatch(f"view {vid}: textureness {t.shape} vs ground truth {gt.shape}")
            texs.append(t[valid])
    err = np.concatenate(errs) if errs else np.zeros(0)
    thresholds = [float(t) for t in thresholds]
    out = {"cdf": {thr: _pct(int(np.count_nonzero(err <= thr)), len(err)) for thr in thresholds}}
    if textureness is not None:
        tex = np.concatenate(texs)
        table = {}
        for v in cutoffs:
            sel = err[tex < v]
            table[float(v)] = {thr: _pct(int(np.count_nonzero(sel <= thr)), len(sel)) for thr in thresholds}
        out["textureness"] = table
    return out

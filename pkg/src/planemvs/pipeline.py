"""End-to-end reconstruction: per-view estimation, refinement and fusion."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .fusion_eval import fuse
from .geometry import pixel_rays
from .patchmatch import run_patchmatch
from .refinement import median_fill, speckle_filter
from .scene_io import DepthNormalMap, PointCloud, SceneBundle
from .texture_prior import compute_textureness, segment_levels

log = logging.getLogger(__name__)


@dataclass
class Reconstruction:
    maps: dict[int, DepthNormalMap]
    raw_maps: dict[int, DepthNormalMap]
    textureness: dict[int, np.ndarray]
    cloud: PointCloud
    timings: dict[str, float] = field(default_factory=dict)


def _map_views(fn, ids, jobs):
    if jobs <= 1:
        return {i: fn(i) for i in ids}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return dict(zip(ids, pool.map(fn, ids)))


def reconstruct(bundle: SceneBundle, cfg: RunConfig, jobs: int = 1) -> Reconstruction:
    """Run every stage on ``bundle``.

    Round one estimates each view photometrically from a random start. An
    optional second round restarts from those maps and visibilities and uses
    the other views' round-one maps for the geometric term. Maps are then
    optionally refined and fused.
    """
    cfg.validate()
    pm_cfg = cfg.patchmatch_config()
    pm_cfg.prior.ransac = pm_cfg.prior.ransac.resolved(bundle.metric)
    views = {v.view_id: v for v in bundle.views}
    ids = sorted(views)
    timings: dict[str, float] = {}

    def sources_of(i):
        return [views[j] for j in ids if j != i]

    segs = {}
    if pm_cfg.enable_planar_priors and (pm_cfg.prior.enable_fine or pm_cfg.prior.enable_coarse):
        t0 = time.perf_counter()
        segs = _map_views(lambda i: segment_levels(views[i].rgb, pm_cfg.prior), ids, jobs)
        timings["segmentation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    first = _map_views(
        lambda i: run_patchmatch(
            views[i], sources_of(i), pm_cfg, bundle.depth_range, bundle.scene_size,
            segmentations=segs.get(i), stream=0,
        ),
        ids, jobs,
    )
    timings["patchmatch_round1"] = time.perf_counter() - t0
    result = first
    if cfg.patchmatch.outer_rounds == 2:
        t0 = time.perf_counter()
        result = _map_views(
            lambda i: run_patchmatch(
                views[i], sources_of(i), pm_cfg, bundle.depth_range, bundle.scene_size,
                init=first[i][0], state=first[i][1],
                source_maps=[first[j][0] for j in ids if j != i],
                segmentations=segs.get(i), stream=1,
            ),
            ids, jobs,
        )
        timings["patchmatch_round2"] = time.perf_counter() - t0
    raw = {i: result[i][0] for i in ids}

    maps = raw
    if cfg.refine.enable:
        t0 = time.perf_counter()
        fill = cfg.fill_config()
        speckle = cfg.speckle_config()
        maps = {
            i: median_fill(speckle_filter(raw[i], speckle, bundle.scene_size), views[i].rgb, fill, pixel_rays(views[i]))
            for i in ids
        }
        timings["refinement"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cloud = fuse(maps, bundle.views, cfg.fusion)
    timings["fusion"] = time.perf_counter() - t0
    tex = {i: compute_textureness(views[i].gray).t for i in ids}
    log.info("fused %d points from %d views", len(cloud), len(ids))
    return Reconstruction(maps, raw, tex, cloud, timings)

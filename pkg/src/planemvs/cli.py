"""Command-line driver: ``planemvs reconstruct | eval | synth``.

Exit codes: 0 success, 1 pipeline error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import ConfigError, MissingArtifact, PlaneMVSError
from .fusion_eval import EvalReport, depth_error_report, evaluate
from .pipeline import reconstruct
from .scene_io import (
    load_ground_truth,
    load_scene,
    read_pfm,
    read_ply,
    save_scene,
    write_depth_map,
    write_pfm,
    write_ply,
    write_png,
)
from .synthetic import SyntheticSpec, generate_synthetic_scene

log = logging.getLogger("planemvs")

ABLATIONS = {
    "full": {},
    "no_tw": {"texture_weighting": False},
    "no_cs": {"coarse_superpixels": False},
    "no_fs": {"fine_superpixels": False},
    "no_dr": {"depth_refinement": False},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# visualisation


def colorize(values: np.ndarray, valid: np.ndarray | None = None, cmap: str = "viridis", vmin=None, vmax=None) -> np.ndarray:
    """Map a scalar image to RGB in [0, 1]; invalid pixels are black."""
    from matplotlib import colormaps

    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(values)
    if not valid.any():
        return np.zeros(values.shape + (3,))
    lo = float(np.min(values[valid])) if vmin is None else vmin
    hi = float(np.max(values[valid])) if vmax is None else vmax
    scaled = np.clip((values - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    rgb = colormaps[cmap](np.where(valid, scaled, 0.0))[..., :3]
    rgb[~valid] = 0.0
    return rgb


# ---------------------------------------------------------------------------
# commands


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg.seed = args.seed
    if getattr(args, "no_tw", False):
        cfg.texture_weighting = False
    if getattr(args, "no_cs", False):
        cfg.coarse_superpixels = False
    if getattr(args, "no_fs", False):
        cfg.fine_superpixels = False
    if getattr(args, "no_dr", False):
        cfg.depth_refinement = False
    if getattr(args, "output", None):
        cfg.output_dir = str(args.output)
    return cfg


def run_reconstruction(scene_dir: Path, cfg: RunConfig, out_dir: Path, jobs: int = 1) -> dict:
    """Reconstruct ``scene_dir`` into ``out_dir`` and return the run record."""
    t0 = time.perf_counter()
    bundle = load_scene(scene_dir)
    rec = reconstruct(bundle, cfg, jobs=jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    for vid, dmap in rec.maps.items():
        write_depth_map(dmap, out_dir / f"depth_{vid}.pfm", out_dir / f"normal_{vid}.pfm")
        write_pfm(out_dir / f"textureness_{vid}.pfm", rec.textureness[vid].astype(np.float32))
    write_ply(out_dir / "fused.ply", rec.cloud)
    record = {
        "version": __version__,
        "scene": str(scene_dir),
        "scene_size": bundle.scene_size,
        "depth_range": list(bundle.depth_range),
        "views": [v.view_id for v in bundle.views],
        "config": cfg.to_dict(),
        "ablation": {
            "texture_weighting": cfg.texture_weighting,
            "coarse_superpixels": cfg.coarse_superpixels,
            "fine_superpixels": cfg.fine_superpixels,
            "depth_refinement": cfg.depth_refinement,
        },
        "refinement_skipped": not cfg.depth_refinement,
        "jobs": jobs,
        "n_points": len(rec.cloud),
        "timings": {**rec.timings, "total": time.perf_counter() - t0},
        "python": platform.python_version(),
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2))
    return record


def run_evaluation(out_dir: Path, gt_dir: Path, taus=None) -> EvalReport:
    """Evaluate a reconstruction directory against a ground-truth directory."""
    ply = out_dir / "fused.ply"
    run_json = out_dir / "run.json"
    for path in (ply, run_json):
        if not path.is_file():
            raise MissingArtifact(f"{path} is missing; run `reconstruct` first")
    record = json.loads(run_json.read_text())
    cfg = RunConfig.from_dict(record["config"])
    gt = load_ground_truth(gt_dir)
    if taus is None:
        taus = cfg.eval.resolve_taus(record["scene_size"])
    report = evaluate(read_ply(ply), gt.points, taus)

    est, tex = {}, {}
    for vid in gt.depths:
        dpath = out_dir / f"depth_{vid}.pfm"
        if not dpath.is_file():
            raise MissingArtifact(f"{dpath} is missing")
        est[vid] = read_pfm(dpath)
        tpath = out_dir / f"textureness_{vid}.pfm"
        tex[vid] = read_pfm(tpath) if tpath.is_file() else np.ones_like(est[vid])
    errs = depth_error_report(est, gt.depths, tex, cfg.eval.depth_thresholds, cfg.eval.textureness_cutoffs)
    report.depth_cdf = errs["cdf"]
    report.textureness_table = errs["textureness"]
    report.write(out_dir / "report.tsv", out_dir / "report.json")

    viz = out_dir / "viz"
    viz.mkdir(exist_ok=True)
    for vid, d in est.items():
        g = gt.depths[vid]
        valid = d > 0
        lo, hi = record["depth_range"]
        write_png(viz / f"depth_{vid}.png", colorize(d, valid, "viridis", lo, hi))
        both = valid & (g > 0)
        err = np.where(both, np.abs(d - g), 0.0)
        write_png(viz / f"error_{vid}.png", colorize(err, both, "magma", 0.0, 0.02 * record["scene_size"]))
    return report


def ablation_table(reports: dict[str, EvalReport]) -> str:
    lines = ["variant\ttau\taccuracy\tcompleteness\tf1"]
    for name, rep in reports.items():
        for tau, a, c, f in rep.rows():
            lines.append(f"{name}\t{tau!r}\t{a:.4f}\t{c:.4f}\t{f:.4f}")
    return "\n".join(lines) + "\n"


def cmd_reconstruct(args) -> int:
    scene_dir = Path(args.scene)
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    out_root = Path(cfg.output_dir)
    if args.ablate is None:
        record = run_reconstruction(scene_dir, cfg, out_root, args.jobs)
        print(f"wrote {record['n_points']} points to {out_root / 'fused.ply'}")
        return 0
    if args.ablate != "all":
        raise UsageError("--ablate only accepts 'all'")
    gt_dir = scene_dir / "gt"
    reports = {}
    for name, flags in ABLATIONS.items():
        variant = cfg.copy()
        for flag, value in flags.items():
            setattr(variant, flag, value)
        variant.output_dir = str(out_root / name)
        run_reconstruction(scene_dir, variant, out_root / name, args.jobs)
        if gt_dir.is_dir():
            reports[name] = run_evaluation(out_root / name, gt_dir)
    if reports:
        table = ablation_table(reports)
        (out_root / "ablation.tsv").write_text(table)
        print(table, end="")
    return 0


def cmd_eval(args) -> int:
    taus = [float(t) for t in args.taus] if args.taus else None
    report = run_evaluation(Path(args.output), Path(args.gt), taus)
    print(report.to_tsv(), end="")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_toml(args.spec)
    if spec.cameras.count < 1:
        raise UsageError("the synthetic spec defines zero cameras")
    if args.seed is not None:
        spec.seed = args.seed
    bundle, gt = generate_synthetic_scene(spec)
    out = Path(args.output)
    if args.preview:
        out.mkdir(parents=True, exist_ok=True)
        for v in bundle.views:
            write_png(out / f"preview_{v.view_id}.png", v.rgb)
        print(f"wrote {len(bundle.views)} preview images to {out}")
        return 0
    save_scene(bundle, out, ground_truth=gt)
    print(f"wrote scene with {len(bundle.views)} views to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planemvs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="estimate, refine and fuse depth maps of a scene")
    p.add_argument("scene", help="scene directory (cameras.txt, scene.toml, images/)")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--output", "-o", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="random seed (overrides patchmatch.seed)")
    p.add_argument("--jobs", type=int, default=1, help="reference views processed concurrently")
    p.add_argument("--no-tw", action="store_true", help="disable texture weighting")
    p.add_argument("--no-cs", action="store_true", help="disable coarse superpixel priors")
    p.add_argument("--no-fs", action="store_true", help="disable fine superpixel priors")
    p.add_argument("--no-dr", action="store_true", help="disable depth refinement")
    p.add_argument("--ablate", metavar="all", help="run the full pipeline and every single ablation")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="evaluate a reconstruction against ground truth")
    p.add_argument("output", help="reconstruction output directory")
    p.add_argument("gt", help="ground-truth directory (points.ply, depth_<id>.pfm)")
    p.add_argument("--taus", nargs="+", help="distance thresholds in scene units")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic scene from a TOML spec")
    p.add_argument("spec", help="synthetic scene spec (TOML)")
    p.add_argument("output", help="scene directory to write")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--preview", action="store_true", help="only write PNG renders")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"planemvs: usage error: {exc}", file=sys.stderr)
        return 2
    except (PlaneMVSError, OSError, ValueError) as exc:
        print(f"planemvs: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

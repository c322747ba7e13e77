import json

import numpy as np
import pytest

from planemvs.cli import main
from planemvs.config import RunConfig
from planemvs.scene_io import load_scene, read_pfm

TINY_SPEC = """
width = 48
height = 36
fx = 48.0
seed = 3

[cameras]
count = 3
radius = 5.0
arc_deg = 20.0

[[planes]]
point = [0.0, 0.0, 0.0]
normal = [0.1, 0.0, -1.0]
texture = "noise"
scale = 0.35
colors = [[0.2, 0.25, 0.3], [0.8, 0.75, 0.7]]
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "tiny.toml"
    spec.write_text(TINY_SPEC)
    cfg = RunConfig()
    cfg.patchmatch.iterations = 2
    cfg.fusion.min_consistent_views = 2
    cfg.prior.fine_divisor = 8
    cfg.prior.coarse_divisor = 12
    cfg.save(root / "fast.toml")
    assert main(["synth", str(spec), str(root / "scene")]) == 0
    return root


def _reconstruct(tiny, out, *extra):
    return main(["reconstruct", str(tiny / "scene"), "--config", str(tiny / "fast.toml"), "-o", str(out), *extra])


def test_synth_writes_a_loadable_scene(tiny):
    bundle = load_scene(tiny / "scene")
    assert len(bundle.views) == 3 and not bundle.metric
    assert (tiny / "scene" / "gt" / "points.ply").is_file()


def test_synth_preview(tiny, tmp_path):
    assert main(["synth", str(tiny / "tiny.toml"), str(tmp_path), "--preview"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["preview_0.png", "preview_1.png", "preview_2.png"]


def test_reconstruct_and_eval(tiny, capsys):
    out = tiny / "run"
    assert _reconstruct(tiny, out) == 0
    for name in ("fused.ply", "run.json", "depth_0.pfm", "normal_2.pfm", "textureness_1.pfm"):
        assert (out / name).is_file()
    assert main(["eval", str(out), str(tiny / "scene" / "gt")]) == 0
    header = (out / "report.tsv").read_text().splitlines()[0]
    assert header.split("\t") == ["tau", "accuracy", "completeness", "f1"]
    assert (out / "viz" / "depth_0.png").is_file() and (out / "viz" / "error_0.png").is_file()
    report = json.loads((out / "report.json").read_text())
    assert set(report["depth_cdf"]) and len(report["f1"]) == 5
    assert "tau\taccuracy" in capsys.readouterr().out


def test_flags_recorded(tiny):
    out = tiny / "nodr"
    assert _reconstruct(tiny, out, "--no-dr", "--no-tw", "--seed", "5") == 0
    record = json.loads((out / "run.json").read_text())
    assert record["refinement_skipped"] is True
    assert record["ablation"] == {
        "texture_weighting": False, "coarse_superpixels": True, "fine_superpixels": True, "depth_refinement": False,
    }
    assert record["config"]["patchmatch"]["seed"] == 5


def test_seeded_runs_are_bit_identical(tiny):
    a, b = tiny / "det_a", tiny / "det_b"
    assert _reconstruct(tiny, a, "--seed", "9") == 0
    assert _reconstruct(tiny, b, "--seed", "9") == 0
    for name in ("depth_0.pfm", "normal_0.pfm", "depth_2.pfm", "fused.ply"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert np.array_equal(read_pfm(a / "depth_1.pfm"), read_pfm(b / "depth_1.pfm"))


def test_exit_codes(tiny, tmp_path):
    # usage errors: bad flags, bad config, zero cameras
    with pytest.raises(SystemExit) as exc:
        main(["reconstruct"])
    assert exc.value.code == 2
    bad_cfg = tmp_path / "bad.toml"
    bad_cfg.write_text("[patchmatch]\nnope = 1\n")
    assert main(["reconstruct", str(tiny / "scene"), "--config", str(bad_cfg)]) == 2
    assert _reconstruct(tiny, tmp_path / "x", "--jobs", "0") == 2
    zero = tmp_path / "zero.toml"
    zero.write_text(TINY_SPEC.replace("count = 3", "count = 0"))
    assert main(["synth", str(zero), str(tmp_path / "z")]) == 2
    # pipeline errors: missing scene, missing artifacts
    assert main(["reconstruct", str(tmp_path / "missing"), "-o", str(tmp_path / "y")]) == 1
    assert main(["eval", str(tmp_path / "empty"), str(tiny / "scene" / "gt")]) == 1


def test_ablate_all(tiny):
    out = tiny / "abl"
    assert _reconstruct(tiny, out, "--ablate", "all") == 0
    rows = (out / "ablation.tsv").read_text().splitlines()
    assert rows[0] == "variant\ttau\taccuracy\tcompleteness\tf1"
    assert {r.split("\t")[0] for r in rows[1:]} == {"full", "no_tw", "no_cs", "no_fs", "no_dr"}

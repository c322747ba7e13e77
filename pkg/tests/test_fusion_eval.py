import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import plane_map
from planemvs.errors import DimensionMismatch, EmptyCloud
from planemvs.fusion_eval import (
    EvalReport,
    FusionConfig,
    depth_error_report,
    evaluate,
    f1_score,
    fuse,
    nearest_distances,
)
from planemvs.scene_io import DepthNormalMap, PointCloud

NORMAL = np.array([0.2, 0.0, -1.0]) / np.linalg.norm([0.2, 0.0, -1.0])


def gt_maps(bundle, gt):
    return {v.view_id: plane_map(v, gt.depths[v.view_id], NORMAL) for v in bundle.views}


def plane_distance(points):
    return np.abs(points @ NORMAL)


class TestFuse:
    def test_ground_truth_maps_fuse_onto_the_plane(self, noise_scene):
        bundle, gt = noise_scene
        cloud = fuse(gt_maps(bundle, gt), bundle.views)
        assert len(cloud) > 0.5 * bundle.views[0].width * bundle.views[0].height
        assert np.mean(plane_distance(cloud.points) <= 1e-3 * bundle.scene_size) >= 0.95
        np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-9)
        assert cloud.colors.dtype == np.uint8

    def test_shifted_view_is_rejected(self, noise_scene):
        bundle, gt = noise_scene
        maps = gt_maps(bundle, gt)
        maps[0] = DepthNormalMap(maps[0].depth * 1.1, maps[0].normal)
        cloud, consumed = fuse(maps, bundle.views, return_consumed=True)
        assert consumed[0].mean() < 0.05
        assert np.mean(plane_distance(cloud.points) <= 1e-3 * bundle.scene_size) >= 0.95

    def test_single_view_fuses_nothing(self, noise_scene):
        bundle, gt = noise_scene
        v = bundle.views[0]
        assert len(fuse({0: gt_maps(bundle, gt)[0]}, [v])) == 0

    def test_two_views_need_lower_threshold(self, two_view_scene):
        bundle, gt = two_view_scene
        maps = {v.view_id: plane_map(v, gt.depths[v.view_id], NORMAL) for v in bundle.views}
        assert len(fuse(maps, bundle.views)) == 0
        assert len(fuse(maps, bundle.views, FusionConfig(min_consistent_views=2))) > 0

    def test_view_order_does_not_matter(self, noise_scene):
        bundle, gt = noise_scene
        maps = gt_maps(bundle, gt)
        a = fuse(maps, bundle.views)
        b = fuse(maps, list(reversed(bundle.views)))
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.colors, b.colors)

    def test_each_pixel_used_once_as_reference(self, noise_scene):
        bundle, gt = noise_scene
        cloud, consumed = fuse(gt_maps(bundle, gt), bundle.views, return_consumed=True)
        assert len(cloud) <= sum(int(c.sum()) for c in consumed.values())

    def test_shape_mismatch(self, noise_scene):
        bundle, _ = noise_scene
        with pytest.raises(DimensionMismatch):
            fuse({0: DepthNormalMap.empty(3, 3)}, bundle.views)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(max_reproj_error=0)
        with pytest.raises(ValueError):
            FusionConfig(min_consistent_views=1)


def brute_force_metrics(model, gt, tau):
    d = np.sqrt(((model[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    acc = 100.0 * np.count_nonzero(d.min(axis=1) <= tau) / len(model)
    comp = 100.0 * np.count_nonzero(d.min(axis=0) <= tau) / len(gt)
    return acc, comp


class TestEvaluate:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0, 1, (500, 3))
        model = gt[:400] + rng.normal(0, 0.02, (400, 3))
        model = np.vstack([model, rng.uniform(0, 1, (100, 3))])
        taus = [0.01, 0.02, 0.05, 0.1]
        rep = evaluate(model, gt, taus)
        for i, tau in enumerate(taus):
            acc, comp = brute_force_metrics(model, gt, tau)
            assert rep.accuracy[i] == acc and rep.completeness[i] == comp
            assert rep.f1[i] == f1_score(acc, comp)

    def test_single_outlier(self):
        gt = np.random.default_rng(0).uniform(0, 1, (99, 3))
        model = np.vstack([gt, [[10.0, 10.0, 10.0]]])
        rep = evaluate(PointCloud(model), PointCloud(gt), [1e-9])
        assert rep.accuracy == [99.0] and rep.completeness == [100.0]

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(0, 100), c=st.floats(0, 100))
    def test_f1_identity(self, a, c):
        f = f1_score(a, c)
        assert f == (0.0 if a + c == 0 else 2 * a * c / (a + c))
        assert min(a, c) - 1e-9 <= f <= max(a, c) + 1e-9

    def test_nearest_distances(self):
        d = nearest_distances(np.array([[0.0, 0, 0], [3, 4, 0]]), np.array([[0.0, 0, 1]]))
        np.testing.assert_allclose(d, [1.0, np.sqrt(26)])

    def test_empty(self):
        with pytest.raises(EmptyCloud):
            evaluate(np.zeros((0, 3)), np.zeros((5, 3)), [0.1])

    def test_report_files(self, tmp_path):
        rep = evaluate(np.zeros((2, 3)), np.zeros((2, 3)), [0.1, 0.2])
        rep.write(tmp_path / "r.tsv", tmp_path / "r.json")
        lines = (tmp_path / "r.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["tau", "accuracy", "completeness", "f1"]
        assert len(lines) == 3
        assert json.loads((tmp_path / "r.json").read_text())["f1"] == [100.0, 100.0]
        assert isinstance(rep, EvalReport)


class TestDepthReport:
    def test_cdf_and_textureness_table(self):
        gt = {0: np.full((2, 5), 4.0)}
        est = {0: np.array([[4.0, 4.005, 4.05, 4.5, 0.0], [4.0, 4.0, 4.0, 4.0, 4.0]])}
        tex = {0: np.array([[0.5, 0.5, 0.9, 0.9, 0.9], [1.0, 1.0, 1.0, 1.0, 1.0]])}
        rep = depth_error_report(est, gt, tex, [0.01, 0.1, 1.0], cutoffs=[0.6, 1.01])
        # the missing estimate counts against every threshold
        assert rep["cdf"] == {0.01: 70.0, 0.1: 80.0, 1.0: 90.0}
        assert rep["textureness"][0.6] == {0.01: 100.0, 0.1: 100.0, 1.0: 100.0}
        assert rep["textureness"][1.01] == rep["cdf"]

    def test_gt_invalid_pixels_ignored(self):
        rep = depth_error_report({0: np.array([[1.0, 9.0]])}, {0: np.array([[1.0, 0.0]])}, None, [0.1])
        assert rep["cdf"] == {0.1: 100.0}

    def test_mismatch(self):
        with pytest.raises(DimensionMismatch):
            depth_error_report({0: np.zeros((2, 2))}, {0: np.zeros((3, 2))}, None, [0.1])

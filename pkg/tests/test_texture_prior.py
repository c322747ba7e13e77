import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage, stats

from conftest import make_view, plane_map, random_rotation
from planemvs.geometry import pixel_rays
from planemvs.refinement import SpeckleConfig
from planemvs.scene_io import DepthNormalMap
from planemvs.texture_prior import (
    EPS_VAR,
    FIT_MIN_TEXTURENESS,
    PlanePrior,
    PriorConfig,
    RansacConfig,
    SuperpixelSegmentation,
    bhattacharyya_coefficient,
    build_planar_priors,
    choose_planes,
    compute_textureness,
    fit_superpixel_planes,
    label_adjacency,
    marker_grid,
    neighbor_weights,
    planar_hypothesis,
    ransac_plane,
    rgb_histograms,
    segment_superpixels,
    textureness_from_variance,
    weights,
)


def smooth_noise(h, w, seed=0, sigma=6.0):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((h, w, 3)), (sigma, sigma, 0))
    img -= img.min()
    return img / img.max()


def clipped_variance_oracle(gray):
    h, w = gray.shape
    out = np.empty_like(gray)
    for y in range(h):
        for x in range(w):
            out[y, x] = np.var(gray[max(0, y - 2) : y + 3, max(0, x - 2) : x + 3])
    return out


class TestTextureness:
    @pytest.mark.parametrize("value", [0.0, 0.1, 1 / 3, 0.5, 0.77, 1.0])
    def test_constant_image_is_t_min(self, value):
        t = compute_textureness(np.full((30, 40), value)).t
        assert np.all(t == 0.5)

    def test_formula_values(self):
        # (v + e) / (v + 2e): 2/3 at v = e and 0.8 at v = 3e
        assert textureness_from_variance(EPS_VAR) == pytest.approx(2.0 / 3.0, abs=1e-15)
        assert textureness_from_variance(3 * EPS_VAR) == pytest.approx(0.8, abs=1e-15)
        assert textureness_from_variance(0.0) == 0.5

    def test_checker_beats_flat(self):
        gray = np.full((40, 80), 0.5)
        yy, xx = np.mgrid[0:40, 0:40]
        gray[:, :40] = (yy + xx) % 2
        t = compute_textureness(gray).t
        assert t[5:-5, 5:35].min() > 0.99
        assert np.all(t[:, 43:] == 0.5)

    def test_formula_identity_against_loop_oracle(self):
        gray = np.random.default_rng(1).random((17, 23)) * 0.2
        tm = compute_textureness(gray)
        var = clipped_variance_oracle(gray)
        np.testing.assert_allclose(tm.variance, var, rtol=1e-10, atol=1e-15)
        np.testing.assert_allclose(tm.t, (var + EPS_VAR) / (var + EPS_VAR / 0.5), rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000), a=st.floats(1.0, 3.0))
    def test_scaling_never_lowers_t(self, seed, a):
        gray = np.random.default_rng(seed).random((12, 12)) * 0.3
        t1 = compute_textureness(gray).t
        t2 = compute_textureness(a * gray).t
        assert np.all(t2 >= t1 - 1e-12)
        assert np.all((t1 >= 0.5) & (t1 < 1.0))

    @settings(max_examples=50, deadline=None)
    @given(t=st.floats(0.5, 1.0))
    def test_weights(self, t):
        wp, wm = weights(t)
        assert wp == pytest.approx(0.8 + 0.2 * t) and wm == pytest.approx(1.0 - 0.2 * t)
        assert wp >= wm
        assert (wp == wm) == (t == 0.5)

    def test_weight_endpoints(self):
        assert weights(1.0) == (1.0, 0.8)
        assert weights(0.5) == (0.9, 0.9)


class TestSegmentation:
    def test_two_halves(self):
        rgb = np.zeros((60, 80, 3))
        rgb[:, :37] = (0.9, 0.1, 0.1)
        rgb[:, 37:] = (0.1, 0.2, 0.9)
        seg = segment_superpixels(rgb, 2)
        assert seg.n_segments == 2
        edges = [np.flatnonzero(np.diff(row) != 0) for row in seg.labels]
        near = [len(e) == 1 and abs(e[0] + 0.5 - 36.5) <= 2 for e in edges]
        assert np.mean(near) >= 0.95

    def test_count_and_connectivity(self):
        seg = segment_superpixels(smooth_noise(480, 640), 50)
        assert 40 <= seg.n_segments <= 60
        for k in range(seg.n_segments):
            assert ndimage.label(seg.labels == k)[1] == 1

    @pytest.mark.parametrize("width", [160, 320, 640, 1024, 1920])
    @pytest.mark.parametrize("divisor", [20, 30])
    def test_grid_count_within_twenty_percent(self, width, divisor):
        target = round(width / divisor)
        rows, cols = marker_grid(width * 3 // 4, width, target)
        assert abs(rows * cols - target) <= 0.2 * target

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 1000), target=st.integers(2, 30))
    def test_partition(self, seed, target):
        rgb = np.random.default_rng(seed).random((40, 50, 3))
        seg = segment_superpixels(rgb, target)
        counts = np.bincount(seg.labels.ravel(), minlength=seg.n_segments)
        assert counts.sum() == 40 * 50 and np.all(counts > 0)
        np.testing.assert_allclose(seg.histograms.sum(axis=1), 1.0)
        for k, nbrs in enumerate(seg.adjacency):
            assert k not in nbrs
            assert all(k in seg.adjacency[j] for j in nbrs)

    def test_rejects_tiny_target(self):
        with pytest.raises(ValueError):
            segment_superpixels(np.zeros((10, 10, 3)), 1)

    def test_bhattacharyya(self):
        h = np.array([0.5, 0.5, 0.0])
        assert bhattacharyya_coefficient(h, h) == pytest.approx(1.0)
        assert bhattacharyya_coefficient(h, np.array([0.0, 0.0, 1.0])) == 0.0


def _plane_points(rng, n, normal, offset, spread=2.0):
    normal = np.asarray(normal, dtype=np.float64)
    normal /= np.linalg.norm(normal)
    u = np.cross(normal, [0.3, 0.5, 0.7])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    a, b = rng.uniform(-spread, spread, (2, n))
    return offset * normal + a[:, None] * u + b[:, None] * v


class TestRansac:
    def test_noiseless_fronto_segment(self):
        view = make_view(f=50.0)
        rays = pixel_rays(view)
        depth = 5.0 / rays[..., 2]
        seg = SuperpixelSegmentation(np.zeros(view.shape, dtype=np.int64), np.ones((1, 1)), [set()])
        dmap = DepthNormalMap(depth, np.zeros(view.shape + (3,)))
        (prior,) = fit_superpixel_planes(seg, dmap, view, RansacConfig(), 10.0, np.random.default_rng(0))
        ang = math.degrees(math.acos(min(1.0, abs(prior.normal @ [0, 0, 1]))))
        assert ang <= 0.5
        assert prior.offset * np.sign(prior.normal[2]) == pytest.approx(5.0, abs=1e-3)
        assert prior.inlier_ratio == 1.0 and prior.support == view.width * view.height

    def test_two_points_absent(self):
        view = make_view(width=2, height=1)
        seg = SuperpixelSegmentation(np.zeros((1, 2), dtype=np.int64), np.ones((1, 1)), [set()])
        dmap = DepthNormalMap(np.full((1, 2), 5.0), np.zeros((1, 2, 3)))
        (prior,) = fit_superpixel_planes(seg, dmap, view, RansacConfig(), 10.0, np.random.default_rng(0))
        assert not prior.present and prior.support == 2
        assert ransac_plane(np.zeros((2, 3)), 0.1, np.random.default_rng(0)) is None

    def test_collinear_points_are_degenerate(self):
        pts = np.outer(np.linspace(0, 1, 20), [1.0, 2.0, 3.0])
        assert ransac_plane(pts, 0.1, np.random.default_rng(0)) is None

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_seventy_thirty(self, seed):
        rng = np.random.default_rng(seed)
        n_true = np.array([0.2, -0.3, 1.0]) / np.linalg.norm([0.2, -0.3, 1.0])
        inl = _plane_points(rng, 700, n_true, 5.0)
        out = rng.uniform(-5, 5, (300, 3)) + 5.0 * n_true
        n, d, mask = ransac_plane(np.vstack([inl, out]), 0.1, rng, max_iters=1000)
        ratio = mask.mean()
        assert 0.6 <= ratio <= 0.8
        assert math.degrees(math.acos(min(1.0, abs(n @ n_true)))) <= 2.0

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10000))
    def test_inlier_ratio_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.vstack([_plane_points(rng, 80, [0, 0, 1], 2.0), rng.uniform(-3, 3, (40, 3))])
        pts += rng.normal(0, 0.02, pts.shape)
        R, t = random_rotation(rng), rng.uniform(-10, 10, 3)
        a = ransac_plane(pts, 0.1, np.random.default_rng(seed))
        b = ransac_plane(pts @ R.T + t, 0.1, np.random.default_rng(seed))
        assert a[2].sum() == b[2].sum()


def _three_segments(h0, h1, h2, rows=100):
    """Segment 0 is a rows x rows block; segments 1 and 2 split the column to its right."""
    labels = np.zeros((rows, rows + 1), dtype=np.int64)
    labels[: rows // 2, rows] = 1
    labels[rows // 2 :, rows] = 2
    hist = np.array([h0, h1, h2], dtype=np.float64)
    return SuperpixelSegmentation(labels, hist, label_adjacency(labels, 3))


def _prior(offset, ratio=1.0):
    return PlanePrior(np.array([0.0, 0.0, 1.0]), offset, ratio, 100, int(100 * ratio))


class TestPlanarHypothesis:
    def test_full_confidence_keeps_own_plane(self):
        seg = _three_segments([1, 0, 0], [1, 0, 0], [1, 0, 0])
        priors = [_prior(3.0), _prior(4.0), _prior(6.0)]
        choice = choose_planes(seg, priors, np.random.default_rng(0))
        assert np.all(choice[:, :100] == 0)

    def test_zero_confidence_single_neighbour(self):
        seg = _three_segments([1, 0, 0], [1, 0, 0], [1, 0, 0])
        priors = [_prior(3.0, 0.0), _prior(4.0), PlanePrior(None, 0.0, 0.0, 2)]
        choice = choose_planes(seg, priors, np.random.default_rng(0))
        assert np.all(choice[:, :100] == 1)

    def test_similarity_weighted_draw(self):
        # BC(0, 1) = sqrt(0.81) = 0.9 and BC(0, 2) = sqrt(0.01) = 0.1
        seg = _three_segments([1, 0, 0], [0.81, 0.19, 0], [0.01, 0, 0.99])
        priors = [_prior(3.0, 0.0), _prior(4.0), _prior(6.0)]
        cand, w = neighbor_weights(seg, 0, priors)
        np.testing.assert_allclose(w, [0.9, 0.1])
        choice = choose_planes(seg, priors, np.random.default_rng(0))[:, :100]
        freq = np.mean(choice == 1)
        assert abs(freq - 0.9) <= 3 * math.sqrt(0.09 / choice.size)

    def test_distance_reading(self):
        seg = _three_segments([1, 0, 0], [0.81, 0.19, 0], [0.01, 0, 0.99])
        priors = [_prior(3.0, 0.0), _prior(4.0), _prior(6.0)]
        _, w = neighbor_weights(seg, 0, priors, "distance")
        np.testing.assert_allclose(w, np.sqrt([0.1, 0.9]))

    def test_equal_weights_are_uniform(self):
        labels = np.zeros((100, 104), dtype=np.int64)
        for j in range(4):
            labels[25 * j : 25 * (j + 1), 100:] = j + 1
        hist = np.tile([0.5, 0.5], (5, 1))
        seg = SuperpixelSegmentation(labels, hist, label_adjacency(labels, 5))
        priors = [_prior(3.0, 0.0)] + [_prior(4.0 + j) for j in range(4)]
        choice = choose_planes(seg, priors, np.random.default_rng(5))[:, :100]
        counts = np.bincount(choice.ravel(), minlength=5)[1:]
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_single_pixel_draw(self):
        view = make_view(width=101, height=100, f=80.0)
        seg = _three_segments([1, 0, 0], [1, 0, 0], [1, 0, 0])
        priors = [_prior(5.0), _prior(4.0), _prior(6.0)]
        plane = planar_hypothesis((10, 10), seg, priors, np.random.default_rng(0), view, (1.0, 10.0))
        ray_z = (view.K_inv @ [10, 10, 1])[2] / np.linalg.norm(view.K_inv @ [10, 10, 1])
        assert plane.depth == pytest.approx(5.0 / ray_z)
        np.testing.assert_allclose(plane.normal, [0, 0, -1])
        assert planar_hypothesis((10, 10), seg, priors, np.random.default_rng(0), view, (1.0, 4.0)) is None


class TestBuildPriors:
    def test_wall_interior_receives_good_hypotheses(self, wall_scene):
        bundle, gt = wall_scene
        v, g = bundle.views[1], gt.depths[1]
        flat = compute_textureness(v.gray).t < 0.51
        rng = np.random.default_rng(0)
        # a first sweep leaves scattered wrong depths inside the flat region
        bad = flat & (rng.random(g.shape) < 0.6)
        d = g.copy()
        d[bad] = rng.uniform(*bundle.depth_range, size=bad.sum())
        gt_map = plane_map(v, g, (0, 0, -1))
        pri = build_planar_priors(v, DepthNormalMap(d, gt_map.normal), PriorConfig(), bundle.depth_range, bundle.scene_size, 0)
        ok = np.zeros(g.shape, dtype=bool)
        for level in ("fine", "coarse"):
            ok |= (pri.depth[level] > 0) & (np.abs(pri.depth[level] - g) <= 0.02 * g)
        assert ok[flat].mean() >= 0.8

    def test_flat_pixels_do_not_steer_the_fit(self, wall_scene):
        bundle, gt = wall_scene
        v, g = bundle.views[1], gt.depths[1]
        flat = compute_textureness(v.gray).t < 0.51
        # flat pixels carry a smooth, self-consistent but tilted surface
        ramp = np.linspace(-0.1, 0.1, g.shape[1])[None, :]
        d = np.where(flat, g * (1.0 + ramp), g)
        dmap = DepthNormalMap(d, plane_map(v, g, (0, 0, -1)).normal)

        def good_share(cfg):
            pri = build_planar_priors(v, dmap, cfg, bundle.depth_range, bundle.scene_size, 0)
            ok = np.zeros(g.shape, dtype=bool)
            for level in ("fine", "coarse"):
                ok |= (pri.depth[level] > 0) & (np.abs(pri.depth[level] - g) <= 0.02 * g)
            return ok[flat].mean()

        gated = good_share(PriorConfig())
        assert gated >= 0.8
        assert good_share(PriorConfig(fit_min_textureness=0.0)) < gated

    def test_default_gate_is_one_grey_level(self):
        assert FIT_MIN_TEXTURENESS == pytest.approx((1 / 255**2 + EPS_VAR) / (1 / 255**2 + 2 * EPS_VAR))

    def test_invalid_map_gives_no_hypotheses(self):
        view = make_view(rgb=smooth_noise(48, 64))
        pri = build_planar_priors(view, DepthNormalMap.empty(48, 64), PriorConfig(), (1.0, 10.0), 10.0, 0)
        for level in ("fine", "coarse"):
            assert np.all(pri.depth[level] == 0)
            assert not any(p.present for p in pri.planes[level])

    def test_levels_draw_independently(self):
        view = make_view(rgb=smooth_noise(48, 64))
        seg = segment_superpixels(view.rgb, 8)
        rng = np.random.default_rng(3)
        # every segment holds its own fronto plane plus many outliers, so r_k < 1
        depth = (3.0 + seg.labels * 0.3) / pixel_rays(view)[..., 2]
        noisy = rng.random(depth.shape) < 0.4
        depth[noisy] = rng.uniform(1.0, 9.0, noisy.sum())
        dmap = DepthNormalMap(depth, np.zeros(view.shape + (3,)))
        cfg = PriorConfig(speckle=SpeckleConfig(max_area_fraction=1e-9))
        pri = build_planar_priors(view, dmap, cfg, (1.0, 10.0), 10.0, 7, {"fine": seg, "coarse": seg})
        assert not np.array_equal(pri.depth["fine"], pri.depth["coarse"])
        again = build_planar_priors(view, dmap, cfg, (1.0, 10.0), 10.0, 7, {"fine": seg, "coarse": seg})
        np.testing.assert_array_equal(pri.depth["fine"], again.depth["fine"])

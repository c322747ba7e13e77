"""Line-sweep PatchMatch over depth/normal hypotheses with per-pixel view selection.

Every iteration sweeps all lines of the reference image in one direction
(rows and columns alternate). Each pixel compares a small set of candidate
planes (its current estimate, the plane propagated from its predecessor on
the line, random and perturbed guesses and, when enabled, the superpixel
plane priors) on a sampled subset of source views, keeps the cheapest, and
the visibility of every source is then re-smoothed along the line.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import ConfigError, NoSources
from .geometry import PARALLEL_EPS, LocalPlane, pixel_ray, pixel_rays, relative_pose
from .photoconsistency import MatchWindow, geometric_cost_nb, ncc_window_nb, ref_window_nb
from .scene_io import CameraView, DepthNormalMap
from .texture_prior import PriorConfig, build_planar_priors, compute_textureness, segment_levels
from .view_selection import ViewSelectionState, forward_backward_nb, prior_weights_nb, sample_without_replacement_nb, uniform_density

log = logging.getLogger(__name__)

KINDS = (
    "current",
    "propagated",
    "random_depth",
    "random_normal",
    "random_both",
    "perturbed_depth",
    "perturbed_normal",
    "planar_fine",
    "planar_coarse",
)
N_KINDS = len(KINDS)
PLANAR_FIRST = 7
DIRECTIONS = ("left_to_right", "top_to_down", "right_to_left", "bottom_to_up")


@dataclass
class ViewConfig:
    gamma: float = 0.999
    subset_size: int = 4
    parallax_peak_deg: float = 15.0
    parallax_sigma_deg: float = 10.0
    parallax_max_deg: float = 90.0
    resolution_band: float = 2.0
    u_anchor_rho: float = 0.2


@dataclass
class PatchMatchConfig:
    iterations: int = 5
    lambda_geom: float = 0.2
    perturb_depth_frac: float = 0.025
    perturb_normal_deg: float = 5.0
    seed: int = 0
    enable_planar_priors: bool = True
    enable_texture_weighting: bool = True
    planar_tie_preference: bool = True
    psi_max: float = 3.0
    window: MatchWindow = field(default_factory=MatchWindow)
    views: ViewConfig = field(default_factory=ViewConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("patchmatch.iterations must be >= 1")
        if self.lambda_geom < 0:
            raise ConfigError("patchmatch.lambda_geom must be >= 0")
        if not 0 <= self.perturb_depth_frac < 1:
            raise ConfigError("patchmatch.perturb_depth_frac must lie in [0, 1)")
        if not 0 <= self.perturb_normal_deg < 90:
            raise ConfigError("patchmatch.perturb_normal_deg must lie in [0, 90)")
        if self.seed < 0:
            raise ConfigError("patchmatch.seed must be non-negative")
        if self.psi_max <= 0:
            raise ConfigError("photo.psi_max must be positive")
        if not 0.5 <= self.views.gamma < 1:
            raise ConfigError("views.gamma must lie in [0.5, 1)")
        if self.views.subset_size < 1:
            raise ConfigError("views.subset_size must be >= 1")
        if not -1 <= self.views.u_anchor_rho <= 1:
            raise ConfigError("views.u_anchor_rho must lie in [-1, 1]")


@dataclass(frozen=True)
class SweepSchedule:
    iterations: int = 5

    def direction(self, iteration: int) -> int:
        return iteration % 4

    def directions(self) -> list[str]:
        return [DIRECTIONS[self.direction(i)] for i in range(self.iterations)]


@dataclass
class HypothesisSet:
    entries: list[tuple[LocalPlane, str]]

    @property
    def kinds(self) -> list[str]:
        return [k for _, k in self.entries]

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# random numbers: splitmix64 streams keyed by (seed, view, iteration, pixel)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@nb.njit(cache=True, nogil=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, nogil=True)
def _stream_key(seed, view, iteration):
    return _mix64(_mix64(_mix64(seed + _GOLDEN) + view + _GOLDEN) + iteration + _GOLDEN)


@nb.njit(cache=True, nogil=True)
def _seed_pixel(st, key, pixel):
    st[0] = _mix64(key ^ _mix64(pixel + _GOLDEN))


@nb.njit(cache=True, nogil=True)
def _uniform(st):
    st[0] = st[0] + _GOLDEN
    return np.float64(_mix64(st[0]) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True, nogil=True)
def _random_normal(st, rx, ry, rz, out):
    """Uniform direction on the sphere, flipped to face the camera."""
    z = 2.0 * _uniform(st) - 1.0
    phi = 2.0 * math.pi * _uniform(st)
    s = math.sqrt(max(0.0, 1.0 - z * z))
    out[0] = s * math.cos(phi)
    out[1] = s * math.sin(phi)
    out[2] = z
    if out[0] * rx + out[1] * ry + out[2] * rz > 0.0:
        out[0] = -out[0]
        out[1] = -out[1]
        out[2] = -out[2]


@nb.njit(cache=True, nogil=True)
def _perturb_normal(st, n, max_angle, out):
    """Rotate ``n`` by an angle in [0, max_angle] about a random tangent axis."""
    while True:
        a0 = 2.0 * _uniform(st) - 1.0
        a1 = 2.0 * _uniform(st) - 1.0
        a2 = 2.0 * _uniform(st) - 1.0
        dot = a0 * n[0] + a1 * n[1] + a2 * n[2]
        a0 -= dot * n[0]
        a1 -= dot * n[1]
        a2 -= dot * n[2]
        norm = math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
        if norm > 1e-6:
            break
    a0 /= norm
    a1 /= norm
    a2 /= norm
    ang = max_angle * _uniform(st)
    c = math.cos(ang)
    s = math.sin(ang)
    # a is orthogonal to n, so Rodrigues reduces to n cos + (a x n) sin
    out[0] = n[0] * c + (a1 * n[2] - a2 * n[1]) * s
    out[1] = n[1] * c + (a2 * n[0] - a0 * n[2]) * s
    out[2] = n[2] * c + (a0 * n[1] - a1 * n[0]) * s
    norm = math.sqrt(out[0] ** 2 + out[1] ** 2 + out[2] ** 2)
    out[0] /= norm
    out[1] /= norm
    out[2] /= norm


@nb.njit(cache=True, nogil=True)
def _random_init(rays, dmin, dmax, key, depth, normal):
    h, w = depth.shape
    st = np.zeros(1, dtype=np.uint64)
    n = np.empty(3)
    for y in range(h):
        for x in range(w):
            _seed_pixel(st, key, np.uint64(y * w + x))
            depth[y, x] = dmin + (dmax - dmin) * _uniform(st)
            _random_normal(st, rays[y, x, 0], rays[y, x, 1], rays[y, x, 2], n)
            normal[y, x, 0] = n[0]
            normal[y, x, 1] = n[1]
            normal[y, x, 2] = n[2]


# ---------------------------------------------------------------------------
# hypotheses


@nb.njit(cache=True, nogil=True)
def _fill_hypotheses(
    st, x, y, rays, depth, normal, has_prev, px, py,
    dmin, dmax, pert_d, pert_n,
    planar_d, planar_n, planar_on,
    hd, hn, present,
):
    """Write the candidate planes of pixel (x, y) into ``hd``/``hn``.

    Slots follow ``KINDS``; ``present`` marks which slots exist. Random draws
    happen in a fixed order regardless of which slots exist so every stream
    stays aligned.
    """
    rx = rays[y, x, 0]
    ry = rays[y, x, 1]
    rz = rays[y, x, 2]
    d0 = depth[y, x]
    n0 = normal[y, x]
    for k in range(N_KINDS):
        present[k] = False
    # current
    hd[0] = d0
    hn[0, :] = n0
    present[0] = True
    # propagated: the predecessor's plane re-anchored at this pixel
    if has_prev:
        nprev = normal[py, px]
        delta = depth[py, px] * (nprev[0] * rays[py, px, 0] + nprev[1] * rays[py, px, 1] + nprev[2] * rays[py, px, 2])
        denom = nprev[0] * rx + nprev[1] * ry + nprev[2] * rz
        hd[1] = delta / denom if abs(denom) >= PARALLEL_EPS else 0.0
        hn[1, :] = nprev
        present[1] = True
    tmp = np.empty(3)
    # random depth
    hd[2] = dmin + (dmax - dmin) * _uniform(st)
    hn[2, :] = n0
    present[2] = True
    # random normal
    _random_normal(st, rx, ry, rz, tmp)
    hd[3] = d0
    hn[3, :] = tmp
    present[3] = True
    # random both
    hd[4] = dmin + (dmax - dmin) * _uniform(st)
    _random_normal(st, rx, ry, rz, tmp)
    hn[4, :] = tmp
    present[4] = True
    # perturbed depth
    hd[5] = d0 * (1.0 + pert_d * (2.0 * _uniform(st) - 1.0))
    hn[5, :] = n0
    present[5] = True
    # perturbed normal
    _perturb_normal(st, n0, pert_n, tmp)
    hd[6] = d0
    hn[6, :] = tmp
    present[6] = True
    for lvl in range(2):
        if planar_on[lvl] and planar_d[lvl, y, x] > 0.0:
            hd[PLANAR_FIRST + lvl] = planar_d[lvl, y, x]
            hn[PLANAR_FIRST + lvl, :] = planar_n[lvl, y, x]
            present[PLANAR_FIRST + lvl] = True


@nb.njit(cache=True, nogil=True)
def _warp_matrix(A, b, Kr_inv, n0, n1, n2, delta, out):
    """Plane homography ``A + b c^T`` with ``c = Kr_inv^T n / delta``."""
    for j in range(3):
        c = (n0 * Kr_inv[0, j] + n1 * Kr_inv[1, j] + n2 * Kr_inv[2, j]) / delta
        for i in range(3):
            out[i, j] = A[i, j] + b[i] * c


@nb.njit(cache=True, nogil=True)
def _plane_cost(
    x, y, d, n, rx, ry, rz, subset, n_sub,
    nwin, qx, qy, val, wts,
    src_gray, src_w, src_h, A, b, Kr_inv, Kr,
    use_geom, src_depth, Ks_inv, Rrel, trel, psi, lam,
    wp, wg, dmin, dmax, Hbuf,
):
    """Mean weighted cost of plane (d, n) over the sampled sources; inf if invalid."""
    if not (d >= dmin and d <= dmax):
        return np.inf
    nr = n[0] * rx + n[1] * ry + n[2] * rz
    if nr > -PARALLEL_EPS:
        return np.inf
    delta = d * nr
    total = 0.0
    for j in range(n_sub):
        m = subset[j]
        _warp_matrix(A[m], b[m], Kr_inv, n[0], n[1], n[2], delta, Hbuf)
        if Hbuf[2, 0] * x + Hbuf[2, 1] * y + Hbuf[2, 2] <= 0.0:
            return np.inf
        rho = ncc_window_nb(nwin, qx, qy, val, wts, src_gray[m], src_w[m], src_h[m], Hbuf)
        c = wp * (1.0 - rho)
        if use_geom:
            c += lam * wg * geometric_cost_nb(
                float(x), float(y), Hbuf, src_depth[m], src_w[m], src_h[m], Ks_inv[m], Rrel[m], trel[m], Kr, psi
            )
        total += c
    return total / n_sub


@nb.njit(cache=True, nogil=True)
def _select(costs, present, planar_tie):
    """Argmin with ties kept by ``current`` then list order.

    With ``planar_tie`` an exact tie between a planar entry and a baseline
    best goes to the planar entry.
    """
    best = 0
    bc = costs[0]
    for k in range(1, N_KINDS):
        if not present[k]:
            continue
        c = costs[k]
        if c < bc or (planar_tie and k >= PLANAR_FIRST and best < PLANAR_FIRST and c == bc and c < np.inf):
            best = k
            bc = c
    return best


# ---------------------------------------------------------------------------
# one sweep


@nb.njit(cache=True, nogil=True)
def _sweep(
    direction, key,
    gray, rays, Kr, Kr_inv, f_ref,
    src_gray, src_w, src_h, A, b, Ks_inv, Rrel, trel, centers, f_src,
    use_geom, src_depth, psi, lam,
    depth, normal, q, tex, use_tw,
    planar_d, planar_n, planar_on, planar_tie,
    half, spatial, inv2sc2, sigma_rho, u_occ, gamma, subset_size,
    dmin, dmax, pert_d, pert_n,
    par_peak, par_sigma, par_max, res_band,
):
    h, w = depth.shape
    M = src_gray.shape[0]
    horizontal = direction == 0 or direction == 2
    forward = direction == 0 or direction == 1
    n_lines = h if horizontal else w
    L = w if horizontal else h

    size = (2 * half + 1) ** 2
    qx = np.empty(size)
    qy = np.empty(size)
    val = np.empty(size)
    wts = np.empty(size)
    hd = np.empty(N_KINDS)
    hn = np.empty((N_KINDS, 3))
    present = np.zeros(N_KINDS, dtype=np.bool_)
    costs = np.empty(N_KINDS)
    Hbuf = np.empty((3, 3))
    probs = np.empty(M)
    uni = np.empty(M)
    subset = np.empty(M, dtype=np.int64)
    X = np.empty(3)
    e1 = np.empty((L, M))
    col = np.empty(L)
    e0 = np.full(L, u_occ)
    prior1 = np.empty(M)
    xs = np.empty(L, dtype=np.int64)
    ys = np.empty(L, dtype=np.int64)
    st = np.zeros(1, dtype=np.uint64)
    inv2sr = 1.0 / (2.0 * sigma_rho * sigma_rho)

    for line in range(n_lines):
        for i in range(L):
            p = i if forward else L - 1 - i
            if horizontal:
                xs[i] = p
                ys[i] = line
            else:
                xs[i] = line
                ys[i] = p
        for m in range(M):
            prior1[m] = q[m, ys[0], xs[0]]

        for i in range(L):
            x = xs[i]
            y = ys[i]
            _seed_pixel(st, key, np.uint64(y * w + x))
            rx = rays[y, x, 0]
            ry = rays[y, x, 1]
            rz = rays[y, x, 2]

            # source subset from visibility and geometric priors of the current estimate
            d0 = depth[y, x]
            X[0] = d0 * rx
            X[1] = d0 * ry
            X[2] = d0 * rz
            prior_weights_nb(X, normal[y, x], centers, f_ref, f_src, par_peak, par_sigma, par_max, res_band, probs)
            for m in range(M):
                probs[m] *= q[m, y, x]
                uni[m] = _uniform(st)
            n_sub = sample_without_replacement_nb(probs, subset_size, uni, subset)

            px = x
            py = y
            if i > 0:
                px = xs[i - 1]
                py = ys[i - 1]
            _fill_hypotheses(
                st, x, y, rays, depth, normal, i > 0, px, py,
                dmin, dmax, pert_d, pert_n, planar_d, planar_n, planar_on, hd, hn, present,
            )
            nwin = ref_window_nb(gray, x, y, half, spatial, inv2sc2, qx, qy, val, wts)
            if use_tw:
                t = tex[y, x]
                w_plus = 0.8 + 0.2 * t
                w_minus = 1.0 - 0.2 * t
            else:
                w_plus = 1.0
                w_minus = 1.0
            for k in range(N_KINDS):
                if not present[k]:
                    costs[k] = np.inf
                    continue
                wp = w_minus
                wg = w_plus
                if k >= PLANAR_FIRST:
                    wp = w_plus
                    wg = w_minus
                costs[k] = _plane_cost(
                    x, y, hd[k], hn[k], rx, ry, rz, subset, n_sub,
                    nwin, qx, qy, val, wts,
                    src_gray, src_w, src_h, A, b, Kr_inv, Kr,
                    use_geom, src_depth, Ks_inv, Rrel, trel, psi, lam,
                    wp, wg, dmin, dmax, Hbuf,
                )
            k = _select(costs, present, planar_tie)
            if k != 0:
                depth[y, x] = hd[k]
                normal[y, x, 0] = hn[k, 0]
                normal[y, x, 1] = hn[k, 1]
                normal[y, x, 2] = hn[k, 2]

            # visible-branch emissions of the kept plane for every source
            n = normal[y, x]
            nr = n[0] * rx + n[1] * ry + n[2] * rz
            delta = depth[y, x] * nr
            for m in range(M):
                rho = -1.0
                if abs(nr) >= PARALLEL_EPS:
                    _warp_matrix(A[m], b[m], Kr_inv, n[0], n[1], n[2], delta, Hbuf)
                    if Hbuf[2, 0] * x + Hbuf[2, 1] * y + Hbuf[2, 2] > 0.0:
                        rho = ncc_window_nb(nwin, qx, qy, val, wts, src_gray[m], src_w[m], src_h[m], Hbuf)
                e1[i, m] = math.exp(-(1.0 - rho) * (1.0 - rho) * inv2sr)

        for m in range(M):
            forward_backward_nb(e1[:, m].copy(), e0, gamma, prior1[m], col)
            for i in range(L):
                q[m, ys[i], xs[i]] = col[i]


# ---------------------------------------------------------------------------
# python-level building blocks


def _pack_sources(ref: CameraView, sources: list[CameraView], source_maps):
    M = len(sources)
    hs = max(s.height for s in sources)
    ws = max(s.width for s in sources)
    src_gray = np.zeros((M, hs, ws))
    src_depth = np.zeros((M, hs, ws))
    A = np.empty((M, 3, 3))
    b = np.empty((M, 3))
    Ks_inv = np.empty((M, 3, 3))
    Rrel = np.empty((M, 3, 3))
    trel = np.empty((M, 3))
    centers = np.empty((M, 3))
    f_src = np.empty(M)
    for m, s in enumerate(sources):
        src_gray[m, : s.height, : s.width] = s.gray
        if source_maps is not None and source_maps[m] is not None:
            src_depth[m, : s.height, : s.width] = source_maps[m].depth
        R, t = relative_pose(ref, s)
        A[m] = s.K @ R @ ref.K_inv
        b[m] = s.K @ t
        Ks_inv[m] = s.K_inv
        Rrel[m] = R
        trel[m] = t
        centers[m] = -R.T @ t
        f_src[m] = 0.5 * (s.fx + s.fy)
    return dict(
        src_gray=src_gray, src_w=np.array([s.width for s in sources], dtype=np.int64),
        src_h=np.array([s.height for s in sources], dtype=np.int64), A=A, b=b, Ks_inv=Ks_inv,
        Rrel=Rrel, trel=trel, centers=centers, f_src=f_src, src_depth=src_depth,
    )


def _u64(x: int) -> np.uint64:
    return np.uint64(int(x) & 0xFFFFFFFFFFFFFFFF)


def build_hypotheses(
    pixel,
    ref: CameraView,
    state: DepthNormalMap,
    rng: np.random.Generator,
    depth_range: tuple[float, float],
    config: PatchMatchConfig = PatchMatchConfig(),
    prev_pixel=None,
    planar_priors: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
) -> HypothesisSet:
    """Candidate planes for ``pixel`` in list order.

    ``prev_pixel`` is the predecessor on the sweep line (None at the start of
    a line). ``planar_priors`` maps ``"fine"``/``"coarse"`` to per-pixel
    (depth, normal) layers; a zero depth means no prior at that pixel.
    """
    x, y = int(round(pixel[0])), int(round(pixel[1]))
    h, w = ref.height, ref.width
    depth = state.depth.astype(np.float64)
    normal = state.normal.astype(np.float64)
    planar_d = np.zeros((2, h, w))
    planar_n = np.zeros((2, h, w, 3))
    planar_on = np.zeros(2, dtype=np.bool_)
    for lvl, name in enumerate(("fine", "coarse")):
        if planar_priors and name in planar_priors:
            planar_d[lvl], planar_n[lvl] = planar_priors[name]
            planar_on[lvl] = True
    st = np.array([rng.integers(0, 2**63, dtype=np.uint64)], dtype=np.uint64)
    hd = np.empty(N_KINDS)
    hn = np.empty((N_KINDS, 3))
    present = np.zeros(N_KINDS, dtype=np.bool_)
    px, py = (x, y) if prev_pixel is None else (int(prev_pixel[0]), int(prev_pixel[1]))
    _fill_hypotheses(
        st, x, y, pixel_rays(ref), depth, normal, prev_pixel is not None, px, py,
        float(depth_range[0]), float(depth_range[1]), config.perturb_depth_frac,
        math.radians(config.perturb_normal_deg), planar_d, planar_n, planar_on, hd, hn, present,
    )
    entries = [
        (LocalPlane(hn[k].copy(), float(hd[k]), (float(x), float(y))), KINDS[k]) for k in range(N_KINDS) if present[k]
    ]
    return HypothesisSet(entries)


def evaluate_and_select(
    pixel,
    hypotheses: HypothesisSet,
    ref: CameraView,
    sources: list[CameraView],
    subset: list[int],
    depth_range: tuple[float, float],
    t_x: float,
    config: PatchMatchConfig = PatchMatchConfig(),
    source_maps: list[DepthNormalMap] | None = None,
    use_geom: bool = False,
) -> tuple[LocalPlane, str, np.ndarray]:
    """Score every hypothesis on the sources in ``subset`` and return the winner.

    Returns ``(plane, kind, costs)`` where ``costs`` follows the hypothesis
    order (inf for invalid entries). If every entry is invalid the current
    one is kept.
    """
    if not subset:
        raise NoSources("the source subset is empty")
    x, y = int(round(pixel[0])), int(round(pixel[1]))
    pk = _pack_sources(ref, sources, source_maps)
    win = config.window
    size = (2 * win.half_size + 1) ** 2
    qx, qy, val, wts = (np.empty(size) for _ in range(4))
    nwin = ref_window_nb(ref.gray, x, y, win.half_size, win.spatial_table(), win.inv_two_sigma_color_sq, qx, qy, val, wts)
    r = pixel_ray(ref, (x, y))
    if config.enable_texture_weighting:
        w_plus, w_minus = 0.8 + 0.2 * t_x, 1.0 - 0.2 * t_x
    else:
        w_plus = w_minus = 1.0
    sub = np.asarray(subset, dtype=np.int64)
    costs = np.empty(len(hypotheses))
    present = np.zeros(N_KINDS, dtype=np.bool_)
    slot_costs = np.full(N_KINDS, np.inf)
    Hbuf = np.empty((3, 3))
    for i, (plane, kind) in enumerate(hypotheses.entries):
        planar = kind.startswith("planar")
        costs[i] = _plane_cost(
            x, y, plane.depth, np.asarray(plane.normal, dtype=np.float64), r[0], r[1], r[2], sub, len(sub),
            nwin, qx, qy, val, wts, pk["src_gray"], pk["src_w"], pk["src_h"], pk["A"], pk["b"], ref.K_inv, ref.K,
            use_geom and source_maps is not None, pk["src_depth"], pk["Ks_inv"], pk["Rrel"], pk["trel"],
            config.psi_max, config.lambda_geom,
            w_plus if planar else w_minus, w_minus if planar else w_plus,
            float(depth_range[0]), float(depth_range[1]), Hbuf,
        )
        slot = KINDS.index(kind)
        present[slot] = True
        slot_costs[slot] = costs[i]
    tie = config.planar_tie_preference and config.enable_texture_weighting
    slot = _select(slot_costs, present, tie)
    i = hypotheses.kinds.index(KINDS[slot])
    plane, kind = hypotheses.entries[i]
    return plane, kind, costs


def random_initialization(ref: CameraView, depth_range, seed: int, stream: int = 0, rays=None) -> DepthNormalMap:
    """Per-pixel uniform depth in ``depth_range`` and a random camera-facing normal."""
    if rays is None:
        rays = pixel_rays(ref)
    depth = np.empty(ref.shape)
    normal = np.empty(ref.shape + (3,))
    key = np.uint64(_stream_key(_u64(seed), _u64(ref.view_id), _u64(0xFFFF0000 + stream)))
    _random_init(rays, float(depth_range[0]), float(depth_range[1]), key, depth, normal)
    return DepthNormalMap(depth, normal)


def run_patchmatch(
    ref: CameraView,
    sources: list[CameraView],
    config: PatchMatchConfig,
    depth_range: tuple[float, float],
    scene_size: float,
    *,
    init: DepthNormalMap | None = None,
    state: ViewSelectionState | None = None,
    source_maps: list[DepthNormalMap] | None = None,
    segmentations: dict | None = None,
    stream: int = 0,
) -> tuple[DepthNormalMap, ViewSelectionState]:
    """Estimate the depth/normal map of ``ref`` against ``sources``.

    Args:
        ref: Reference view.
        sources: Source views; their order fixes the rows of ``q``.
        config: Optimisation settings (validated here).
        depth_range: ``(d_min, d_max)`` bounds for every hypothesis.
        scene_size: Scene extent, used by the speckle filter and RANSAC.
        init: Starting estimate; random when omitted.
        state: Starting visibility; 0.5 everywhere when omitted.
        source_maps: Per-source estimates enabling the geometric term in
            the later iterations.
        segmentations: Cached superpixel levels of ``ref``.
        stream: Extra key separating the random streams of outer rounds.

    Returns:
        The final map (float32) and visibility state.
    """
    config.validate()
    if not sources:
        raise NoSources(f"view {ref.view_id} has no source views")
    dmin, dmax = float(depth_range[0]), float(depth_range[1])
    if not 0 < dmin < dmax:
        raise ConfigError(f"invalid depth range {depth_range}")
    h, w = ref.shape
    M = len(sources)
    rays = pixel_rays(ref)
    if init is None:
        init = random_initialization(ref, depth_range, config.seed, stream, rays)
    depth = init.depth.astype(np.float64)
    normal = init.normal.astype(np.float64)
    # invalid pixels of a supplied map restart from random guesses
    bad = ~(depth > 0)
    if bad.any():
        rnd = random_initialization(ref, depth_range, config.seed, stream, rays)
        depth[bad] = rnd.depth[bad]
        normal[bad] = rnd.normal[bad]
    vc = config.views
    q = state.q.astype(np.float64).copy() if state is not None else np.full((M, h, w), 0.5)
    if q.shape != (M, h, w):
        raise ConfigError(f"visibility state shape {q.shape} does not match {(M, h, w)}")
    tex = compute_textureness(ref.gray).t
    pk = _pack_sources(ref, sources, source_maps)
    win = config.window
    u_occ = uniform_density(vc.u_anchor_rho, win.sigma_rho)
    planar_on = np.array([config.enable_planar_priors and config.prior.enable_fine,
                          config.enable_planar_priors and config.prior.enable_coarse])
    if planar_on.any() and segmentations is None:
        segmentations = segment_levels(ref.rgb, config.prior)
    planar_d = np.zeros((2, h, w))
    planar_n = np.zeros((2, h, w, 3))
    tie = config.planar_tie_preference and config.enable_texture_weighting
    schedule = SweepSchedule(config.iterations)
    seed, view = _u64(config.seed), _u64(ref.view_id)
    for it in range(config.iterations):
        if planar_on.any() and it >= 1:
            pri = build_planar_priors(
                ref, DepthNormalMap(depth, normal), config.prior, depth_range, scene_size,
                [config.seed, ref.view_id, stream, it], segmentations, rays, tex,
            )
            for lvl, name in enumerate(("fine", "coarse")):
                if name in pri.depth:
                    planar_d[lvl], planar_n[lvl] = pri.depth[name], pri.normal[name]
        use_geom = source_maps is not None and (it + 1) > config.iterations / 2
        key = np.uint64(_stream_key(seed, view, _u64((stream << 16) + it)))
        _sweep(
            schedule.direction(it), key,
            ref.gray, rays, ref.K, ref.K_inv, 0.5 * (ref.fx + ref.fy),
            pk["src_gray"], pk["src_w"], pk["src_h"], pk["A"], pk["b"], pk["Ks_inv"], pk["Rrel"], pk["trel"],
            pk["centers"], pk["f_src"],
            use_geom, pk["src_depth"], config.psi_max, config.lambda_geom,
            depth, normal, q, tex, config.enable_texture_weighting,
            planar_d, planar_n, planar_on & (it >= 1), tie,
            win.half_size, win.spatial_table(), win.inv_two_sigma_color_sq, win.sigma_rho, u_occ, vc.gamma,
            vc.subset_size, dmin, dmax, config.perturb_depth_frac, math.radians(config.perturb_normal_deg),
            math.radians(vc.parallax_peak_deg), math.radians(vc.parallax_sigma_deg),
            math.radians(vc.parallax_max_deg), vc.resolution_band,
        )
        log.debug("view %d iteration %d (%s) done", ref.view_id, it + 1, DIRECTIONS[schedule.direction(it)])
    return DepthNormalMap(depth, normal), ViewSelectionState(q, vc.gamma)

"""Per-pixel source visibility and source-subset sampling.

Visibility of each source is a binary hidden state along every sweep line.
Its posterior is obtained with a scaled two-state forward-backward pass whose
emissions are the photometric density (visible) and a constant density
(occluded), and whose transitions keep the state with probability ``gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import NoSources
from .geometry import LocalPlane, pixel_ray, relative_pose
from .photoconsistency import photo_density
from .scene_io import CameraView


@dataclass
class ViewSelectionState:
    """Visibility probabilities ``q`` with shape (n_sources, H, W)."""

    q: np.ndarray
    transition_stay: float = 0.999

    @classmethod
    def initial(cls, n_sources: int, height: int, width: int, transition_stay: float = 0.999):
        return cls(np.full((n_sources, height, width), 0.5), transition_stay)


@dataclass(frozen=True)
class ViewPriors:
    parallax_peak_deg: float = 15.0
    parallax_sigma_deg: float = 10.0
    parallax_max_deg: float = 90.0
    resolution_band: float = 2.0


def uniform_density(u_anchor_rho: float, sigma_rho: float) -> float:
    """Occluded-branch density, pinned to the visible density at ``u_anchor_rho``."""
    return float(photo_density(u_anchor_rho, sigma_rho))


@nb.njit(cache=True, nogil=True)
def forward_backward_nb(e1, e0, gamma, prior1, out):
    """Posterior P(Z=1) along a line; ``prior1`` is P(Z=1) before the first pixel."""
    L = e1.shape[0]
    a0 = np.empty(L)
    a1 = np.empty(L)
    p0 = 1.0 - prior1
    p1 = prior1
    for i in range(L):
        if i > 0:
            p0 = a0[i - 1] * gamma + a1[i - 1] * (1.0 - gamma)
            p1 = a0[i - 1] * (1.0 - gamma) + a1[i - 1] * gamma
        x0 = p0 * e0[i]
        x1 = p1 * e1[i]
        s = x0 + x1
        a0[i] = x0 / s
        a1[i] = x1 / s
    b0 = 1.0
    b1 = 1.0
    for i in range(L - 1, -1, -1):
        if i < L - 1:
            n0 = gamma * e0[i + 1] * b0 + (1.0 - gamma) * e1[i + 1] * b1
            n1 = (1.0 - gamma) * e0[i + 1] * b0 + gamma * e1[i + 1] * b1
            s = n0 + n1
            b0 = n0 / s
            b1 = n1 / s
        g0 = a0[i] * b0
        g1 = a1[i] * b1
        out[i] = g1 / (g0 + g1)


def forward_backward(e1, e0, gamma: float, prior1: float = 0.5) -> np.ndarray:
    e1 = np.asarray(e1, dtype=np.float64)
    e0 = np.broadcast_to(np.asarray(e0, dtype=np.float64), e1.shape).copy()
    out = np.empty_like(e1)
    forward_backward_nb(e1, e0, float(gamma), float(prior1), out)
    return out


def update_visibility_line(densities, u: float, gamma: float, prior=None) -> np.ndarray:
    """Smoothed visibility for one line.

    Args:
        densities: (L, M) visible-branch densities of the current estimates.
        u: occluded-branch density.
        gamma: probability that visibility keeps its value between neighbours.
        prior: (M,) P(Z=1) entering the line, typically the previous
            iteration's q at its first pixel; 0.5 when omitted.

    Returns:
        (L, M) posteriors.
    """
    densities = np.asarray(densities, dtype=np.float64)
    L, M = densities.shape
    prior = np.full(M, 0.5) if prior is None else np.asarray(prior, dtype=np.float64)
    out = np.empty((L, M))
    e0 = np.full(L, u)
    for m in range(M):
        col = np.empty(L)
        forward_backward_nb(np.ascontiguousarray(densities[:, m]), e0, gamma, prior[m], col)
        out[:, m] = col
    return out


@nb.njit(cache=True, nogil=True)
def prior_weights_nb(X, n, src_centers, f_ref, f_src, peak, sigma, max_angle, band, out):
    """Parallax, resolution and front-facing weights for a point ``X`` (ref frame)."""
    dref = math.sqrt(X[0] * X[0] + X[1] * X[1] + X[2] * X[2])
    for m in range(src_centers.shape[0]):
        b0 = src_centers[m, 0] - X[0]
        b1 = src_centers[m, 1] - X[1]
        b2 = src_centers[m, 2] - X[2]
        dsrc = math.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
        if dsrc <= 0.0 or dref <= 0.0:
            out[m] = 0.0
            continue
        cosang = (-X[0] * b0 - X[1] * b1 - X[2] * b2) / (dref * dsrc)
        ang = math.acos(min(1.0, max(-1.0, cosang)))
        if ang > max_angle:
            w_par = 0.0
        else:
            w_par = math.exp(-((ang - peak) ** 2) / (2.0 * sigma * sigma))
        ratio = (dsrc / f_src[m]) / (dref / f_ref)
        if ratio < 1.0:
            ratio = 1.0 / ratio
        w_res = 1.0 if ratio <= band else max(0.0, 1.0 - (ratio - band) / band)
        # viewing ray of the source runs from its centre to X, i.e. -b
        w_front = max(0.0, (n[0] * b0 + n[1] * b1 + n[2] * b2) / dsrc)
        out[m] = w_par * w_res * w_front


@nb.njit(cache=True, nogil=True)
def sample_without_replacement_nb(probs, k, uniforms, out):
    """Draw up to ``k`` distinct indices proportional to ``probs``; returns the count.

    Falls back to uniform choice when every probability is zero. ``uniforms``
    supplies one U[0,1) variate per draw.
    """
    M = probs.shape[0]
    p = probs.copy()
    total = 0.0
    for m in range(M):
        total += p[m]
    if total <= 0.0:
        for m in range(M):
            p[m] = 1.0
    count = 0
    for j in range(min(k, M)):
        total = 0.0
        for m in range(M):
            total += p[m]
        if total <= 0.0:
            break
        target = uniforms[j] * total
        acc = 0.0
        pick = -1
        for m in range(M):
            if p[m] <= 0.0:
                continue
            acc += p[m]
            pick = m
            if target < acc:
                break
        out[count] = pick
        count += 1
        p[pick] = 0.0
    return count


def source_priors(ref: CameraView, sources: list[CameraView], plane: LocalPlane, priors: ViewPriors = ViewPriors()) -> np.ndarray:
    X = plane.depth * pixel_ray(ref, plane.pixel)
    centers = np.array([-relative_pose(ref, s)[0].T @ relative_pose(ref, s)[1] for s in sources])
    f_src = np.array([0.5 * (s.fx + s.fy) for s in sources])
    out = np.empty(len(sources))
    prior_weights_nb(
        X, np.asarray(plane.normal, dtype=np.float64), centers, 0.5 * (ref.fx + ref.fy), f_src,
        math.radians(priors.parallax_peak_deg), math.radians(priors.parallax_sigma_deg),
        math.radians(priors.parallax_max_deg), priors.resolution_band, out,
    )
    return out


def sample_source_subset(
    pixel,
    state: ViewSelectionState,
    ref: CameraView,
    sources: list[CameraView],
    plane: LocalPlane,
    subset_size: int,
    rng: np.random.Generator,
    priors: ViewPriors = ViewPriors(),
) -> list[int]:
    """Indices into ``sources`` drawn without replacement with P(m) ~ q * priors."""
    if not sources:
        raise NoSources("at least one source view is required")
    px, py = int(round(pixel[0])), int(round(pixel[1]))
    probs = state.q[:, py, px] * source_priors(ref, sources, plane, priors)
    out = np.empty(len(sources), dtype=np.int64)
    count = sample_without_replacement_nb(probs, subset_size, rng.random(len(sources)), out)
    return [int(i) for i in out[:count]]

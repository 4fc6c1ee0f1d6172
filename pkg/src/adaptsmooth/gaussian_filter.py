"""Truncated, renormalized discrete 3D Gaussian filters.

The filter is isotropic, sampled on an integer grid of radius
``r = floor((t * sigma_f + 0.5) / 2)`` and renormalized to sum 1.  Because
the raw sample at (x, y, z) depends only on the integer squared radius
x^2 + y^2 + z^2, weights are built through a lookup over squared radii: all
48 octant/permutation symmetries then hold to the exact floating-point value.

Each filter also carries the analytic derivative of its weights with respect
to sigma_f at fixed support, which is what backpropagation into the
width-predicting network consumes.  At radius 0 the filter degenerates to the
identity cell [1.0]; renormalization cancels sigma_f there, so the derivative
is identically zero and gradient flow is restored only by the stochastic
width bump during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.354820045...

DEFAULT_TRUNCATION = 4.0


@dataclass(frozen=True)
class GaussianFilter:
    sigma_f: float
    truncation_t: float
    radius: int
    weights: np.ndarray          # (2r+1, 2r+1, 2r+1), sums to 1
    d_weights_d_sigma: np.ndarray  # same shape, sums to 0
    profile_1d: np.ndarray       # (2r+1,) renormalized 1D profile
    d_profile_1d: np.ndarray     # (2r+1,) its sigma_f derivative

    @property
    def side(self) -> int:
        return 2 * self.radius + 1


def filter_radius(sigma_f: float, t: float) -> int:
    return int(math.floor((t * sigma_f + 0.5) / 2.0))


def build_filter(sigma_f: float, t: float = DEFAULT_TRUNCATION) -> GaussianFilter:
    if sigma_f <= 0:
        raise DataError(f"sigma_f must be positive, got {sigma_f}")
    if t <= 0:
        raise DataError(f"truncation t must be positive, got {t}")
    r = filter_radius(sigma_f, t)
    if r == 0:
        one = np.ones((1, 1, 1))
        zero = np.zeros((1, 1, 1))
        return GaussianFilter(sigma_f, t, 0, one, zero,
                              np.ones(1), np.zeros(1))

    coords = np.arange(-r, r + 1)
    sq = coords ** 2
    s3 = sq[:, None, None] + sq[None, :, None] + sq[None, None, :]

    # Raw samples keyed by integer squared radius, so symmetric cells share
    # the exact same float.  The 1/(sqrt(2pi) sigma)^3 prefactor cancels in
    # the renormalization and in the quotient-rule derivative.
    inv2s2 = 1.0 / (2.0 * sigma_f * sigma_f)
    max_s = 3 * r * r
    g_by_s = np.exp(-np.arange(max_s + 1) * inv2s2)
    g = g_by_s[s3]
    gp = g * (s3 / sigma_f ** 3)  # d raw/d sigma_f, prefactor dropped

    total = g.sum()
    total_p = gp.sum()
    weights = g / total
    d_weights = (gp * total - g * total_p) / (total * total)

    g1 = np.exp(-sq * inv2s2)
    g1p = g1 * (sq / sigma_f ** 3)
    s1 = g1.sum()
    s1p = g1p.sum()
    profile = g1 / s1
    d_profile = (g1p * s1 - g1 * s1p) / (s1 * s1)

    return GaussianFilter(sigma_f, t, r, weights, d_weights, profile, d_profile)


def derivative_of_normalized_gaussian(f: GaussianFilter) -> np.ndarray:
    """Per-cell d(weights)/d(sigma_f) at fixed support."""
    if f.radius < 1:
        raise DataError("derivative undefined for the degenerate single-cell filter")
    return f.d_weights_d_sigma


def single_cell_threshold(t: float) -> float:
    """sigma_f below this value produces the degenerate 1x1x1 filter."""
    return 1.5 / t


def apply_degenerate_policy(sigma_f: float, t: float, p: float, training: bool,
                            rng) -> float:
    """Stochastically bump sigma_f by 1.0 when it falls in the degenerate regime.

    Fires only in training mode and only when sigma_f < 1.5/t; the bump has
    pass-through derivative 1 with respect to sigma_f.  Evaluation mode never
    bumps, keeping inference deterministic.
    """
    if not 0.0 <= p <= 1.0:
        raise DataError(f"bump probability must be in [0, 1], got {p}")
    if not training or sigma_f >= single_cell_threshold(t):
        return sigma_f
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if rng.random() < p:
        return sigma_f + 1.0
    return sigma_f


def sigma_to_fwhm_mm(sigma_f: float, voxel_size_mm: float) -> float:
    if sigma_f <= 0 or voxel_size_mm <= 0:
        raise DataError("sigma_f and voxel size must be positive")
    return FWHM_PER_SIGMA * sigma_f * voxel_size_mm


def fwhm_mm_to_sigma(fwhm_mm: float, voxel_size_mm: float) -> float:
    if fwhm_mm <= 0 or voxel_size_mm <= 0:
        raise DataError("FWHM and voxel size must be positive")
    return fwhm_mm / (FWHM_PER_SIGMA * voxel_size_mm)


def dump_filter(f: GaussianFilter) -> str:
    """Text dump: one header line `sigma_f t radius`, then x-fastest weights."""
    lines = [f"{f.sigma_f:.17g} {f.truncation_t:.17g} {f.radius}"]
    flat = np.transpose(f.weights, (2, 0, 1)).ravel()
    lines.extend(f"{w:.17g}" for w in flat)
    return "\n".join(lines) + "\n"

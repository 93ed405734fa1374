"""Gaussian RBF kernels, finite RKHS expansions, and the normalizability rule."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class GrowthProfile:
    """Diagonal growth bound ``k(t, t) <= L_k |t|^xi + C_k``."""

    L_k: float
    C_k: float
    xi: float


@dataclass(frozen=True)
class GaussianRBF:
    """``k(x, y) = exp(-(x - y)^2 / (2 bandwidth^2))``."""

    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ArgumentError("bandwidth must be positive")

    def __call__(self, x, y):
        d = np.subtract.outer(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return np.exp(-0.5 * (d / self.bandwidth) ** 2)

    def gram(self, points):
        return self(points, points)

    def growth_profile(self):
        # Bounded kernel: k(t, t) = 1.
        return GrowthProfile(L_k=0.0, C_k=1.0, xi=0.0)


@dataclass(frozen=True, eq=False)
class RkhsFunction:
    """``f(t) = sum_i coeffs[i] * k(t, points[i])``."""

    coeffs: np.ndarray
    points: np.ndarray
    kernel: GaussianRBF

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        p = np.atleast_1d(np.asarray(self.points, dtype=float))
        if c.ndim != 1 or c.shape != p.shape or c.size < 1:
            raise ArgumentError("coeffs and points must be 1-D arrays of equal length >= 1")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "points", p)

    def __call__(self, t):
        return self.kernel(t, self.points) @ self.coeffs

    def with_coeffs(self, coeffs):
        return RkhsFunction(coeffs, self.points, self.kernel)

    def sections(self, t):
        """Kernel sections ``k(t, t_i)`` as an array of shape ``t.shape + (I,)``."""
        return self.kernel(t, self.points)


def rkhs_eval(f, t):
    """Evaluate an :class:`RkhsFunction` at location(s) ``t``."""
    out = f(t)
    return float(out) if np.ndim(out) == 0 else out


def default_inducing_points(count, domain):
    """``count`` equally spaced inducing points covering ``domain``."""
    if int(count) < 1:
        raise ArgumentError("need at least one inducing point")
    lo, hi = domain
    if count == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, int(count))


def default_bandwidth(count, domain):
    """Bandwidth ``(hi - lo) / (10 * count)``: 0.01 for ten points on [0, 1]."""
    lo, hi = domain
    return (hi - lo) / (10.0 * int(count))


def check_normalizable(growth, tail):
    """Whether ``exp(f)`` is Q-integrable for every ``f`` in the RKHS.

    True for bounded kernels (``xi == 0``) under any base measure, otherwise
    iff the tail exponent strictly exceeds half the growth exponent. The
    strict inequality means ``xi = 4`` is *not* certified for sub-Gaussian
    tails (``eta = 2``).
    """
    if growth.xi == 0:
        return True
    return bool(tail.eta > growth.xi / 2.0)


def rkhs_sup_bound(f):
    """``||coeffs||_1``: bounds ``|f(t)|`` for any kernel with ``k <= 1``."""
    return float(np.sum(np.abs(f.coeffs)))


def gaussian_rbf_for(count, domain, bandwidth=None):
    """Kernel and inducing points with the package defaults."""
    points = default_inducing_points(count, domain)
    bw = default_bandwidth(count, domain) if bandwidth is None else float(bandwidth)
    if not math.isfinite(bw):
        raise ArgumentError("bandwidth must be finite")
    return GaussianRBF(bw), points

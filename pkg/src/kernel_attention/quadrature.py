"""Composite Gauss-Legendre quadrature against a base measure on the line.

A :class:`QuadratureRule` integrates with respect to the base measure ``Q``:
its weights are the Lebesgue Gauss-Legendre weights multiplied by the base
density ``q0`` at the nodes, so ``sum(w * f(nodes))`` approximates
``int f dQ`` over the (truncated) base domain.

Panels are described by their edges. Splitting a rule at a point inserts a
new edge into the panel containing it, which is how kinks at the support
boundary of sparse densities are kept out of panel interiors.
"""

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import special

from .deformed import alpha_value
from .errors import ArgumentError, IntegrationWarning, NumericError

GAUSSIAN_TRUNCATION = 8.0
MAX_PANELS = 2**14
SUPPORT_XTOL = 1e-10


@dataclass(frozen=True)
class TailProfile:
    """Tail bound ``P(|T| >= z) <= C_q exp(-v z^eta)`` of the base measure."""

    C_q: float
    v: float
    eta: float


@dataclass(frozen=True)
class BaseDensity:
    """The base measure ``Q``: a Gaussian (truncated for quadrature) or a uniform.

    ``a, b`` hold ``(mu, sigma)`` for ``kind == "gaussian"`` and ``(lo, hi)``
    for ``kind == "uniform"``.
    """

    kind: str
    a: float
    b: float
    truncation: float = GAUSSIAN_TRUNCATION

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ArgumentError(f"unknown base density kind {self.kind!r}")
        if self.kind == "gaussian" and not self.b > 0:
            raise ArgumentError("Gaussian base needs sigma > 0")
        if self.kind == "uniform" and not self.a < self.b:
            raise ArgumentError("Uniform base needs lo < hi")
        if not self.truncation > 0:
            raise ArgumentError("truncation must be positive")

    @classmethod
    def gaussian(cls, mu=0.0, sigma=1.0, truncation=GAUSSIAN_TRUNCATION):
        return cls("gaussian", float(mu), float(sigma), float(truncation))

    @classmethod
    def uniform(cls, lo=0.0, hi=1.0):
        return cls("uniform", float(lo), float(hi))

    @classmethod
    def from_spec(cls, spec):
        """Build from a dict such as ``{"kind": "uniform", "lo": 0, "hi": 1}``."""
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind == "gaussian":
            return cls.gaussian(**spec)
        if kind == "uniform":
            return cls.uniform(**spec)
        raise ArgumentError(f"unknown base density kind {kind!r}")

    def to_spec(self):
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mu": self.a, "sigma": self.b, "truncation": self.truncation}
        return {"kind": "uniform", "lo": self.a, "hi": self.b}

    @property
    def domain(self):
        if self.kind == "gaussian":
            return (self.a - self.truncation * self.b, self.a + self.truncation * self.b)
        return (self.a, self.b)

    def q0(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "gaussian":
            z = (t - self.a) / self.b
            return np.exp(-0.5 * z * z) / (self.b * math.sqrt(2.0 * math.pi))
        inside = (t >= self.a) & (t <= self.b)
        return np.where(inside, 1.0 / (self.b - self.a), 0.0)

    def log_q0(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "gaussian":
            z = (t - self.a) / self.b
            return -0.5 * z * z - math.log(self.b * math.sqrt(2.0 * math.pi))
        with np.errstate(divide="ignore"):
            return np.log(self.q0(t))

    def mass(self, lo, hi):
        """Closed-form ``Q([lo, hi])``."""
        if self.kind == "gaussian":
            return float(special.ndtr((hi - self.a) / self.b) - special.ndtr((lo - self.a) / self.b))
        lo, hi = max(lo, self.a), min(hi, self.b)
        return max(hi - lo, 0.0) / (self.b - self.a)

    def tail_profile(self):
        if self.kind == "gaussian":
            # P(|T| >= z) <= 2 exp(-(z - |mu|)^2 / (2 sigma^2)), absorbed into C_q.
            return TailProfile(C_q=2.0 * math.exp(self.a**2 / (2.0 * self.b**2)), v=1.0 / (4.0 * self.b**2), eta=2.0)
        # Bounded support: any decay rate holds once z exceeds the range.
        return TailProfile(C_q=1.0, v=1.0, eta=math.inf)


@functools.lru_cache(maxsize=None)
def _gauss_legendre(n):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Composite Gauss-Legendre rule with ``nodes_per_panel`` nodes per panel.

    Weights include ``q0`` so that ``sum(weights * f(nodes))`` approximates
    ``int f dQ``.
    """

    base: BaseDensity
    edges: np.ndarray
    nodes_per_panel: int
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ArgumentError("panel edges must be strictly increasing")
        x, w = _gauss_legendre(self.nodes_per_panel)
        a, b = edges[:-1, None], edges[1:, None]
        half = 0.5 * (b - a)
        nodes = (a + half * (x + 1.0)).ravel()
        weights = (half * w).ravel() * self.base.q0(nodes)
        edges.setflags(write=False)
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def domain(self):
        return (float(self.edges[0]), float(self.edges[-1]))

    @property
    def panel_count(self):
        return self.edges.size - 1

    def refined(self):
        """Bisect every panel; existing edges (including splits) are kept."""
        mids = 0.5 * (self.edges[:-1] + self.edges[1:])
        edges = np.empty(2 * self.edges.size - 1)
        edges[0::2] = self.edges
        edges[1::2] = mids
        return QuadratureRule(self.base, edges, self.nodes_per_panel)

    def bisected(self, mask):
        """Bisect only the panels flagged in ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        mids = 0.5 * (self.edges[:-1] + self.edges[1:])[mask]
        return QuadratureRule(self.base, np.sort(np.concatenate([self.edges, mids])), self.nodes_per_panel)

    def half_resolution(self):
        """Same panels with half the nodes; the coarse companion for error estimates."""
        return QuadratureRule(self.base, self.edges, max(self.nodes_per_panel // 2, 1))

    def with_nodes_per_panel(self, n):
        return QuadratureRule(self.base, self.edges, int(n))

    def split_at(self, points):
        """Insert ``points`` strictly inside the domain as additional panel edges."""
        pts = np.asarray(points, dtype=float).ravel()
        lo, hi = self.domain
        tol = 1e-13 * max(hi - lo, 1.0)
        pts = pts[(pts > lo + tol) & (pts < hi - tol)]
        if pts.size == 0:
            return self
        edges = np.sort(np.concatenate([self.edges, pts]))
        keep = np.concatenate([[True], np.diff(edges) > tol])
        edges = edges[keep]
        edges[-1] = hi
        return QuadratureRule(self.base, edges, self.nodes_per_panel)

    def same_grid(self, other):
        return self is other or (
            np.array_equal(self.nodes, other.nodes) and np.array_equal(self.weights, other.weights)
        )

    def total_mass(self):
        return float(np.sum(self.weights))


def build_rule(base, panels=64, nodes_per_panel=8):
    """Composite Gauss-Legendre rule with equal panels over the base domain."""
    if int(panels) < 1 or int(nodes_per_panel) < 2:
        raise ArgumentError("need panels >= 1 and nodes_per_panel >= 2")
    lo, hi = base.domain
    if not lo < hi:
        raise ArgumentError("degenerate quadrature domain")
    return QuadratureRule(base, np.linspace(lo, hi, int(panels) + 1), int(nodes_per_panel))


class IntegrationResult(NamedTuple):
    value: object
    err_estimate: float
    rule: QuadratureRule
    converged: bool


def _weighted_sum(weights, values):
    # np.sum reduces pairwise in a fixed order: deterministic across runs.
    if values.ndim == 1:
        return float(np.sum(weights * values))
    return np.sum(weights.reshape((-1,) + (1,) * (values.ndim - 1)) * values, axis=0)


def _eval(fn, nodes):
    vals = np.asarray(fn(nodes), dtype=float)
    if vals.shape[:1] != nodes.shape:
        vals = np.broadcast_to(vals, nodes.shape).copy()
    if not np.all(np.isfinite(vals)):
        raise NumericError("integrand is not finite at some quadrature node")
    return vals


def _estimate_panels(fn, rule):
    vals = _eval(fn, rule.nodes)
    coarse = rule.half_resolution()
    cvals = _eval(fn, coarse.nodes)
    value = _weighted_sum(rule.weights, vals)
    cvalue = _weighted_sum(coarse.weights, cvals)
    err = float(np.max(np.abs(np.asarray(value) - cvalue)))
    shape = (rule.panel_count, -1)
    fine = (rule.weights.reshape(shape + (1,) * (vals.ndim - 1)) * vals.reshape(shape + vals.shape[1:])).sum(axis=1)
    crs = (coarse.weights.reshape((rule.panel_count, -1) + (1,) * (cvals.ndim - 1))
           * cvals.reshape((rule.panel_count, -1) + cvals.shape[1:])).sum(axis=1)
    panel_err = np.abs(fine - crs).reshape(rule.panel_count, -1).max(axis=1)
    return value, err, vals, panel_err


def estimate(fn, rule):
    """One-shot ``(value, err_estimate)`` on ``rule`` without refinement."""
    value, err, vals, _ = _estimate_panels(fn, rule)
    return value, err, vals


def integrate(fn, rule, rtol=1e-8, max_panels=MAX_PANELS, refine=True, warn=True):
    """Integrate ``fn`` against ``Q`` with ``rule``, bisecting panels until converged.

    ``fn`` maps an array of nodes to an array whose leading axis matches the
    nodes (scalar- or vector-valued integrands). The error estimate is the
    difference to the same panels with half the nodes per panel. Refinement
    stops once ``err_estimate <= rtol * int |fn| dQ`` or when the panel cap is
    reached, in which case ``converged`` is False and an
    :class:`IntegrationWarning` is emitted. Only panels whose own error
    exceeds an equal share of the tolerance are bisected, so endpoint
    singularities (support edges of deformed densities) get graded panels.
    """
    while True:
        value, err, vals, panel_err = _estimate_panels(fn, rule)
        scale = float(np.max(_weighted_sum(rule.weights, np.abs(vals))))
        converged = err <= rtol * scale
        if converged or not refine:
            break
        split = panel_err > rtol * scale / rule.panel_count
        if not split.any():
            split = panel_err >= panel_err.max()
        if rule.panel_count + int(split.sum()) > max_panels:
            break
        rule = rule.bisected(split)
    if refine and warn and not converged:
        warnings.warn(
            f"quadrature reached {rule.panel_count} panels with relative error "
            f"{err / max(scale, 1e-300):.2e}",
            IntegrationWarning,
            stacklevel=2,
        )
    return IntegrationResult(value, err, rule, bool(converged))


def integrate_log(log_fn, rule, rtol=1e-8, max_panels=MAX_PANELS, refine=True, warn=True):
    """``log int exp(log_fn) dQ``, stable when ``exp(log_fn)`` overflows.

    Returns an :class:`IntegrationResult` whose ``value`` is the logarithm of
    the integral and whose ``err_estimate`` is the absolute difference of
    logarithms (a relative error of the integral).
    """

    def log_sum(r):
        lv = np.asarray(log_fn(r.nodes), dtype=float)
        if np.any(np.isnan(lv)) or np.any(lv == np.inf):
            raise NumericError("log-integrand is not finite at some quadrature node")
        with np.errstate(divide="ignore"):
            lw = np.log(r.weights)
        out = special.logsumexp(lv + lw)
        if not np.isfinite(out):
            raise NumericError("integral is zero or not finite")
        return float(out)

    while True:
        value = log_sum(rule)
        err = abs(value - log_sum(rule.half_resolution()))
        converged = err <= rtol
        if converged or not refine or 2 * rule.panel_count > max_panels:
            break
        rule = rule.refined()
    if refine and warn and not converged:
        warnings.warn(
            f"log-domain quadrature reached {rule.panel_count} panels with error {err:.2e}",
            IntegrationWarning,
            stacklevel=2,
        )
    return IntegrationResult(value, err, rule, bool(converged))


@dataclass(frozen=True)
class SupportSet:
    """Sorted, pairwise disjoint, nonempty intervals."""

    intervals: tuple = ()

    def __post_init__(self):
        ivs = tuple((float(a), float(b)) for a, b in self.intervals)
        for a, b in ivs:
            if not a < b:
                raise ArgumentError(f"empty support interval [{a}, {b}]")
        for (_, b0), (a1, _) in zip(ivs, ivs[1:]):
            if not b0 < a1:
                raise ArgumentError("support intervals must be sorted and disjoint")
        object.__setattr__(self, "intervals", ivs)

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    @property
    def empty(self):
        return not self.intervals

    def boundaries(self):
        return np.array([x for iv in self.intervals for x in iv])

    def contains(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=bool)
        for a, b in self.intervals:
            out |= (t >= a) & (t <= b)
        return out

    def measure(self):
        return sum(b - a for a, b in self.intervals)


def _bisect(g, inside, outside, xtol):
    """Vectorized bisection between points with ``g > 0`` and ``g <= 0``."""
    inside = np.array(inside, dtype=float)
    outside = np.array(outside, dtype=float)
    while inside.size and np.max(np.abs(outside - inside)) > xtol:
        mid = 0.5 * (inside + outside)
        pos = np.asarray(g(mid), dtype=float) > 0.0
        inside = np.where(pos, mid, inside)
        outside = np.where(pos, outside, mid)
    return 0.5 * (inside + outside)


def find_support(f_tilde, alpha, rule, xtol=SUPPORT_XTOL):
    """Maximal intervals where ``1 + (alpha - 1) f_tilde(t) > 0``.

    Sign changes of ``g = 1 + (alpha-1) f_tilde`` are located on the grid of
    domain endpoints and quadrature nodes, then refined by bisection to
    ``xtol``. Islands narrower than the node spacing can be missed.
    """
    a = alpha_value(alpha)
    lo, hi = rule.domain

    def g(t):
        return 1.0 + (a - 1.0) * np.asarray(f_tilde(t), dtype=float)

    grid = np.concatenate([[lo], rule.nodes, [hi]])
    vals = g(grid)
    if not np.all(np.isfinite(vals)):
        raise NumericError("f_tilde is not finite on the grid")
    pos = vals > 0.0
    if not pos.any():
        return SupportSet(())
    change = np.nonzero(pos[:-1] != pos[1:])[0]
    rising = change[~pos[change]]  # support starts between grid[j] and grid[j+1]
    falling = change[pos[change]]  # support ends between grid[j] and grid[j+1]
    starts = _bisect(g, grid[rising + 1], grid[rising], xtol)
    ends = _bisect(g, grid[falling], grid[falling + 1], xtol)
    if pos[0]:
        starts = np.concatenate([[lo], starts])
    if pos[-1]:
        ends = np.concatenate([ends, [hi]])
    return SupportSet(tuple(zip(np.sort(starts), np.sort(ends))))

"""Attention densities: construction, normalization, evaluation, expectation.

Five families are supported. Their ``pdf(t, wrt)`` returns the density with
respect to the base measure ``Q`` (``wrt="q"``) or to Lebesgue measure
(``wrt="lebesgue"``, i.e. multiplied by ``q0``):

* :class:`KernelExpDensity` -- ``exp(f(t) - A)`` with ``f`` in an RKHS.
* :class:`KernelDeformedDensity` -- ``exp_{2-alpha}(f_tilde(t)) / Z``, exactly
  zero outside its :class:`SupportSet`.
* :class:`TruncatedParabolaDensity` -- the ``alpha = 2`` deformed density of a
  quadratic, i.e. continuous sparsemax.
* :class:`ContinuousSoftmaxDensity` -- a Gaussian (restricted to the base
  domain when a base is given).
* :class:`GaussianMixtureDensity` -- a Gaussian mixture (same restriction).

Every normalized density keeps the quadrature rule it was normalized with, so
later expectations reuse the support-aware panels.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .deformed import GridDensity, alpha_value, beta_exp, beta_log
from .errors import ArgumentError, DegenerateDensityError, NumericError
from .quadrature import BaseDensity, SupportSet, build_rule, find_support, integrate, integrate_log
from .rkhs import RkhsFunction, check_normalizable

Z_FLOOR = 1e-300
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class _Density:
    """Shared evaluation logic; subclasses implement ``_pdf_q``."""

    family = "density"

    def _domain(self):
        return self.base.domain

    def _check_domain(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self._domain()
        tol = 1e-12 * max(hi - lo, 1.0)
        if np.any(t < lo - tol) or np.any(t > hi + tol):
            raise ArgumentError(f"location outside the density domain [{lo}, {hi}]")
        return t

    def pdf(self, t, wrt="q"):
        t = self._check_domain(t)
        if wrt == "q":
            out = self._pdf_q(t)
        elif wrt == "lebesgue":
            out = self._pdf_lebesgue(t)
        else:
            raise ArgumentError(f"wrt must be 'q' or 'lebesgue', got {wrt!r}")
        return out if np.ndim(out) else float(out)

    def _pdf_lebesgue(self, t):
        return self._pdf_q(t) * self.base.q0(t)

    def grid(self, rule=None):
        rule = self.rule if rule is None else rule
        return GridDensity(rule, self._pdf_q(rule.nodes))


class _DenseSupport:
    @property
    def support(self):
        # Dense families are positive on the whole domain.
        return SupportSet((self._domain(),))


@dataclass(frozen=True, eq=False)
class KernelExpDensity(_DenseSupport, _Density):
    f: object
    log_normalizer: float
    base: BaseDensity
    rule: object
    family = "kernel_exp"

    def _pdf_q(self, t):
        return np.exp(np.asarray(self.f(t), dtype=float) - self.log_normalizer)


@dataclass(frozen=True, eq=False)
class KernelDeformedDensity(_Density):
    f_tilde: object
    alpha: float
    Z: float
    A_alpha: float
    support: SupportSet
    base: BaseDensity
    rule: object
    family = "kernel_deformed"

    @property
    def beta(self):
        return 2.0 - self.alpha

    def unnormalized(self, t):
        return beta_exp(np.asarray(self.f_tilde(t), dtype=float), self.beta)

    def _pdf_q(self, t):
        return np.asarray(self.unnormalized(t)) / self.Z

    def natural_parameter(self, t):
        """``f = f_tilde / Z^(alpha - 1)`` so that ``p = exp_{2-alpha}(f - A_alpha)``."""
        return np.asarray(self.f_tilde(t), dtype=float) / self.Z ** (self.alpha - 1.0)


@dataclass(frozen=True, eq=False)
class TruncatedParabolaDensity(KernelDeformedDensity):
    mu: float = 0.0
    sigma: float = 1.0
    family = "cts_sparsemax"


@dataclass(frozen=True, eq=False)
class ContinuousSoftmaxDensity(_DenseSupport, _Density):
    """Gaussian attention ``N(mu, sigma2)``, renormalized on the base domain if any."""

    theta: tuple
    mu: float
    sigma2: float
    base: BaseDensity = None
    rule: object = None
    mass: float = 1.0
    family = "cts_softmax"

    def _domain(self):
        return (-math.inf, math.inf) if self.base is None else self.base.domain

    def _pdf_lebesgue(self, t):
        return np.exp(self._log_pdf_lebesgue(t))

    def _pdf_q(self, t):
        if self.base is None:
            raise ArgumentError("density w.r.t. Q needs a base measure")
        return np.exp(self._log_pdf_lebesgue(t) - self.base.log_q0(t))

    def _log_pdf_lebesgue(self, t):
        z = (t - self.mu) / math.sqrt(self.sigma2)
        return -0.5 * z * z - _LOG_SQRT_2PI - 0.5 * math.log(self.sigma2) - math.log(self.mass)


@dataclass(frozen=True, eq=False)
class GaussianMixtureDensity(_DenseSupport, _Density):
    """Mixture ``sum_k pi_k N(mean_k, var_k)``, renormalized on the base domain if any."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    base: BaseDensity = None
    rule: object = None
    mass: float = 1.0
    family = "gmm"

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_1d(np.asarray(self.means, dtype=float))
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if not (w.shape == m.shape == v.shape) or w.ndim != 1:
            raise ArgumentError("weights, means and variances must have equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ArgumentError("mixture weights must be nonnegative and sum to 1")
        if np.any(~(v > 0)):
            raise ArgumentError("mixture variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self):
        return self.weights.size

    def _domain(self):
        return (-math.inf, math.inf) if self.base is None else self.base.domain

    def log_component_pdfs(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return -0.5 * (t - self.means) ** 2 / self.variances - _LOG_SQRT_2PI - 0.5 * np.log(self.variances)

    def _log_pdf_lebesgue(self, t):
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return special.logsumexp(self.log_component_pdfs(t) + logw, axis=-1) - math.log(self.mass)

    def _pdf_lebesgue(self, t):
        return np.exp(self._log_pdf_lebesgue(t))

    def _pdf_q(self, t):
        if self.base is None:
            raise ArgumentError("density w.r.t. Q needs a base measure")
        return np.exp(self._log_pdf_lebesgue(t) - self.base.log_q0(t))


def _rule_for(base, rule):
    if rule is None:
        return build_rule(base)
    if rule.base != base:
        raise ArgumentError("quadrature rule was built for a different base measure")
    return rule


def normalize_kexp(f, base, rule=None, rtol=1e-10):
    """Normalize ``exp(f)`` against ``Q``; ``A = log int exp(f) dQ``.

    ``f`` is an :class:`RkhsFunction` or any vectorized callable. For RKHS
    functions the kernel/base pair is checked with
    :func:`~kernel_attention.rkhs.check_normalizable` first.
    """
    rule = _rule_for(base, rule)
    if isinstance(f, RkhsFunction):
        if not check_normalizable(f.kernel.growth_profile(), base.tail_profile()):
            raise ArgumentError("kernel growth is too fast for the base tail decay")
    res = integrate_log(f, rule, rtol=rtol, warn=False)
    if not res.converged:
        raise NumericError("quadrature for the log-normalizer hit the refinement cap")
    return KernelExpDensity(f, float(res.value), base, res.rule)


def normalize_kdeformed(f_tilde, alpha, base, rule=None, rtol=1e-10):
    """Normalize ``exp_{2-alpha}(f_tilde)`` against ``Q``.

    The support is located on ``rule`` first and the rule's panels are split
    at its boundaries, so the integrand is smooth on every panel. Returns the
    density ``exp_{2-alpha}(f_tilde)/Z`` with ``A_alpha = log_alpha Z``.
    """
    a = alpha_value(alpha)
    rule = _rule_for(base, rule)
    support = find_support(f_tilde, a, rule)
    if support.empty:
        raise DegenerateDensityError("exp_{2-alpha}(f_tilde) vanishes on the whole domain")
    split = rule.split_at(support.boundaries())
    beta = 2.0 - a
    res = integrate(lambda t: beta_exp(f_tilde(t), beta), split, rtol=rtol, warn=False)
    Z = float(res.value)
    if not math.isfinite(Z):
        raise NumericError("normalizer Z is not finite")
    if Z < Z_FLOOR:
        raise DegenerateDensityError(f"normalizer Z = {Z:.3g} is numerically zero")
    if not res.converged:
        raise NumericError("quadrature for Z hit the refinement cap")
    return KernelDeformedDensity(f_tilde, a, Z, beta_log(Z, a), support, base, res.rule)


def density_eval(d, t, wrt="q"):
    """Density value(s) at ``t`` w.r.t. ``Q`` or Lebesgue measure."""
    return d.pdf(t, wrt=wrt)


def expectation(d, g, rule=None, rtol=1e-10):
    """``int g(t) p(t) dQ`` for scalar- or vector-valued ``g``."""
    rule = d.rule if rule is None else rule
    if rule is None:
        raise ArgumentError("density has no quadrature rule; pass one explicitly")

    def integrand(t):
        gv = np.asarray(g(t), dtype=float)
        p = np.asarray(d._pdf_q(t), dtype=float)
        return gv * p.reshape(p.shape + (1,) * (gv.ndim - p.ndim))

    return integrate(integrand, rule, rtol=rtol, warn=False).value


def _dense_rule(base, rule, centers, scales):
    # Panel edges at component centers +- a few scales keep narrow bumps resolved.
    rule = _rule_for(base, rule)
    pts = np.concatenate([centers + k * scales for k in (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0)])
    return rule.split_at(pts)


def cts_softmax_from_theta(theta, base=None, rule=None):
    """Gaussian attention from natural parameters ``theta = (t1, t2)``, ``t2 < 0``.

    ``exp(t1 t + t2 t^2)`` is proportional to ``N(-t1/(2 t2), -1/(2 t2))``. With
    a base measure the Gaussian is restricted to the base domain and
    renormalized there (closed-form mass).
    """
    t1, t2 = (float(x) for x in theta)
    if not t2 < 0:
        raise ArgumentError("theta[1] must be negative for a normalizable Gaussian")
    mu = -t1 / (2.0 * t2)
    sigma2 = -1.0 / (2.0 * t2)
    if base is None:
        return ContinuousSoftmaxDensity((t1, t2), mu, sigma2)
    lo, hi = base.domain
    s = math.sqrt(sigma2)
    mass = float(special.ndtr((hi - mu) / s) - special.ndtr((lo - mu) / s))
    if not mass > 0:
        raise DegenerateDensityError("Gaussian has no mass on the base domain")
    rule = _dense_rule(base, rule, np.array([mu]), np.array([s]))
    d = ContinuousSoftmaxDensity((t1, t2), mu, sigma2, base, None, mass)
    res = integrate(d._pdf_q, rule, warn=False)
    return ContinuousSoftmaxDensity((t1, t2), mu, sigma2, base, res.rule, mass)


def cts_sparsemax_from_moments(mu, sigma, base, rule=None):
    """Truncated parabola ``[1 - (t - mu)^2 / (2 sigma^2)]_+ / Z`` (``alpha = 2``)."""
    mu, sigma = float(mu), float(sigma)
    if not sigma > 0:
        raise ArgumentError("sigma must be positive")

    def f_tilde(t):
        return -((np.asarray(t, dtype=float) - mu) ** 2) / (2.0 * sigma * sigma)

    d = normalize_kdeformed(f_tilde, 2.0, base, rule)
    return TruncatedParabolaDensity(
        d.f_tilde, d.alpha, d.Z, d.A_alpha, d.support, d.base, d.rule, mu=mu, sigma=sigma
    )


def gaussian_mixture(weights, means, variances, base=None, rule=None):
    """Mixture density, restricted to and renormalized on ``base.domain`` if given."""
    d = GaussianMixtureDensity(weights, means, variances)
    if base is None:
        return d
    lo, hi = base.domain
    s = np.sqrt(d.variances)
    mass = float(np.sum(d.weights * (special.ndtr((hi - d.means) / s) - special.ndtr((lo - d.means) / s))))
    if not mass > 0:
        raise DegenerateDensityError("mixture has no mass on the base domain")
    rule = _dense_rule(base, rule, d.means, s)
    tmp = GaussianMixtureDensity(d.weights, d.means, d.variances, base, None, mass)
    res = integrate(tmp._pdf_q, rule, warn=False)
    return GaussianMixtureDensity(d.weights, d.means, d.variances, base, res.rule, mass)


def gmm_pdf(d, t):
    """Untruncated mixture density ``sum_k pi_k N(t; mean_k, var_k)``."""
    with np.errstate(divide="ignore"):
        logw = np.log(d.weights)
    out = np.exp(special.logsumexp(d.log_component_pdfs(t) + logw, axis=-1))
    return out if np.ndim(out) else float(out)


def verify_lemma1(f_values, Z, alpha):
    """Max residual of ``exp_b(Z^(a-1) f)/Z == exp_b(f - log_a Z)`` with ``b = 2 - a``.

    The two sides are evaluated independently from their closed forms.
    """
    a = alpha_value(alpha)
    Z = float(Z)
    if not Z > 0:
        raise ArgumentError("Z must be positive")
    f = np.asarray(f_values, dtype=float)
    beta = 2.0 - a
    left = beta_exp(math.exp((a - 1.0) * math.log(Z)) * f, beta) / Z
    right = beta_exp(f - beta_log(Z, a), beta)
    return float(np.max(np.abs(np.asarray(left) - np.asarray(right))))


def deformed_log_normalizer(f, alpha, base, rule=None):
    """``A`` solving ``int exp_{2-alpha}(f - A) dQ = 1`` by root finding.

    Independent of the ``Z``-scaling construction; used to cross-check
    ``A_alpha = log_alpha Z`` and derivatives of ``A_alpha``.
    """
    a = alpha_value(alpha)
    rule = _rule_for(base, rule)
    beta = 2.0 - a
    fv = np.asarray(f(rule.nodes), dtype=float)

    def mass_minus_one(A):
        def shifted(t):
            return np.asarray(f(t), dtype=float) - A

        supp = find_support(shifted, a, rule)
        r = rule.split_at(supp.boundaries())
        return integrate(lambda t: beta_exp(shifted(t), beta), r, rtol=1e-12, warn=False).value - 1.0

    lo, hi = float(fv.min()) - 1.0, float(fv.max()) + 1.0
    while mass_minus_one(lo) < 0:
        lo -= 2.0 * (hi - lo)
    return optimize.brentq(mass_minus_one, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def export_grid(d, grid_points):
    """Uniform export grid over the density domain with both density columns."""
    if int(grid_points) < 2:
        raise ArgumentError("grid_points must be at least 2")
    lo, hi = d._domain()
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ArgumentError("export needs a bounded domain (attach a base measure)")
    t = np.linspace(lo, hi, int(grid_points))
    return t, np.asarray(d.pdf(t, "q")), np.asarray(d.pdf(t, "lebesgue"))


def write_density_csv(d, path, grid_points=1000):
    """Write ``t,pdf_q,pdf_lebesgue`` rows; deformed families also get a
    ``<path>.support`` sidecar listing their support intervals."""
    t, pq, pl = export_grid(d, grid_points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "pdf_q", "pdf_lebesgue"])
        for row in zip(t, pq, pl):
            w.writerow([repr(float(x)) for x in row])
    if isinstance(d, KernelDeformedDensity):
        with open(f"{path}.support", "w") as fh:
            fh.write("support " + " ".join(f"[{a!r},{b!r}]" for a, b in d.support) + "\n")
    return len(t)

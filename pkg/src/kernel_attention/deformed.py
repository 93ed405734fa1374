"""Deformed exponential algebra and the Tsallis negentropy.

The beta-exponential ``exp_beta`` and its inverse ``log_beta`` generate the
sparse (``1 < alpha <= 2``) attention families via ``beta = 2 - alpha``.
Functionals of densities (negentropy, its gradient, Bregman divergence) are
evaluated on a :class:`GridDensity`, i.e. density values at the nodes of a
quadrature rule whose weights already include the base density.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class AlphaParam:
    """Tsallis index restricted to the sparse range ``1 < alpha <= 2``."""

    alpha: float

    def __post_init__(self):
        a = float(self.alpha)
        if not (1.0 < a <= 2.0):
            raise ArgumentError(f"alpha must lie in (1, 2], got {self.alpha!r}")
        object.__setattr__(self, "alpha", a)

    def beta(self):
        return 2.0 - self.alpha

    def __float__(self):
        return self.alpha


def alpha_value(alpha, allow_one=False):
    """Return ``alpha`` as a float, validating the admissible range."""
    if isinstance(alpha, AlphaParam):
        return alpha.alpha
    a = float(alpha)
    if allow_one and a == 1.0:
        return a
    return AlphaParam(a).alpha


def beta_exp(x, beta):
    """Beta-exponential ``[1 + (1-beta) x]_+^(1/(1-beta))``; ``exp`` at ``beta=1``.

    The clamp is an explicit comparison, so every ``x`` with
    ``1 + (1-beta) x <= 0`` maps to a literal ``0.0``. The power is taken as
    ``exp(log1p(.)/(1-beta))`` which stays accurate as ``beta -> 1``.
    """
    beta = float(beta)
    if not (0.0 <= beta <= 1.0):
        raise ArgumentError(f"beta must lie in [0, 1], got {beta!r}")
    x = np.asarray(x, dtype=float)
    if beta == 1.0:
        out = np.exp(x)
        return out if out.ndim else float(out)
    q = 1.0 - beta
    y = q * x
    inside = y > -1.0
    if q == 1.0:
        out = np.where(inside, 1.0 + y, 0.0)
    else:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = np.where(inside, np.exp(np.log1p(np.where(inside, y, 0.0)) / q), 0.0)
    return out if out.ndim else float(out)


def beta_exp_power(x, beta, power):
    """``exp_beta(x) ** power`` with ``0 ** 0 := 0`` outside the support.

    The derivative of ``exp_beta`` is ``exp_beta(x) ** beta`` on the support
    and zero elsewhere; a plain ``** 0`` would put ones outside it.
    """
    e = np.asarray(beta_exp(x, beta), dtype=float)
    if power == 0.0:
        return (e > 0.0).astype(float)
    return np.where(e > 0.0, e ** power, 0.0)


def beta_log(x, beta):
    """Inverse of :func:`beta_exp`: ``(x^(1-beta) - 1)/(1-beta)``, ``log x`` at 1."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0.0)):
        raise ArgumentError("beta_log is undefined for x <= 0")
    beta = float(beta)
    if beta == 1.0:
        out = np.log(x)
    else:
        q = 1.0 - beta
        out = np.expm1(q * np.log(x)) / q
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Density values w.r.t. the base measure at the nodes of ``rule``."""

    rule: object
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != np.shape(self.rule.nodes):
            raise ArgumentError("values must have one entry per quadrature node")
        if np.any(v < 0.0) or not np.all(np.isfinite(v)):
            raise ArgumentError("grid density values must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, fn, rule, normalized=True):
        return cls(rule, np.asarray(fn(rule.nodes), dtype=float), normalized)

    def mass(self):
        return float(np.sum(self.rule.weights * self.values))


def _same_grid(p, g):
    a, b = p.rule, g.rule
    if a is b:
        return True
    return np.array_equal(a.nodes, b.nodes) and np.array_equal(a.weights, b.weights)


def tsallis_negentropy(p, alpha):
    """Tsallis negative entropy of ``p``; Shannon negentropy when ``alpha == 1``.

    ``(1/(alpha(alpha-1))) (int p^alpha dQ - 1)`` for ``alpha != 1`` and
    ``int p log p dQ`` (with ``0 log 0 = 0``) for ``alpha == 1``.
    """
    a = alpha_value(alpha, allow_one=True)
    w, v = p.rule.weights, p.values
    if a == 1.0:
        plogp = np.zeros_like(v)
        pos = v > 0.0
        plogp[pos] = v[pos] * np.log(v[pos])
        return float(np.sum(w * plogp))
    return float((np.sum(w * v**a) - 1.0) / (a * (a - 1.0)))


def negentropy_gradient(p, alpha):
    """Gradient ``p^(alpha-1)/(alpha-1)`` of the Tsallis negentropy, on the grid."""
    a = alpha_value(alpha)
    return GridDensity(p.rule, p.values ** (a - 1.0) / (a - 1.0), normalized=False)


def bregman_divergence(p, g, alpha):
    """Bregman divergence of the Tsallis negentropy between two grid densities.

    ``Omega(p) - Omega(g) - <grad Omega(g), p - g>`` with the inner product of
    L2(Q) evaluated by the shared quadrature rule.
    """
    if not _same_grid(p, g):
        raise ArgumentError("bregman_divergence needs both densities on the same grid")
    grad = negentropy_gradient(g, alpha).values
    inner = float(np.sum(p.rule.weights * grad * (p.values - g.values)))
    return tsallis_negentropy(p, alpha) - tsallis_negentropy(g, alpha) - inner

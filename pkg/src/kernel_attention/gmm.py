"""Weighted EM for Gaussian mixture attention and its moment-matching identity.

Discrete attention weights ``w_l`` over locations ``t_l`` define a weighted
empirical distribution. Each EM iteration sets the mixture's expected joint
sufficient statistics

    phi(t, z) = (1[z=1], ..., 1[z=K-1], 1[z=1] t, 1[z=1] t^2, ..., 1[z=K] t, 1[z=K] t^2)

equal to their responsibility-weighted empirical counterparts. The residual
of that identity is what :func:`verify_moment_matching` reports.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .densities import GaussianMixtureDensity
from .errors import ArgumentError

VARIANCE_FLOOR = 1e-6
STARVATION = 1e-12


@dataclass(frozen=True, eq=False)
class DiscreteAttention:
    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.locations, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if t.ndim != 1 or t.shape != w.shape or t.size == 0:
            raise ArgumentError("locations and weights must be 1-D arrays of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ArgumentError("attention weights must be nonnegative and sum to 1")
        object.__setattr__(self, "locations", t)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_scores(cls, locations, scores):
        """Softmax over raw scores."""
        s = np.asarray(scores, dtype=float)
        w = np.exp(s - special.logsumexp(s))
        return cls(locations, w / w.sum())

    def __len__(self):
        return self.locations.size


@dataclass(frozen=True, eq=False)
class JointSuffStats:
    """``(pi_1..pi_{K-1}, [m1_k, m2_k] for k = 1..K)`` flattened, length ``3K - 1``."""

    values: np.ndarray
    n_components: int
    starved: tuple = ()

    @property
    def indicators(self):
        return self.values[: self.n_components - 1]

    @property
    def first_moments(self):
        return self.values[self.n_components - 1 :: 2]

    @property
    def second_moments(self):
        return self.values[self.n_components :: 2]


def _pack(counts, m1, m2):
    K = counts.size
    out = np.empty(3 * K - 1)
    out[: K - 1] = counts[: K - 1]
    out[K - 1 :: 2] = m1
    out[K::2] = m2
    return out


def responsibilities(mix, t):
    """Posterior ``p(Z = k | t)``, shape ``(len(t), K)``."""
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    lj = mix.log_component_pdfs(t) + logw
    return np.exp(lj - special.logsumexp(lj, axis=-1, keepdims=True))


def expected_joint_stats(params, att, responsibilities_from):
    """``sum_l w_l sum_k p_old(k | t_l) phi(t_l, k)`` under ``responsibilities_from``."""
    K = params.n_components
    if responsibilities_from.n_components != K:
        raise ArgumentError("component counts differ")
    r = responsibilities(responsibilities_from, att.locations)
    wr = att.weights[:, None] * r
    counts = wr.sum(axis=0)
    m1 = wr.T @ att.locations
    m2 = wr.T @ att.locations**2
    starved = tuple(int(k) for k in np.nonzero(counts < STARVATION)[0])
    return JointSuffStats(_pack(counts, m1, m2), K, starved)


def model_joint_stats(mix):
    """Analytic ``E_{p(T, Z)}[phi]`` of a mixture: ``pi_k``, ``pi_k mu_k``, ``pi_k (mu_k^2 + var_k)``."""
    pi = mix.weights
    return _pack(pi, pi * mix.means, pi * (mix.means**2 + mix.variances))


def verify_moment_matching(params_new, params_old, att):
    """Sup-norm gap between the new mixture's joint statistics and the
    responsibility-weighted empirical statistics under ``params_old``."""
    target = expected_joint_stats(params_new, att, params_old).values
    return float(np.max(np.abs(model_joint_stats(params_new) - target)))


def weighted_log_likelihood(mix, att):
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    ll = special.logsumexp(mix.log_component_pdfs(att.locations) + logw, axis=-1)
    return float(att.weights @ ll)


def m_step(stats, floor=VARIANCE_FLOOR):
    """Weighted maximum-likelihood mixture from joint statistics.

    Returns ``(mixture, floored)`` where ``floored`` lists components whose
    variance was raised to ``floor``. Starved components are left to the caller.
    """
    K = stats.n_components
    counts = np.empty(K)
    counts[: K - 1] = stats.indicators
    counts[K - 1] = 1.0 - counts[: K - 1].sum()
    safe = np.where(counts > STARVATION, counts, 1.0)
    means = stats.first_moments / safe
    var = stats.second_moments / safe - means**2
    floored = tuple(int(k) for k in np.nonzero(var < floor)[0])
    var = np.maximum(var, floor)
    pi = np.clip(counts, 0.0, None)
    return GaussianMixtureDensity(pi / pi.sum(), means, var), floored


def initial_mixture(att, K, floor=VARIANCE_FLOOR):
    """K-quantiles of the weighted empirical distribution, global variance, uniform weights."""
    order = np.argsort(att.locations, kind="stable")
    t, w = att.locations[order], att.weights[order]
    cdf = np.cumsum(w)
    levels = (np.arange(K) + 0.5) / K
    means = t[np.minimum(np.searchsorted(cdf, levels), t.size - 1)]
    mean = float(att.weights @ att.locations)
    var = max(float(att.weights @ (att.locations - mean) ** 2), floor)
    return GaussianMixtureDensity(np.full(K, 1.0 / K), means, np.full(K, var))


@dataclass
class EMFit:
    mixture: GaussianMixtureDensity
    converged: bool
    n_iter: int
    log_likelihoods: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    floored: list = field(default_factory=list)
    resets: list = field(default_factory=list)


def weighted_em_fit(att, K, init=None, max_iters=200, tol=1e-10, floor=VARIANCE_FLOOR, seed=0):
    """Fit a ``K``-component mixture to discrete attention by weighted EM.

    Stops once the weighted log-likelihood improves by less than ``tol``.
    Each iteration records the moment-matching residual of the M-step, whether
    the variance floor was active, and starvation resets (a component with
    total responsibility below 1e-12 is moved to a random data location drawn
    from ``seed``).
    """
    K = int(K)
    if K < 1:
        raise ArgumentError("need K >= 1")
    if K > len(att):
        raise ArgumentError("more components than attention locations")
    mix = initial_mixture(att, K, floor) if init is None else init
    if mix.n_components != K:
        raise ArgumentError("init has the wrong number of components")
    rng = np.random.default_rng(seed)
    fit = EMFit(mix, False, 0, [weighted_log_likelihood(mix, att)])
    for it in range(1, max_iters + 1):
        stats = expected_joint_stats(mix, att, mix)
        new, floored = m_step(stats, floor)
        fit.residuals.append(verify_moment_matching(new, mix, att))
        fit.floored.append(floored)
        if stats.starved:
            means, var, pi = new.means.copy(), new.variances.copy(), new.weights.copy()
            for k in stats.starved:
                means[k] = att.locations[rng.integers(len(att))]
                var[k] = mix.variances.max()
                pi[k] = 1.0 / len(att)
            new = GaussianMixtureDensity(pi / pi.sum(), means, var)
            fit.resets.append(it)
        mix = new
        fit.log_likelihoods.append(weighted_log_likelihood(mix, att))
        fit.n_iter = it
        if not stats.starved and abs(fit.log_likelihoods[-1] - fit.log_likelihoods[-2]) < tol:
            fit.converged = True
            break
    fit.mixture = mix
    return fit

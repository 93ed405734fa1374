import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from kernel_attention import (
    ArgumentError,
    BaseDensity,
    DegenerateDensityError,
    GaussianRBF,
    KernelDeformedDensity,
    NumericError,
    RkhsFunction,
    beta_exp,
    build_rule,
    cts_softmax_from_theta,
    cts_sparsemax_from_moments,
    density_eval,
    expectation,
    gaussian_mixture,
    gmm_pdf,
    normalize_kdeformed,
    normalize_kexp,
    verify_lemma1,
)
from kernel_attention.densities import deformed_log_normalizer, write_density_csv

from .oracles import beta_exp_scalar, beta_log_scalar, kernel_sum, quad, uniform_deformed

SQRT3 = math.sqrt(3.0)
UNIT = BaseDensity.uniform(0.0, 1.0)


def parabola():
    return normalize_kdeformed(lambda t: 2.0 - np.asarray(t) ** 2, 2.0, BaseDensity.uniform(-2.0, 2.0))


def bimodal_ftilde():
    return RkhsFunction([5.0, 5.0], [0.2, 0.8], GaussianRBF(0.05)).__call__


def mass(d, rule):
    if isinstance(d, KernelDeformedDensity):
        rule = rule.split_at(d.support.boundaries())
    return float(np.sum(rule.weights * d.pdf(rule.nodes)))


class TestKernelExp:
    def test_zero_function(self):
        d = normalize_kexp(RkhsFunction(np.zeros(5), np.linspace(0, 1, 5), GaussianRBF(0.1)), UNIT)
        assert d.log_normalizer == pytest.approx(0.0, abs=1e-14)
        assert np.allclose(d.pdf(np.linspace(0, 1, 7)), 1.0, atol=1e-14)
        assert density_eval(d, 0.37, "lebesgue") == pytest.approx(1.0, abs=1e-14)

    def test_constant_function(self):
        d = normalize_kexp(lambda t: np.full(np.shape(t), 1.7), UNIT)
        assert d.log_normalizer == pytest.approx(1.7, abs=1e-13)

    def test_linear_function_on_gaussian_base(self):
        base = BaseDensity.gaussian()
        d = normalize_kexp(lambda t: np.asarray(t, dtype=float), base)
        assert d.log_normalizer == pytest.approx(0.5, abs=1e-10)
        t = np.linspace(-3, 4, 15)
        ratio = np.exp(-0.5 * (t - 1.0) ** 2) / np.exp(-0.5 * t**2)
        assert np.allclose(d.pdf(t), ratio, rtol=1e-10)

    def test_log_normalizer_matches_quad(self):
        coeffs, pts, bw = [1.5, -2.0, 0.7, 3.0], np.linspace(0, 1, 4), 0.2
        d = normalize_kexp(RkhsFunction(coeffs, pts, GaussianRBF(bw)), UNIT)
        f = kernel_sum(coeffs, pts, bw)
        assert d.log_normalizer == pytest.approx(math.log(quad(lambda t: math.exp(f(t)), 0, 1)), abs=1e-12)


class TestKernelDeformed:
    def test_zero_function(self):
        for a in (1.2, 1.5, 2.0):
            d = normalize_kdeformed(lambda t: np.zeros(np.shape(t)), a, UNIT)
            assert d.Z == pytest.approx(1.0, abs=1e-14)
            assert d.A_alpha == pytest.approx(0.0, abs=1e-14)
            assert np.allclose(d.pdf(np.linspace(0, 1, 9)), 1.0)

    def test_parabola_normalizer_and_support(self):
        d = parabola()
        Z, pts = uniform_deformed(lambda t: 2.0 - t * t, 2.0, -2.0, 2.0)
        antider = lambda t: 0.25 * (3 * t - t**3 / 3)  # noqa: E731
        assert Z == pytest.approx(antider(SQRT3) - antider(-SQRT3), abs=1e-12)
        assert d.Z == pytest.approx(Z, abs=1e-12)
        assert d.Z == pytest.approx(SQRT3, abs=1e-12)
        (a, b), = d.support.intervals
        assert a == pytest.approx(pts[0], abs=1e-10) and b == pytest.approx(pts[1], abs=1e-10)
        assert d.A_alpha == pytest.approx(beta_log_scalar(SQRT3, 2.0), abs=1e-14)

    def test_parabola_pointwise(self):
        d = parabola()
        assert density_eval(d, 1.9) == 0.0
        assert density_eval(d, 0.0, "lebesgue") == pytest.approx(3.0 / (4.0 * SQRT3), abs=1e-12)
        assert density_eval(d, 0.0, "lebesgue") == pytest.approx(0.433013, abs=1e-6)

    def test_parabola_second_moment(self):
        d = parabola()
        oracle = quad(lambda t: t * t * (3 - t * t) / (4 * SQRT3), -SQRT3, SQRT3)
        assert oracle == pytest.approx(0.6, abs=1e-13)
        assert expectation(d, lambda t: t * t) == pytest.approx(oracle, abs=1e-12)

    def test_bimodal_two_intervals(self):
        f = bimodal_ftilde()
        ft = lambda t: f(t) - 3.0  # noqa: E731
        d = normalize_kdeformed(ft, 2.0, UNIT)
        grid = np.linspace(0.0, 1.0, 10_001)
        pos = 1.0 + ft(grid) > 0
        runs = np.count_nonzero(np.diff(pos.astype(int)) == 1) + int(pos[0])
        assert runs == 2
        assert len(d.support) == 2
        (a0, b0), (a1, b1) = d.support.intervals
        assert b0 < a1
        outside = ~d.support.contains(grid)
        assert np.all(d.pdf(grid[outside]) == 0.0)
        assert np.all(d.pdf(grid[~outside][1:-1]) >= 0.0)
        Z, _ = uniform_deformed(lambda t: 5 * math.exp(-((t - 0.2) ** 2) / 0.005) + 5 * math.exp(-((t - 0.8) ** 2) / 0.005) - 3, 2.0, 0, 1)
        assert d.Z == pytest.approx(Z, rel=1e-10)

    def test_empty_support(self):
        with pytest.raises(DegenerateDensityError):
            normalize_kdeformed(lambda t: np.full(np.shape(t), -2.0), 2.0, UNIT)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            normalize_kdeformed(lambda t: np.full(np.shape(t), np.inf), 1.5, UNIT)

    def test_outside_domain(self):
        with pytest.raises(ArgumentError):
            density_eval(parabola(), 2.5)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-4, 6), min_size=6, max_size=6), st.floats(1.05, 2.0))
    def test_scaled_and_normalized_routes_agree(self, coeffs, alpha):
        f_tilde = RkhsFunction(coeffs, np.linspace(0, 1, 6), GaussianRBF(0.15))
        try:
            d = normalize_kdeformed(f_tilde, alpha, UNIT)
        except DegenerateDensityError:
            return
        f = lambda t: d.natural_parameter(t)  # noqa: E731
        direct = beta_exp(f(d.rule.nodes) - d.A_alpha, 2.0 - alpha)
        assert np.max(np.abs(direct - d.pdf(d.rule.nodes))) < 1e-10
        # A found by root solving, without going through Z
        A = deformed_log_normalizer(f, alpha, UNIT)
        assert A == pytest.approx(d.A_alpha, abs=1e-9)

    def test_quadratic_matches_truncated_parabola(self):
        base = BaseDensity.uniform(-1.0, 2.0)
        d = normalize_kdeformed(lambda t: 0.5 - 4.0 * (np.asarray(t) - 0.4) ** 2, 2.0, base)
        r = math.sqrt(1.5 / 4.0)
        antider = lambda t: (1.5 * t - 4.0 * t**3 / 3) / 3.0  # noqa: E731
        Z = antider(r) - antider(-r)
        t = np.linspace(-1.0, 2.0, 3001)
        closed = np.maximum(1.5 - 4.0 * (t - 0.4) ** 2, 0.0) / Z
        assert np.max(np.abs(d.pdf(t) - closed)) < 1e-8


class TestUnimodal:
    def test_theta_to_moments(self):
        d = cts_softmax_from_theta((0.0, -0.5))
        assert (d.mu, d.sigma2) == (0.0, 1.0)
        d = cts_softmax_from_theta((1.0, -0.5))
        assert (d.mu, d.sigma2) == (1.0, 1.0)
        with pytest.raises(ArgumentError):
            cts_softmax_from_theta((0.0, 0.1))

    def test_theta_matches_completed_square(self):
        t1, t2 = 0.8, -3.0
        d = cts_softmax_from_theta((t1, t2))
        Zq = quad(lambda t: math.exp(t1 * t + t2 * t * t), -20, 20)
        for t in (-1.0, 0.0, 0.3, 2.0):
            assert d.pdf(t, "lebesgue") == pytest.approx(math.exp(t1 * t + t2 * t * t) / Zq, rel=1e-10)

    def test_sparsemax_from_moments(self):
        d = cts_sparsemax_from_moments(0.5, 0.05, UNIT)
        (a, b), = d.support.intervals
        assert (a + b) / 2 == pytest.approx(0.5, abs=1e-10)
        assert b - a < 1.0
        t = d.rule.nodes
        assert d.pdf(0.5) >= np.max(d.pdf(t))
        assert expectation(d, lambda t: t) == pytest.approx(0.5, abs=1e-8)
        Z, pts = uniform_deformed(lambda t: -((t - 0.5) ** 2) / (2 * 0.05**2), 2.0, 0.0, 1.0)
        assert d.Z == pytest.approx(Z, rel=1e-12)
        assert a == pytest.approx(pts[0], abs=1e-10)


class TestMixture:
    def test_single_component(self):
        d = gaussian_mixture([1.0], [0.3], [0.04])
        assert gmm_pdf(d, 0.3) == pytest.approx(1.0 / math.sqrt(2 * math.pi * 0.04), rel=1e-14)

    def test_symmetric_pair(self):
        d = gaussian_mixture([0.5, 0.5], [-1.0, 1.0], [0.01, 0.01])
        assert gmm_pdf(d, 0.0) < gmm_pdf(d, 1.0)
        assert gmm_pdf(d, -1.0) == pytest.approx(gmm_pdf(d, 1.0), rel=1e-15)

    def test_integrates_to_one(self):
        d = gaussian_mixture([0.2, 0.5, 0.3], [-1.0, 0.4, 2.0], [0.3, 0.01, 1.5])
        assert quad(lambda t: gmm_pdf(d, t), -30, 30, points=[-1.0, 0.4, 2.0]) == pytest.approx(1.0, abs=1e-8)

    def test_rejects_bad_weights(self):
        with pytest.raises(ArgumentError):
            gaussian_mixture([0.5, 0.6], [0.0, 1.0], [1.0, 1.0])
        with pytest.raises(ArgumentError):
            gaussian_mixture([0.5, 0.5], [0.0, 1.0], [1.0, 0.0])

    def test_permutation_invariant(self):
        d = gaussian_mixture([0.2, 0.5, 0.3], [-1.0, 0.4, 2.0], [0.3, 0.01, 1.5])
        p = gaussian_mixture([0.3, 0.2, 0.5], [2.0, -1.0, 0.4], [1.5, 0.3, 0.01])
        t = np.linspace(-3, 3, 101)
        assert np.allclose(gmm_pdf(d, t), gmm_pdf(p, t), rtol=1e-14)


class TestScalingIdentity:
    def test_unit_Z_exact(self):
        f = np.random.default_rng(0).uniform(-3, 3, 100)
        assert verify_lemma1(f, 1.0, 1.5) == 0.0

    def test_random(self):
        f = np.random.default_rng(1).uniform(-3, 3, 100)
        assert verify_lemma1(f, 2.7, 1.5) < 1e-12

    def test_alpha_two_constant(self):
        Z, f = 0.5, 4.0
        left = beta_exp_scalar(Z * f, 0.0) / Z
        right = beta_exp_scalar(f - beta_log_scalar(Z, 2.0), 0.0)
        assert left == pytest.approx(right, abs=1e-12)
        assert verify_lemma1(np.array([f]), Z, 2.0) < 1e-12

    def test_rejects_nonpositive_Z(self):
        with pytest.raises(ArgumentError):
            verify_lemma1(np.zeros(3), 0.0, 1.5)


def random_density(rng, family, base=UNIT):
    """One random normalized density of ``family`` on ``base``."""
    if family == "kernel_exp":
        f = RkhsFunction(rng.normal(0, 2, 8), np.linspace(0, 1, 8), GaussianRBF(rng.uniform(0.05, 0.3)))
        return normalize_kexp(f, base)
    if family == "kernel_deformed":
        for _ in range(20):
            f = RkhsFunction(rng.normal(0, 2, 8), np.linspace(0, 1, 8), GaussianRBF(rng.uniform(0.05, 0.3)))
            try:
                return normalize_kdeformed(f, rng.uniform(1.05, 2.0), base)
            except DegenerateDensityError:
                continue
        raise AssertionError("no nondegenerate draw")
    if family == "cts_softmax":
        s2 = rng.uniform(0.002, 0.5)
        mu = rng.uniform(0.0, 1.0)
        return cts_softmax_from_theta((mu / s2, -0.5 / s2), base)
    if family == "cts_sparsemax":
        return cts_sparsemax_from_moments(rng.uniform(0.0, 1.0), rng.uniform(0.02, 0.5), base)
    K = int(rng.integers(1, 5))
    return gaussian_mixture(rng.dirichlet(np.ones(K)), rng.uniform(0, 1, K), rng.uniform(0.02, 0.3, K) ** 2, base)


DENSITY_FAMILIES = ["kernel_exp", "kernel_deformed", "cts_softmax", "cts_sparsemax", "gmm"]


@pytest.mark.parametrize("family", DENSITY_FAMILIES)
def test_expectation_of_one(family):
    d = random_density(np.random.default_rng(3), family)
    assert expectation(d, lambda t: np.ones_like(t)) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("family", DENSITY_FAMILIES)
def test_support_sign(family):
    d = random_density(np.random.default_rng(5), family)
    t = np.linspace(0, 1, 5001)
    p = d.pdf(t)
    if family in ("kernel_deformed", "cts_sparsemax"):
        assert np.all(p[~d.support.contains(t)] == 0.0)
    else:
        assert np.all(p > 0.0)


@pytest.mark.parametrize("family", DENSITY_FAMILIES)
def test_finer_rule_mass(family):
    d = random_density(np.random.default_rng(11), family)
    finer = build_rule(UNIT, 4 * 64, 8)
    assert mass(d, finer) == pytest.approx(1.0, abs=1e-5)


def test_symmetric_expectation():
    d = normalize_kexp(RkhsFunction([1.0, 2.0, 1.0], [0.2, 0.5, 0.8], GaussianRBF(0.1)), UNIT)
    assert expectation(d, lambda t: t - 0.5) == pytest.approx(0.0, abs=1e-8)


def test_gaussian_base_deformed_support_on_truncated_domain():
    base = BaseDensity.gaussian(0.0, 1.0)
    d = normalize_kdeformed(lambda t: np.zeros(np.shape(t)), 2.0, base)
    assert d.support.intervals == (base.domain,)


def test_export_csv(tmp_path):
    d = parabola()
    path = tmp_path / "p.csv"
    assert write_density_csv(d, path, 1000) == 1000
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "pdf_q", "pdf_lebesgue"]
    assert len(rows) == 1001
    data = np.array(rows[1:], dtype=float)
    outside = np.abs(data[:, 0]) > SQRT3
    assert np.all(data[outside, 1:] == 0.0)
    assert trapezoid(data[:, 2], data[:, 0]) == pytest.approx(1.0, abs=1e-3)
    side = (tmp_path / "p.csv.support").read_text()
    assert side.startswith("support [")

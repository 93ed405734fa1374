import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernel_attention import ArgumentError, BasisSet, NumericError, TimeSeries, ValueParams, eval_basis
from kernel_attention import fit_ridge, value_eval
from kernel_attention.value_function import (
    read_timeseries_csv,
    ridge_gradient,
    ridge_objective,
    write_timeseries_csv,
)

from .oracles import ridge_direct


def random_series(rng, O=3, L=40):
    t = np.sort(rng.uniform(0, 1, L))
    return TimeSeries(t, rng.normal(size=(O, L)))


class TestBasis:
    def test_single(self):
        b = BasisSet(1)
        assert eval_basis(b, 0.5).tolist() == [1.0]

    def test_far_away(self):
        assert np.all(eval_basis(BasisSet(8), 25.0) < 1e-6)

    def test_three_on_unit_interval(self):
        vals = eval_basis(BasisSet(3), 0.0)
        oracle = [np.exp(-0.5 * ((0.0 - c) / 0.5) ** 2) for c in (0.0, 0.5, 1.0)]
        assert vals == pytest.approx(oracle, abs=1e-15)
        assert vals[0] == 1.0 and vals[0] > vals[1] > vals[2]

    def test_unit_at_centers(self):
        b = BasisSet(7, (-1.0, 3.0))
        assert np.allclose(np.diag(b.design(b.centers)), 1.0)
        assert np.all(np.diff(b.centers) > 0)

    def test_rejects_empty(self):
        with pytest.raises(ArgumentError):
            BasisSet(0)


def test_timeseries_validation():
    with pytest.raises(ArgumentError):
        TimeSeries([0.1, 0.1], [[1.0, 2.0]])
    with pytest.raises(ArgumentError):
        TimeSeries([0.1, 0.2], [[1.0, np.nan]])


class TestRidge:
    def test_identity_design(self):
        class Indicator:
            # psi_n(t) = 1 if t == n else 0, observed at t = 0..n-1
            n = 4

            def design(self, times):
                return (np.arange(self.n)[:, None] == np.asarray(times)[None, :]).astype(float)

        H = np.random.default_rng(0).normal(size=(2, 4))
        B = fit_ridge(TimeSeries(np.arange(4.0), H), Indicator(), 0.0).B
        assert np.array_equal(B, H)

    def test_huge_lambda_shrinks(self):
        rng = np.random.default_rng(1)
        s = random_series(rng)
        b = BasisSet(10)
        lam = 1e9
        B = fit_ridge(s, b, lam).B
        HFt = s.values @ b.design(s.times).T
        # ||(F F^T + lam I)^-1||_2 <= 1/lam
        assert np.linalg.norm(B) <= np.linalg.norm(HFt) / lam
        assert np.linalg.norm(B) < 1e-6

    def test_first_order_optimality(self):
        rng = np.random.default_rng(2)
        s, b = random_series(rng), BasisSet(12)
        p = fit_ridge(s, b, 1e-2)
        assert np.max(np.abs(ridge_gradient(p, s, b, 1e-2))) < 1e-8
        assert np.allclose(p.B, ridge_direct(s.values, b.design(s.times), 1e-2), atol=1e-9)

    def test_singular_without_lambda_gets_jitter(self):
        b = BasisSet(6)
        s = TimeSeries([0.5], [[1.0]])
        p = fit_ridge(s, b, 0.0)
        assert np.all(np.isfinite(p.B))

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            ValueParams(np.array([[np.inf]]))

    def test_local_optimality_probe(self):
        rng = np.random.default_rng(3)
        s, b = random_series(rng), BasisSet(9)
        lam = 0.05
        p = fit_ridge(s, b, lam)
        best = ridge_objective(p, s, b, lam)
        for _ in range(100):
            delta = rng.normal(scale=10 ** rng.uniform(-6, 0), size=p.B.shape)
            assert best <= ridge_objective(ValueParams(p.B + delta), s, b, lam)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_row_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        s, b = random_series(rng, O=4), BasisSet(8)
        perm = rng.permutation(4)
        B = fit_ridge(s, b, 1e-3).B
        Bp = fit_ridge(TimeSeries(s.times, s.values[perm]), b, 1e-3).B
        assert np.allclose(Bp, B[perm], atol=1e-12)

    def test_norm_monotone_in_lambda(self):
        rng = np.random.default_rng(4)
        s, b = random_series(rng), BasisSet(16)
        norms = [np.linalg.norm(fit_ridge(s, b, lam).B) for lam in np.logspace(-6, 3, 10)]
        assert all(y <= x for x, y in zip(norms, norms[1:]))


class TestValueEval:
    def test_zero(self):
        assert np.all(value_eval(ValueParams(np.zeros((3, 5))), BasisSet(5), 0.4) == 0.0)

    def test_selector(self):
        b = BasisSet(5)
        B = np.zeros((1, 5))
        B[0, 2] = 1.0
        t = np.linspace(0, 1, 9)
        assert np.allclose(value_eval(ValueParams(B), b, t)[0], b(t)[:, 2])

    def test_interpolation(self):
        t = np.linspace(0, 1, 20)
        b = BasisSet(20)
        s = TimeSeries(t, np.sin(2 * np.pi * t)[None, :])
        p = fit_ridge(s, b, 1e-8)
        assert np.max(np.abs(value_eval(p, b, t) - s.values)) < 1e-3


def test_csv_round_trip(tmp_path):
    s = random_series(np.random.default_rng(5), O=2, L=7)
    path = tmp_path / "s.csv"
    write_timeseries_csv(s, path)
    assert path.read_text().splitlines()[0] == "time,dim_0,dim_1"
    back = read_timeseries_csv(path)
    assert np.array_equal(back.times, s.times) and np.array_equal(back.values, s.values)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,x\n0.1,1\n")
    with pytest.raises(ArgumentError):
        read_timeseries_csv(path)

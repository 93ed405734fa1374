"""Basis-expansion value function ``V(t) = B psi(t)`` and its ridge fit."""

import csv
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ArgumentError, NumericError

RIDGE_JITTER = 1e-12


@dataclass(frozen=True, eq=False)
class BasisSet:
    """``N`` Gaussian bumps on evenly spaced centers; width equals the spacing.

    With one basis function the center is the domain midpoint and the width
    is the whole domain.
    """

    n: int
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        if int(self.n) < 1:
            raise ArgumentError("basis needs N >= 1")
        lo, hi = map(float, self.domain)
        if not hi > lo:
            raise ArgumentError("basis domain must have hi > lo")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "domain", (lo, hi))

    @property
    def centers(self):
        lo, hi = self.domain
        if self.n == 1:
            return np.array([0.5 * (lo + hi)])
        return np.linspace(lo, hi, self.n)

    @property
    def width(self):
        lo, hi = self.domain
        return (hi - lo) if self.n == 1 else (hi - lo) / (self.n - 1)

    def __call__(self, t):
        d = np.subtract.outer(np.asarray(t, dtype=float), self.centers)
        return np.exp(-0.5 * (d / self.width) ** 2)

    def design(self, times):
        """``F`` with ``F[n, l] = psi_n(times[l])``, shape ``(N, L)``."""
        return self(np.asarray(times, dtype=float)).T


def eval_basis(basis, t):
    return basis(t)


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Observations ``values[o, l]`` at strictly increasing ``times[l]``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        h = np.asarray(self.values, dtype=float)
        if h.ndim == 1:
            h = h[None, :]
        if t.ndim != 1 or t.size < 1 or h.ndim != 2 or h.shape[1] != t.size:
            raise ArgumentError("values must be O x L with L = len(times) >= 1")
        if np.any(np.diff(t) <= 0):
            raise ArgumentError("times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(h))):
            raise ArgumentError("time series contains non-finite entries")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", h)

    @property
    def dims(self):
        return self.values.shape[0]

    def __len__(self):
        return self.times.size


@dataclass(frozen=True, eq=False)
class ValueParams:
    B: np.ndarray

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.B, dtype=float))
        if not np.all(np.isfinite(b)):
            raise NumericError("value parameters are not finite")
        object.__setattr__(self, "B", b)


def _solve_spd(gram, rhs, allow_jitter):
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=False)
    except linalg.LinAlgError:
        if not allow_jitter:
            raise NumericError("ridge normal equations are not positive definite") from None
        gram = gram + RIDGE_JITTER * np.eye(gram.shape[0])
        try:
            factor = linalg.cho_factor(gram, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise NumericError("ridge normal equations singular even with jitter") from None
    return linalg.cho_solve(factor, rhs, check_finite=False)


def fit_ridge(series, basis, lam):
    """``B* = H F^T (F F^T + lam I)^-1`` by a Cholesky solve.

    With ``lam == 0`` a singular ``F F^T`` gets a 1e-12 diagonal jitter.
    """
    lam = float(lam)
    if not lam >= 0:
        raise ArgumentError("ridge lambda must be >= 0")
    F = basis.design(series.times)
    gram = F @ F.T + lam * np.eye(basis.n)
    # B G = H F^T  <=>  G B^T = F H^T  (G symmetric)
    Bt = _solve_spd(gram, F @ series.values.T, allow_jitter=(lam == 0.0))
    if not np.all(np.isfinite(Bt)):
        raise NumericError("ridge solve produced non-finite coefficients")
    return ValueParams(Bt.T)


def ridge_objective(params, series, basis, lam):
    F = basis.design(series.times)
    r = params.B @ F - series.values
    return float(np.sum(r * r) + lam * np.sum(params.B * params.B))


def ridge_gradient(params, series, basis, lam):
    """``2 (B F - H) F^T + 2 lam B``; zero at the ridge optimum."""
    F = basis.design(series.times)
    return 2.0 * (params.B @ F - series.values) @ F.T + 2.0 * lam * params.B


def value_eval(params, basis, t):
    """``B psi(t)``: shape ``(O,)`` for scalar ``t``, ``(O, len(t))`` otherwise."""
    return params.B @ basis(t).T


def read_timeseries_csv(path):
    """Read a ``time,dim_0,...,dim_{O-1}`` file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ArgumentError(f"{path}: empty time series file")
    header = [h.strip() for h in rows[0]]
    if header[0] != "time" or header[1:] != [f"dim_{i}" for i in range(len(header) - 1)]:
        raise ArgumentError(f"{path}: header must be time,dim_0,...")
    if len(header) < 2:
        raise ArgumentError(f"{path}: no value columns")
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ArgumentError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != len(header):
        raise ArgumentError(f"{path}: ragged or empty rows")
    return TimeSeries(data[:, 0], data[:, 1:].T)


def write_timeseries_csv(series, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + [f"dim_{i}" for i in range(series.dims)])
        for l in range(len(series)):
            w.writerow([repr(float(series.times[l]))] + [repr(float(x)) for x in series.values[:, l]])

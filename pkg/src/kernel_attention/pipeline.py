"""Run configuration, synthetic data, the training loop, and density export/fitting."""

import csv
import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from . import densities
from .attention import (
    KERNEL_FAMILIES,
    AttentionConfig,
    AttentionEngine,
    HeadParams,
    head_density,
    init_head_params,
)
from .deformed import beta_exp, beta_exp_power
from .errors import ArgumentError, TrainingError
from .gmm import DiscreteAttention, weighted_em_fit
from .quadrature import BaseDensity, build_rule
from .rkhs import GaussianRBF, RkhsFunction, default_inducing_points
from .value_function import BasisSet, TimeSeries, ValueParams, fit_ridge, value_eval

WINDOWS = ((0.1, 0.2), (0.45, 0.55), (0.8, 0.9))
BASE_LENGTH = 200
BUMP_WIDTH = 0.04
NOISE_SIGMA = 0.1


@dataclass(frozen=True)
class RunConfig:
    density_family: str = "kernel_sparsemax"
    alpha: float = 2.0
    heads: int = 8
    inducing_points: int = 16
    bandwidth: float = 0.05
    basis: int = 32
    ridge_lambda: float = 1e-3
    base: dict = dataclasses.field(default_factory=lambda: {"kind": "uniform", "lo": 0.0, "hi": 1.0})
    panels: int = 64
    nodes_per_panel: int = 8
    max_boundaries: int = 8
    parametrization: str = "normalized"
    components: int = 3
    learning_rate: float = 1e-2
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    variance_floor: float = 1e-6
    hidden_units: int = 64
    encoder_grid: int = 32
    classes: int = 3
    train_per_class: int = 100
    test_per_class: int = 50
    keep_fraction: float = 0.3

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ArgumentError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")
        if self.basis < 1 or self.hidden_units < 1 or self.encoder_grid < 1:
            raise ArgumentError("basis, hidden_units and encoder_grid must be >= 1")
        if not self.ridge_lambda >= 0 or not self.variance_floor > 0:
            raise ArgumentError("ridge_lambda must be >= 0 and variance_floor > 0")
        self.attention_config()  # validates family, alpha, head settings

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ArgumentError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ArgumentError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ArgumentError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def base_density(self):
        return BaseDensity.from_spec(self.base)

    def attention_config(self):
        return AttentionConfig(
            family=self.density_family,
            alpha=self.alpha,
            heads=self.heads,
            inducing_points=self.inducing_points,
            bandwidth=self.bandwidth,
            base=self.base_density(),
            panels=self.panels,
            nodes_per_panel=self.nodes_per_panel,
            max_boundaries=self.max_boundaries,
            components=self.components,
            parametrization=self.parametrization,
        )

    def value_basis(self):
        return BasisSet(self.basis, self.base_density().domain)


# -- synthetic data -------------------------------------------------------------


@dataclass(eq=False)
class SyntheticDataset:
    sequences: list
    labels: np.ndarray
    split: np.ndarray  # "train" / "test" per sequence

    def subset(self, which):
        idx = np.nonzero(self.split == which)[0]
        return [self.sequences[i] for i in idx], self.labels[idx]


def class_signal(label, t):
    """Noise-free signal of class ``label``: full bump in window ``label``,
    half bump in window ``label + 1 (mod 3)``."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for k, amp in ((label, 2.0), ((label + 1) % 3, 1.0)):
        lo, hi = WINDOWS[k]
        centre = 0.5 * (lo + hi)
        out += amp * np.exp(-0.5 * ((t - centre) / (0.5 * BUMP_WIDTH)) ** 2)
    return out


def generate_synthetic(seed, classes=3, per_class=100, keep_fraction=0.3, test_per_class=50):
    """Irregularly sampled bump series with class-specific windows.

    ``per_class`` training and ``test_per_class`` test sequences per class, in a
    fixed interleaved order. Each keeps ``round(keep_fraction * 200)`` points
    (at least 2) of a length-200 grid on [0, 1], chosen uniformly at random.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ArgumentError("keep_fraction must lie in (0, 1]")
    if not 1 <= classes <= len(WINDOWS):
        raise ArgumentError(f"classes must lie in 1..{len(WINDOWS)}")
    if per_class < 0 or test_per_class < 0:
        raise ArgumentError("per-class counts must be >= 0")
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, BASE_LENGTH)
    keep = max(2, int(round(keep_fraction * BASE_LENGTH)))
    seqs, labels, split = [], [], []
    for name, count in (("train", per_class), ("test", test_per_class)):
        for _ in range(count):
            for c in range(classes):
                y = class_signal(c, grid) + NOISE_SIGMA * rng.standard_normal(BASE_LENGTH)
                idx = np.sort(rng.choice(BASE_LENGTH, size=keep, replace=False))
                seqs.append(TimeSeries(grid[idx], y[idx][None, :]))
                labels.append(c)
                split.append(name)
    return SyntheticDataset(seqs, np.asarray(labels, dtype=int), np.asarray(split))


# -- model ----------------------------------------------------------------------


@dataclass(eq=False)
class Model:
    config: RunConfig
    W1: np.ndarray
    b1: np.ndarray
    heads: HeadParams
    Wc: np.ndarray
    bc: np.ndarray

    def __post_init__(self):
        self.engine = AttentionEngine(self.config.attention_config(), self.config.value_basis())

    def params(self):
        out = {"W1": self.W1, "b1": self.b1, "Wc": self.Wc, "bc": self.bc}
        out.update({"head." + k: a for k, a in self.heads.arrays.items()})
        return out

    def to_json(self):
        cfg = self.config
        return {
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "inducing_points": self.engine.points.tolist(),
            "value_function": {"basis": cfg.basis, "ridge_lambda": cfg.ridge_lambda, "refit": "per_sequence"},
            "encoder": {"W1": self.W1.tolist(), "b1": self.b1.tolist()},
            "heads": self.heads.to_json(),
            "classifier": {"Wc": self.Wc.tolist(), "bc": self.bc.tolist()},
        }

    @classmethod
    def from_json(cls, doc):
        cfg = RunConfig.from_dict(doc["config"])
        arr = lambda x: np.asarray(x, dtype=float)  # noqa: E731
        return cls(
            cfg,
            arr(doc["encoder"]["W1"]),
            arr(doc["encoder"]["b1"]),
            HeadParams.from_json(doc["heads"]),
            arr(doc["classifier"]["Wc"]),
            arr(doc["classifier"]["bc"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def init_model(config, dims=1, rng=None):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    d_in = dims * config.encoder_grid
    W1 = rng.normal(0.0, math.sqrt(2.0 / d_in), size=(config.hidden_units, d_in))
    b1 = np.zeros(config.hidden_units)
    heads = init_head_params(config.attention_config(), config.hidden_units, rng)
    d_ctx = config.heads * dims
    Wc = rng.normal(0.0, 1.0 / math.sqrt(d_ctx), size=(config.classes, d_ctx))
    bc = np.zeros(config.classes)
    return Model(config, W1, b1, heads, Wc, bc)


def encode_series(config, series):
    """Fitted value coefficients ``B`` (O x N) and the encoder input (values on a fixed grid)."""
    basis = config.value_basis()
    B = fit_ridge(series, basis, config.ridge_lambda).B
    lo, hi = basis.domain
    grid = np.linspace(lo, hi, config.encoder_grid)
    return B, value_eval(ValueParams(B), basis, grid).ravel()


def _prepare(config, sequences):
    Bs, xs = zip(*(encode_series(config, s) for s in sequences))
    return np.stack(Bs), np.stack(xs)


def _forward(model, Bs, xs):
    h_pre = xs @ model.W1.T + model.b1
    v = np.maximum(h_pre, 0.0)
    c, cache = model.engine.forward(model.heads, v, Bs)
    logits = c @ model.Wc.T + model.bc
    return logits, (xs, h_pre, c, cache)


def _backward(model, dlogits, saved):
    xs, h_pre, c, cache = saved
    grads = {"Wc": dlogits.T @ c, "bc": dlogits.sum(axis=0)}
    bundle = model.engine.backward(cache, dlogits @ model.Wc)
    dh = bundle.v * (h_pre > 0.0)
    grads["W1"] = dh.T @ xs
    grads["b1"] = dh.sum(axis=0)
    grads.update({"head." + k: g for k, g in bundle.params.items()})
    return grads


def predict(model, Bs, xs, batch_size=64):
    out = []
    for i in range(0, len(xs), batch_size):
        logits, _ = _forward(model, Bs[i : i + batch_size], xs[i : i + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def macro_f1(y_true, y_pred, classes):
    scores = []
    for c in range(classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        scores.append(0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


def _metrics(model, data, classes):
    out = {}
    for name, (Bs, xs, y) in data.items():
        pred = predict(model, Bs, xs)
        out[f"{name}_accuracy"] = float(np.mean(pred == y)) if len(y) else float("nan")
        out[f"{name}_macro_f1"] = macro_f1(y, pred, classes)
    return out


def train_demo(config, dataset):
    """Train encoder, attention heads and classifier with plain SGD.

    Returns ``{"model", "metrics"}``; ``metrics["epochs"]`` holds train/test
    accuracy and macro-F1 after every epoch (epoch 0 is the untrained model).
    """
    train_seqs, y_train = dataset.subset("train")
    test_seqs, y_test = dataset.subset("test")
    if not train_seqs:
        raise ArgumentError("dataset has no training sequences")
    dims = train_seqs[0].dims
    rng = np.random.default_rng(config.seed)
    model = init_model(config, dims, rng)
    Btr, xtr = _prepare(config, train_seqs)
    data = {"train": (Btr, xtr, y_train)}
    if test_seqs:
        Bte, xte = _prepare(config, test_seqs)
        data["test"] = (Bte, xte, y_test)
    history = [dict(epoch=0, loss=None, **_metrics(model, data, config.classes))]
    n = len(y_train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            logits, saved = _forward(model, Btr[idx], xtr[idx])
            logp = special.log_softmax(logits, axis=1)
            loss = -float(np.mean(logp[np.arange(len(idx)), y_train[idx]]))
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
            total += loss * len(idx)
            dlogits = np.exp(logp)
            dlogits[np.arange(len(idx)), y_train[idx]] -= 1.0
            dlogits /= len(idx)
            grads = _backward(model, dlogits, saved)
            params = model.params()
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite gradient for {k} in epoch {epoch}", epoch=epoch)
                params[k] -= config.learning_rate * g
        history.append(dict(epoch=epoch, loss=total / n, **_metrics(model, data, config.classes)))
    metrics = {"config": config.to_dict(), "epochs": history}
    return {"model": model, "metrics": metrics}


def write_metrics(metrics, path):
    with open(path, "w") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=1)
        fh.write("\n")


def export_density(model, head, series, grid_points, path):
    """Write one head's attention density for ``series`` as CSV (plus support sidecar)."""
    if not 0 <= head < model.config.heads:
        raise ArgumentError(f"head must lie in 0..{model.config.heads - 1}")
    _, x = encode_series(model.config, series)
    v = np.maximum(model.W1 @ x + model.b1, 0.0)
    d = head_density(v, model.heads, model.engine.config, head)
    return densities.write_density_csv(d, path, grid_points)


# -- density fitting -------------------------------------------------------------


@dataclass
class KernelFit:
    density: object
    coeffs: np.ndarray
    loss: float
    iterations: int


def fit_kernel_density(target, family="kernel_sparsemax", alpha=2.0, inducing=16, bandwidth=None,
                       base=None, panels=256, nodes_per_panel=4, max_iter=2000):
    """Least-squares fit of a kernel family to a target density on ``base``.

    Minimizes ``int (p - target)^2 dQ`` over the kernel coefficients on a
    fixed Gauss-Legendre grid with L-BFGS and analytic gradients, starting
    from the base density. ``target`` is a vectorized callable giving the
    target density w.r.t. ``Q``. The bandwidth defaults to the inducing-point
    spacing.
    """
    if family not in KERNEL_FAMILIES:
        raise ArgumentError(f"fit_kernel_density needs a kernel family, got {family!r}")
    base = BaseDensity.uniform() if base is None else base
    beta = 1.0 if family == "kernel_exp" else 2.0 - (2.0 if family == "kernel_sparsemax" else float(alpha))
    points = default_inducing_points(inducing, base.domain)
    lo, hi = base.domain
    if bandwidth is None:
        bandwidth = (hi - lo) / max(inducing - 1, 1)
    kern = GaussianRBF(bandwidth)
    rule = build_rule(base, panels, nodes_per_panel)
    t, w = rule.nodes, rule.weights
    K = kern(t, points)
    y = np.asarray(target(t), dtype=float)

    def objective(g):
        s = K @ g
        if beta == 1.0:
            u = np.exp(s - s.max())
            slope = u
        else:
            u = beta_exp(s, beta)
            slope = beta_exp_power(s, beta, beta)
        Z = w @ u
        if not Z > 0:
            return 1e6, np.zeros_like(g)
        p = u / Z
        r = p - y
        loss = float(w @ (r * r))
        # dL/ds_j = 2 w_j slope_j / Z * (r_j - sum_m w_m r_m p_m)
        adj = 2.0 * w * slope / Z * (r - w @ (r * p))
        return loss, K.T @ adj

    res = optimize.minimize(objective, np.zeros(len(points)), jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "gtol": 1e-12, "ftol": 1e-15})
    f = RkhsFunction(res.x, points, kern)
    if family == "kernel_exp":
        d = densities.normalize_kexp(f, base)
    else:
        d = densities.normalize_kdeformed(f, 2.0 if family == "kernel_sparsemax" else alpha, base)
    return KernelFit(d, res.x, float(res.fun), int(res.nit))


def l1_distance(d, target, base=None, panels=2048, nodes_per_panel=4):
    """``int |p - target| dQ`` on a fine fixed grid."""
    base = d.base if base is None else base
    rule = build_rule(base, panels, nodes_per_panel)
    if getattr(d, "support", None) is not None and isinstance(d, densities.KernelDeformedDensity):
        rule = rule.split_at(d.support.boundaries())
    t = rule.nodes
    return float(rule.weights @ np.abs(np.asarray(d.pdf(t)) - np.asarray(target(t))))


def read_weighted_points(path):
    """Read a ``t,w`` CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:2]] != ["t", "w"]:
        raise ArgumentError(f"{path}: expected header t,w")
    try:
        data = np.array([[float(r[0]), float(r[1])] for r in rows[1:] if r])
    except (ValueError, IndexError) as exc:
        raise ArgumentError(f"{path}: {exc}") from None
    if data.size == 0:
        raise ArgumentError(f"{path}: no data rows")
    return data[:, 0], data[:, 1]


def fit_density_from_points(config, t, w):
    """Fit the configured family to weighted points.

    ``gmm`` runs weighted EM on the weights normalized to sum to one; kernel
    families are least-squares fits to ``w`` read as target density values
    at ``t`` (linearly interpolated).
    """
    base = config.base_density()
    if config.density_family == "gmm":
        w = np.asarray(w, dtype=float)
        if np.any(w < 0) or not w.sum() > 0:
            raise ArgumentError("gmm weights must be nonnegative with a positive sum")
        att = DiscreteAttention(t, w / w.sum())
        fit = weighted_em_fit(att, config.components, floor=config.variance_floor, seed=config.seed)
        m = fit.mixture
        return densities.gaussian_mixture(m.weights, m.means, m.variances, base)
    if config.density_family not in KERNEL_FAMILIES:
        raise ArgumentError(f"fit-density supports gmm and kernel families, not {config.density_family!r}")
    order = np.argsort(t)
    ts, ws = np.asarray(t, dtype=float)[order], np.asarray(w, dtype=float)[order]
    fit = fit_kernel_density(lambda x: np.interp(x, ts, ws), config.density_family, config.alpha,
                             config.inducing_points, config.bandwidth, base)
    return fit.density

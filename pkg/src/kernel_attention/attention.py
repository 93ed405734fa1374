"""Multi-head continuous attention with hand-derived adjoints.

A feature vector ``v`` is mapped per head to density parameters by affine maps
(``softplus`` for scales). Each head's context is ``c_h = B m_h`` with
``m_h = E_{p_h}[psi(T)]``; heads share one value function and their contexts
are concatenated.

The engine is batched over sequences and heads. Quadrature uses ``panels``
equal cells plus up to ``max_boundaries`` extra breakpoints placed on the
support boundaries of sparse heads, so every array keeps a fixed shape;
unused breakpoints collapse onto the left domain edge and get zero weight.
Gradients treat nodes and weights as fixed (the discretization is
differentiated); boundary motion adds nothing because the integrand is zero
there.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import densities
from .deformed import alpha_value, beta_exp, beta_exp_power
from .errors import ArgumentError, DegenerateDensityError, NumericError, StateError
from .quadrature import BaseDensity, _gauss_legendre, integrate
from .rkhs import GaussianRBF, RkhsFunction, default_bandwidth, default_inducing_points
from .value_function import BasisSet

FAMILIES = ("kernel_exp", "kernel_deformed", "kernel_sparsemax", "cts_softmax", "cts_sparsemax", "gmm")
KERNEL_FAMILIES = ("kernel_exp", "kernel_deformed", "kernel_sparsemax")
SPARSE_FAMILIES = ("kernel_deformed", "kernel_sparsemax", "cts_sparsemax")
BISECTION_STEPS = 24
REFINE_PASSES = 2
SHIFT_BISECTIONS = 16


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    return special.expit(x)


@dataclass(frozen=True)
class AttentionConfig:
    family: str = "kernel_sparsemax"
    alpha: float = 2.0
    heads: int = 8
    inducing_points: int = 16
    bandwidth: float = None
    base: BaseDensity = field(default_factory=BaseDensity.uniform)
    panels: int = 64
    nodes_per_panel: int = 8
    max_boundaries: int = 8
    components: int = 3
    detect_per_panel: int = 4
    parametrization: str = "scaled"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ArgumentError(f"unknown density family {self.family!r}; choose from {FAMILIES}")
        if self.family == "kernel_deformed":
            object.__setattr__(self, "alpha", alpha_value(self.alpha))
        elif self.family in ("kernel_sparsemax", "cts_sparsemax"):
            object.__setattr__(self, "alpha", 2.0)
        else:
            object.__setattr__(self, "alpha", 1.0)
        for name in ("heads", "inducing_points", "panels", "components", "detect_per_panel"):
            if int(getattr(self, name)) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if int(self.nodes_per_panel) < 2:
            raise ArgumentError("nodes_per_panel must be >= 2")
        if int(self.max_boundaries) < 0:
            raise ArgumentError("max_boundaries must be >= 0")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ArgumentError("bandwidth must be positive")
        if self.parametrization not in ("scaled", "normalized"):
            raise ArgumentError("parametrization must be 'scaled' or 'normalized'")

    @property
    def normalized(self):
        """Sparse kernel heads use ``exp_beta(f - A)`` with ``A`` found by root solving."""
        return self.parametrization == "normalized" and self.family in ("kernel_deformed", "kernel_sparsemax")

    @property
    def sparse(self):
        return self.family in SPARSE_FAMILIES

    @property
    def beta(self):
        return 2.0 - self.alpha

    @property
    def domain(self):
        return self.base.domain

    def kernel(self):
        bw = self.bandwidth
        if bw is None:
            bw = default_bandwidth(self.inducing_points, self.domain)
        return GaussianRBF(float(bw))

    def inducing(self):
        return default_inducing_points(self.inducing_points, self.domain)


# Emitted quantity -> (trailing shape key, output transform).
_EMITTERS = {
    "kernel": {"gamma": ("I", None)},
    "unimodal": {"mu": ("", None), "sigma": ("", "softplus")},
    "gmm": {"logits": ("K", None), "mu": ("K", None), "sigma": ("K", "softplus")},
}


def _emitter_kind(family):
    if family in KERNEL_FAMILIES:
        return "kernel"
    if family == "gmm":
        return "gmm"
    return "unimodal"


@dataclass(eq=False)
class HeadParams:
    """Stacked affine emitters for all heads of one family.

    ``arrays`` maps ``W_<name>`` to shape ``(H, *shape, dv)`` and ``b_<name>``
    to ``(H, *shape)`` for every emitted quantity ``<name>``.
    """

    family: str
    arrays: dict

    @property
    def heads(self):
        return next(iter(self.arrays.values())).shape[0]

    @property
    def feature_dim(self):
        return next(a for k, a in self.arrays.items() if k.startswith("W_")).shape[-1]

    def names(self):
        return list(_EMITTERS[_emitter_kind(self.family)])

    def copy(self):
        return HeadParams(self.family, {k: a.copy() for k, a in self.arrays.items()})

    def permuted(self, order):
        return HeadParams(self.family, {k: a[np.asarray(order)].copy() for k, a in self.arrays.items()})

    def to_json(self):
        return {"family": self.family, "arrays": {k: a.tolist() for k, a in self.arrays.items()}}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["family"], {k: np.asarray(a, dtype=float) for k, a in doc["arrays"].items()})


def init_head_params(config, feature_dim, rng=None, scale=0.0):
    """Zero emitter weights (random ``N(0, scale^2/dv)`` if ``scale > 0``).

    Kernel heads start with zero bias, i.e. the base density. Unimodal heads
    start centred at evenly spaced locations with ``sigma = softplus(0)``;
    mixture heads spread their component means the same way.
    """
    H, dv = config.heads, int(feature_dim)
    lo, hi = config.domain
    rng = np.random.default_rng(0) if rng is None else rng
    shapes = {"I": (config.inducing_points,), "K": (config.components,), "": ()}
    arrays = {}
    for name, (key, _) in _EMITTERS[_emitter_kind(config.family)].items():
        shape = (H,) + shapes[key]
        W = np.zeros(shape + (dv,))
        if scale > 0:
            W = rng.normal(0.0, scale / math.sqrt(dv), size=W.shape)
        b = np.zeros(shape)
        if name == "mu" and key == "":
            b = lo + (hi - lo) * (np.arange(H) + 0.5) / H
        elif name == "mu":
            K = config.components
            b = np.broadcast_to(lo + (hi - lo) * (np.arange(K) + 0.5) / K, shape).copy()
        arrays["W_" + name] = W
        arrays["b_" + name] = b
    return HeadParams(config.family, arrays)


def emit(params, v):
    """Affine pre-activations and emitted quantities for a batch ``v`` of shape ``(nb, dv)``."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if v.shape[-1] != params.feature_dim:
        raise ArgumentError(f"feature vector has length {v.shape[-1]}, heads expect {params.feature_dim}")
    pre, out = {}, {}
    for name, (_, transform) in _EMITTERS[_emitter_kind(params.family)].items():
        W, b = params.arrays["W_" + name], params.arrays["b_" + name]
        z = np.einsum("hsd,bd->bhs", W.reshape(W.shape[0], -1, W.shape[-1]), v).reshape(v.shape[:1] + b.shape) + b
        pre[name] = z
        out[name] = softplus(z) if transform == "softplus" else z
    return pre, out


@dataclass(eq=False)
class GradientBundle:
    """Adjoints: emitted quantities (``gamma`` etc., shape ``(nb, H, ...)``),
    head parameter arrays, ``B`` and ``v``."""

    emitted: dict
    params: dict
    B: np.ndarray
    v: np.ndarray


@dataclass(eq=False)
class ForwardCache:
    emitted: dict
    pre: dict
    v: np.ndarray
    B: np.ndarray
    grid: object
    scores: np.ndarray
    dens: np.ndarray
    m: np.ndarray
    Z: np.ndarray = None
    params: HeadParams = None
    A: np.ndarray = None


def _sparsemax_shift(s, weights):
    """Exact ``A`` with ``sum w [1 + s - A]_+ = 1``: the weighted sparsemax threshold.

    With scores sorted descending, ``W_k`` and ``S_k`` the cumulative sums of
    ``w`` and ``w s``, the support is the largest prefix with
    ``W_k s_(k) - S_k + 1 > 0`` and ``A = (W_k + S_k - 1) / W_k`` there.
    """
    order = np.argsort(-s, axis=-1, kind="stable")
    ss = np.take_along_axis(s, order, -1)
    ww = np.take_along_axis(np.broadcast_to(weights, s.shape), order, -1)
    W = np.cumsum(ww, -1)
    S = np.cumsum(ww * ss, -1)
    k = np.sum(W * ss - S + 1.0 > 0.0, axis=-1, keepdims=True) - 1
    Wk = np.take_along_axis(W, k, -1)[..., 0]
    Sk = np.take_along_axis(S, k, -1)[..., 0]
    return (Wk + Sk - 1.0) / Wk


class _Grid:
    """Quadrature nodes of one forward pass.

    ``static`` nodes are shared by every head (their weights may be masked);
    ``extra`` nodes, shape ``(nb, H, Mx)``, tile the cells that contain a
    support boundary. Tables hold basis and kernel values at both groups.
    """

    def __init__(self, static, extra, weights, psi_s, psi_x, ker_s, ker_x):
        self.static, self.extra, self.weights = static, extra, weights
        self.psi_s, self.psi_x, self.ker_s, self.ker_x = psi_s, psi_x, ker_s, ker_x

    def nodes(self, shape):
        s = np.broadcast_to(self.static, shape + self.static.shape)
        return s if self.extra is None else np.concatenate([s, self.extra], axis=-1)

    def _split(self, x):
        k = self.static.size
        return x[..., :k], x[..., k:]

    def project(self, table_s, table_x, x):
        """``sum_m x[m] table[m, :]``."""
        xs, xx = self._split(x)
        out = xs @ table_s
        if table_x is not None:
            out = out + np.matmul(xx[..., None, :], table_x)[..., 0, :]
        return out

    def apply(self, table_s, table_x, y):
        """``table[m, :] @ y`` at every node."""
        out = y @ table_s.T
        if table_x is None:
            return out
        return np.concatenate([out, np.matmul(table_x, y[..., None])[..., 0]], axis=-1)


class AttentionEngine:
    """Batched forward and backward passes for one density family."""

    def __init__(self, config, basis=None):
        self.config = config
        self.basis = BasisSet(32, config.domain) if basis is None else basis
        if tuple(self.basis.domain) != tuple(config.domain):
            raise ArgumentError("value basis and attention base must share a domain")
        self.kernel = config.kernel()
        self.points = config.inducing()
        lo, hi = config.domain
        self.edges = np.linspace(lo, hi, config.panels + 1)
        self.gl_x, self.gl_w = _gauss_legendre(config.nodes_per_panel)
        self.detect = np.linspace(lo, hi, config.panels * config.detect_per_panel + 1)
        self.static_nodes, self.static_weights = self._panel_nodes(self.edges[:-1], self.edges[1:])
        self.psi_s = self.basis(self.static_nodes)
        self.ker_s = self._kernel_sections(self.static_nodes) if config.family in KERNEL_FAMILIES else None

    def _panel_nodes(self, a, b):
        a, b = np.asarray(a)[..., None], np.asarray(b)[..., None]
        half = 0.5 * (b - a)
        nodes = (a + half * (self.gl_x + 1.0)).reshape(a.shape[:-2] + (-1,))
        weights = (half * self.gl_w).reshape(nodes.shape) * self.config.base.q0(nodes)
        return nodes, weights

    def _kernel_sections(self, t):
        return self.kernel(t, self.points)

    # -- per-family score s(t): p is proportional to exp(s) or exp_beta(s) --
    def score(self, em, t):
        """Scores at locations ``t`` of shape ``(nb, H, M)``."""
        fam = self.config.family
        if fam in KERNEL_FAMILIES:
            return np.matmul(self._kernel_sections(t), em["gamma"][..., None])[..., 0]
        if fam in ("cts_softmax", "cts_sparsemax"):
            mu, sig = em["mu"][..., None], em["sigma"][..., None]
            s = -((t - mu) ** 2) / (2.0 * sig * sig)
            if fam == "cts_softmax":
                s = s - self.config.base.log_q0(t)
            return s
        logp = special.log_softmax(em["logits"], axis=-1)[..., None, :]
        mu, sig = em["mu"][..., None, :], em["sigma"][..., None, :]
        tt = np.asarray(t)[..., None]
        comp = logp - 0.5 * ((tt - mu) / sig) ** 2 - np.log(sig) - 0.5 * math.log(2.0 * math.pi)
        return special.logsumexp(comp, axis=-1) - self.config.base.log_q0(t)

    def _grid_score(self, em, grid, shape):
        if grid.ker_s is not None:
            return grid.apply(grid.ker_s, grid.ker_x, em["gamma"])
        return self.score(em, grid.nodes(shape))

    def _inside(self, em, t, shift=None):
        s = self.score(em, t)
        if shift is not None:
            s = s - shift[..., None]
        return 1.0 + (self.config.alpha - 1.0) * s > 0.0

    def solve_shift(self, s, weights):
        """``A`` with ``sum w exp_beta(s - A) = 1`` per head.

        The mass is convex and decreasing in ``A``, at least one at
        ``min s`` and at most one at ``max s``. Bisection narrows that bracket,
        then Newton from its left end rises monotonically to the root.
        """
        beta = self.config.beta
        if beta == 0.0:
            return _sparsemax_shift(s, weights)

        def mass(A):
            return np.sum(weights * beta_exp(s - A[..., None], beta), axis=-1) - 1.0

        lo, hi = np.min(s, axis=-1), np.max(s, axis=-1)
        for _ in range(SHIFT_BISECTIONS):
            mid = 0.5 * (lo + hi)
            pos = mass(mid) > 0.0
            lo, hi = np.where(pos, mid, lo), np.where(pos, hi, mid)
        A = lo
        for _ in range(50):
            x = s - A[..., None]
            g = np.sum(weights * beta_exp(x, beta), axis=-1) - 1.0
            d = np.sum(weights * beta_exp_power(x, beta, beta), axis=-1)
            step = np.where(d > 0, g / np.where(d > 0, d, 1.0), 0.0)
            A = A + step
            if np.all(np.abs(step) <= 4e-16 * (1.0 + np.abs(A))):
                break
        return A

    def _static_shift(self, em):
        nb = next(iter(em.values())).shape[0]
        s = em["gamma"] @ self.ker_s.T
        return self.solve_shift(s, np.broadcast_to(self.static_weights, (nb, self.config.heads, self.static_weights.size)))

    def support_signature(self, em):
        """Inside/outside pattern of every head on the detection grid."""
        nb = next(iter(em.values())).shape[0]
        shift = self._static_shift(em) if self.config.normalized else None
        return self._inside(em, np.broadcast_to(self.detect, (nb, self.config.heads, self.detect.size)), shift)

    def boundaries(self, em, shift=None):
        """Up to ``max_boundaries`` support boundaries per head, left to right.

        Returns ``(points, valid)``; sign changes of ``1 + (alpha-1) s`` on the
        detection grid are narrowed by bisection and polished by Newton steps.
        """
        cfg = self.config
        nb = next(iter(em.values())).shape[0]
        lo, hi = cfg.domain
        kb = cfg.max_boundaries
        shape = (nb, cfg.heads, kb)
        if kb == 0:
            return np.full(shape, lo), np.zeros(shape, bool)
        if cfg.family == "cts_sparsemax":
            r = math.sqrt(2.0) * em["sigma"]
            cand = np.stack([em["mu"] - r, em["mu"] + r], axis=-1)
            ok = (cand > lo) & (cand < hi)
            # keep the valid ones left-aligned
            order = np.argsort(~ok, axis=-1, kind="stable")
            cand, ok = np.take_along_axis(cand, order, -1), np.take_along_axis(ok, order, -1)
            pts, valid = np.full(shape, lo), np.zeros(shape, bool)
            k = min(2, kb)
            pts[..., :k] = np.where(ok[..., :k], cand[..., :k], lo)
            valid[..., :k] = ok[..., :k]
            return pts, valid
        nb_h = (nb, cfg.heads, self.detect.size)
        sig = self._inside(em, np.broadcast_to(self.detect, nb_h), shift)
        change = sig[..., 1:] != sig[..., :-1]
        rank = np.where(change, np.cumsum(change, axis=-1) - 1, -1)
        slots = np.arange(kb)
        sel = rank[..., None, :] == slots[:, None]  # (nb, H, kb, D-1)
        valid = sel.any(axis=-1)
        pos = np.argmax(sel, axis=-1)
        d = self.detect
        left, right = d[pos], d[pos + 1]
        left_in = np.take_along_axis(sig, pos, axis=-1)
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (left + right)
            same = self._inside(em, mid, shift) == left_in
            left = np.where(same, mid, left)
            right = np.where(same, right, mid)
        b = np.where(valid, 0.5 * (left + right), lo)
        zero = np.zeros(b.shape[:2]) if shift is None else shift
        b = np.clip(self._newton_boundaries(em, b, valid, zero), left, right)
        return np.where(valid, b, lo), valid

    def _grid(self, em, nb):
        cfg = self.config
        w_s = self.static_weights
        if not cfg.sparse:
            H = cfg.heads
            return _Grid(self.static_nodes, None, np.broadcast_to(w_s, (nb, H, w_s.size)), self.psi_s, None, self.ker_s, None)
        if not cfg.normalized:
            b, valid = self.boundaries(em)
            return self._split_grid(b, valid, nb)
        shift = self._static_shift(em)
        b, valid = self.boundaries(em, shift)
        # The shift was solved without the splits; alternate re-solving it and
        # moving the boundaries so the split lands on the kink.
        for _ in range(REFINE_PASSES):
            grid = self._split_grid(b, valid, nb, tables=False)
            shift = self.solve_shift(self._grid_score(em, grid, (nb, cfg.heads)), grid.weights)
            b = self._newton_boundaries(em, b, valid, shift)
        return self._split_grid(b, valid, nb)

    def _newton_boundaries(self, em, b, valid, shift, steps=3):
        q = self.config.alpha - 1.0
        lo, hi = self.config.domain
        bw2 = self.kernel.bandwidth**2
        for _ in range(steps):
            K = self._kernel_sections(b)
            f = np.matmul(K, em["gamma"][..., None])[..., 0]
            dK = -K * (b[..., None] - self.points) / bw2
            fp = np.matmul(dK, em["gamma"][..., None])[..., 0]
            h = 1.0 + q * (f - shift[..., None])
            ok = valid & (np.abs(fp) > 0)
            step = np.where(ok, h / (q * np.where(ok, fp, 1.0)), 0.0)
            b = np.where(valid, np.clip(b - step, lo, hi), b)
        return b

    def _split_grid(self, b, valid, nb, tables=True):
        cfg = self.config
        H, n = cfg.heads, cfg.nodes_per_panel
        P, e = cfg.panels, self.edges
        cell = np.clip(np.searchsorted(e, b, side="right") - 1, 0, P - 1)
        prev_same = np.zeros_like(valid)
        prev_same[..., 1:] = valid[..., :-1] & valid[..., 1:] & (cell[..., 1:] == cell[..., :-1])
        next_same = np.zeros_like(valid)
        next_same[..., :-1] = prev_same[..., 1:]
        left = np.where(prev_same, np.roll(b, 1, axis=-1), e[cell])
        right = np.where(next_same, b, e[cell + 1])
        lo = cfg.domain[0]
        left, mid, right = (np.where(valid, x, lo) for x in (left, b, right))
        extra, w_x = self._panel_nodes(np.stack([left, mid], axis=-1), np.stack([mid, right], axis=-1))
        extra = extra.reshape(nb, H, -1)
        w_x = w_x.reshape(nb, H, -1)
        hit = np.zeros((nb, H, P), bool)
        ib, ih, _ = np.nonzero(valid)
        hit[ib, ih, cell[valid]] = True
        w_static = np.where(np.repeat(hit, n, axis=-1), 0.0, self.static_weights)
        ker_x = self._kernel_sections(extra) if self.ker_s is not None else None
        psi_x = self.basis(extra) if tables else None
        grid = _Grid(self.static_nodes, extra, np.concatenate([w_static, w_x], -1), self.psi_s, psi_x, self.ker_s, ker_x)
        grid.bounds, grid.valid = b, valid
        return grid

    # -- forward / backward ----------------------------------------------
    def forward(self, params, v, B):
        """Contexts ``c`` of shape ``(nb, H*O)`` and the cache for :meth:`backward`."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        pre, em = emit(params, v)
        return self.forward_emitted(em, B, pre=pre, v=v, params=params)

    def forward_emitted(self, em, B, pre=None, v=None, params=None):
        cfg = self.config
        B = np.asarray(B, dtype=float)
        if B.shape[-1] != self.basis.n:
            raise ArgumentError(f"B has {B.shape[-1]} columns, basis has {self.basis.n}")
        nb = next(iter(em.values())).shape[0]
        H = cfg.heads
        grid = self._grid(em, nb)
        s = self._grid_score(em, grid, (nb, H))
        Z = A = None
        if cfg.normalized:
            A = self.solve_shift(s, grid.weights)
            dens = beta_exp(s - A[..., None], cfg.beta)
        elif cfg.sparse:
            u = beta_exp(s, cfg.beta)
            Z = np.sum(grid.weights * u, axis=-1)
            if np.any(~(Z > densities.Z_FLOOR)):
                raise DegenerateDensityError("an attention head has empty support")
            dens = u / Z[..., None]
        else:
            with np.errstate(divide="ignore"):
                logw = np.log(grid.weights)
            A = special.logsumexp(s + logw, axis=-1)
            dens = np.exp(s - A[..., None])
        m = grid.project(grid.psi_s, grid.psi_x, grid.weights * dens)
        if B.ndim == 2:
            c = np.einsum("on,bhn->bho", B, m)
        else:
            c = np.einsum("bon,bhn->bho", B, m)
        if not np.all(np.isfinite(c)):
            raise NumericError("non-finite attention context")
        cache = ForwardCache(em, pre, v, B, grid, s, dens, m, Z, params, A)
        return c.reshape(nb, -1), cache

    def backward(self, cache, upstream):
        """Adjoints of ``<upstream, c>`` through the cached forward pass."""
        if cache is None:
            raise StateError("backward needs the cache of a forward pass")
        cfg = self.config
        grid = cache.grid
        nb, H = cache.m.shape[:2]
        U = np.asarray(upstream, dtype=float).reshape(nb, H, -1)
        B = cache.B
        if B.ndim == 2:
            ghat = np.einsum("on,bho->bhn", B, U)
            dB = np.einsum("bho,bhn->on", U, cache.m)
        else:
            ghat = np.einsum("bon,bho->bhn", B, U)
            dB = np.einsum("bho,bhn->bon", U, cache.m)
        gpsi = grid.apply(grid.psi_s, grid.psi_x, ghat)
        centred = gpsi - np.sum(ghat * cache.m, axis=-1)[..., None]
        if cfg.normalized:
            # escort-centred: dA/ds_j = w_j p_j^beta / sum w p^beta
            slope = beta_exp_power(cache.scores - cache.A[..., None], cfg.beta, cfg.beta)
            wp = grid.weights * slope
            centred = gpsi - (np.sum(wp * gpsi, -1) / np.sum(wp, -1))[..., None]
        elif cfg.sparse:
            slope = beta_exp_power(cache.scores, cfg.beta, cfg.beta) / cache.Z[..., None]
        else:
            slope = cache.dens
        a = grid.weights * slope * centred  # d<U, c>/ds at each node
        dem = self._score_adjoint(cache, a)
        dparams, dv = {}, None
        if cache.params is not None:
            dparams, dv = self._emitter_adjoint(cache, dem)
        return GradientBundle(dem, dparams, dB, dv)

    def _score_adjoint(self, cache, a):
        fam = self.config.family
        em, grid = cache.emitted, cache.grid
        if fam in KERNEL_FAMILIES:
            return {"gamma": grid.project(grid.ker_s, grid.ker_x, a)}
        t = grid.nodes(a.shape[:2])
        if fam in ("cts_softmax", "cts_sparsemax"):
            mu, sig = em["mu"][..., None], em["sigma"][..., None]
            d = t - mu
            return {"mu": np.sum(a * d, -1) / sig[..., 0] ** 2, "sigma": np.sum(a * d * d, -1) / sig[..., 0] ** 3}
        logp = special.log_softmax(em["logits"], axis=-1)
        mu, sig = em["mu"][..., None, :], em["sigma"][..., None, :]
        d = t[..., None] - mu
        comp = logp[..., None, :] - 0.5 * (d / sig) ** 2 - np.log(sig)
        r = np.exp(comp - special.logsumexp(comp, axis=-1, keepdims=True))
        ar = a[..., None] * r
        return {
            "logits": np.sum(ar, axis=-2) - np.sum(a, -1)[..., None] * np.exp(logp),
            "mu": np.sum(ar * d, axis=-2) / sig[..., 0, :] ** 2,
            "sigma": np.sum(ar * (d * d / sig**2 - 1.0), axis=-2) / sig[..., 0, :],
        }

    def _emitter_adjoint(self, cache, dem):
        grads = {}
        dv = np.zeros_like(cache.v)
        arrays = cache.params.arrays
        for name, (_, transform) in _EMITTERS[_emitter_kind(self.config.family)].items():
            dz = dem[name]
            if transform == "softplus":
                dz = dz * softplus_grad(cache.pre[name])
            W = arrays["W_" + name]
            flat = dz.reshape(dz.shape[0], W.shape[0], -1)
            Wf = W.reshape(W.shape[0], -1, W.shape[-1])
            grads["W_" + name] = np.einsum("bhs,bd->hsd", flat, cache.v).reshape(W.shape)
            grads["b_" + name] = dz.sum(axis=0)
            dv += np.einsum("hsd,bhs->bd", Wf, flat)
        return grads, dv


def forward_context(v, heads, B, basis, config):
    """Context ``c`` (length ``H*O``) for a single feature vector."""
    engine = AttentionEngine(config, basis)
    c, _ = engine.forward(heads, np.asarray(v, dtype=float)[None, :], B)
    return c[0]


def head_density(v, params, config, head=0):
    """Library density of one head for a single feature vector.

    Normalized by the adaptive routines in :mod:`densities`, independently of
    the engine's fixed-shape quadrature.
    """
    _, em = emit(params, np.asarray(v, dtype=float)[None, :])
    em = {k: a[0, head] for k, a in em.items()}
    fam, base = config.family, config.base
    if fam in KERNEL_FAMILIES:
        f = RkhsFunction(em["gamma"], config.inducing(), config.kernel())
        if fam == "kernel_exp":
            return densities.normalize_kexp(f, base)
        if config.normalized:
            A = densities.deformed_log_normalizer(f, config.alpha, base)
            return densities.normalize_kdeformed(lambda t: f(t) - A, config.alpha, base)
        return densities.normalize_kdeformed(f, config.alpha, base)
    if fam == "cts_sparsemax":
        return densities.cts_sparsemax_from_moments(em["mu"], em["sigma"], base)
    if fam == "cts_softmax":
        s2 = float(em["sigma"]) ** 2
        return densities.cts_softmax_from_theta((float(em["mu"]) / s2, -0.5 / s2), base)
    return densities.gaussian_mixture(special.softmax(em["logits"]), em["mu"], em["sigma"] ** 2, base)


def grad_log_normalizer(d, g, rule=None):
    """Directional derivative of the log-normalizer along ``g``.

    Exponential family: ``E_p[g]``. Deformed family: the escort expectation
    ``int p^(2-alpha) g dQ / int p^(2-alpha) dQ``.
    """
    if isinstance(d, densities.KernelDeformedDensity):
        rule = d.rule if rule is None else rule
        beta = d.beta

        def escort(t):
            w = beta_exp_power(d.f_tilde(t), beta, beta)
            return np.stack([w, w * np.asarray(g(t), dtype=float)], axis=-1)

        num_den = integrate(escort, rule, rtol=1e-12, warn=False).value
        if not num_den[0] > 0:
            raise DegenerateDensityError("escort normalizer is zero")
        return float(num_den[1] / num_den[0])
    return float(densities.expectation(d, g, rule))


def _loss(c, U, kind):
    if kind == "linear":
        return float(np.sum(U * c))
    return 0.5 * float(np.sum((c - U) ** 2))


def fd_gradcheck(engine, params, v, B, seed=0, step=1e-5, loss="linear", targets=("emitted", "params", "B"),
                 detail=False):
    """Central-difference check of :meth:`AttentionEngine.backward`.

    ``loss`` is ``"linear"`` (``<U, c>`` with seeded random ``U``) or
    ``"quadratic"`` (``0.5 |c - U|^2``). Every entry of the selected targets
    is probed. For sparse families a probe whose support pattern differs at
    ``+step`` or ``-step`` is skipped and listed, not failed.

    Returns ``{"max_rel_err", "location", "checked", "skipped"}`` with
    relative error ``|a - fd| / (|a| + |fd| + 1e-12)``. With ``detail`` the
    report also lists ``(location, analytic, fd)`` for every checked probe.
    """
    if loss not in ("linear", "quadratic"):
        raise ArgumentError("loss must be 'linear' or 'quadratic'")
    rng = np.random.default_rng(seed)
    v = np.atleast_2d(np.asarray(v, dtype=float))
    B = np.asarray(B, dtype=float)
    pre, em = emit(params, v)
    c, cache = engine.forward_emitted(em, B, pre=pre, v=v, params=params)
    U = rng.standard_normal(c.shape)
    upstream = U if loss == "linear" else c - U
    grads = engine.backward(cache, upstream)
    sparse = engine.config.sparse
    base_sig = engine.support_signature(em) if sparse else None

    def run(em_, B_):
        cc, _ = engine.forward_emitted(em_, B_)
        return _loss(cc, U, loss)

    probes = []
    if "emitted" in targets:
        for name, arr in em.items():
            probes.append((("emitted", name), arr, grads.emitted[name]))
    if "params" in targets:
        for name, arr in params.arrays.items():
            probes.append((("params", name), arr, grads.params[name]))
    if "B" in targets:
        probes.append((("B",), B, grads.B))

    worst, where, checked, skipped, rows = 0.0, None, 0, [], []
    for key, arr, analytic in probes:
        for idx in np.ndindex(arr.shape):
            vals = []
            sigs = []
            for sgn in (1.0, -1.0):
                em_p, B_p = em, B
                if key[0] == "emitted":
                    em_p = {k: a.copy() for k, a in em.items()}
                    em_p[key[1]][idx] += sgn * step
                elif key[0] == "params":
                    p2 = params.copy()
                    p2.arrays[key[1]][idx] += sgn * step
                    em_p = emit(p2, v)[1]
                else:
                    B_p = B.copy()
                    B_p[idx] += sgn * step
                if sparse:
                    sigs.append(engine.support_signature(em_p))
                vals.append((em_p, B_p))
            loc = key + (idx,)
            if sparse and not all(np.array_equal(s, base_sig) for s in sigs):
                skipped.append(loc)
                continue
            fd = (run(*vals[0]) - run(*vals[1])) / (2.0 * step)
            an = float(analytic[idx])
            rel = abs(an - fd) / (abs(an) + abs(fd) + 1e-12)
            checked += 1
            if detail:
                rows.append((loc, an, fd))
            if rel > worst or where is None:
                worst, where = rel, loc
    report = {"max_rel_err": worst, "location": where, "checked": checked, "skipped": skipped}
    if detail:
        report["probes"] = rows
    return report

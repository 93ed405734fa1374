"""Seeded small attention configurations shared by unit and acceptance tests."""

import numpy as np

from kernel_attention import AttentionConfig, AttentionEngine, BasisSet, init_head_params
from kernel_attention.attention import KERNEL_FAMILIES, emit

N_BASIS = 6
FEATURES = 3
BATCH = 2


def small_config(family, parametrization="scaled", alpha=1.5, **kw):
    opts = dict(heads=2, inducing_points=6, bandwidth=0.12, panels=32, nodes_per_panel=8, components=2)
    opts.update(kw)
    return AttentionConfig(family=family, alpha=alpha, parametrization=parametrization, **opts)


def gradcheck_case(family, seed, parametrization="scaled", alpha=1.5):
    """Engine, head parameters, features and value coefficients for one probe.

    Location heads are redrawn until every emitted mean lies inside the
    domain. A parabola centred outside it can have empty support, and a
    mixture component far outside contributes gradients near 1e-9.
    """
    cfg = small_config(family, parametrization, alpha)
    engine = AttentionEngine(cfg, BasisSet(N_BASIS, cfg.domain))
    rng = np.random.default_rng(seed)
    for _ in range(100):
        if family in KERNEL_FAMILIES:
            params = init_head_params(cfg, FEATURES, rng, scale=1.0)
            params.arrays["b_gamma"][:] = rng.normal(0.0, 1.0, params.arrays["b_gamma"].shape)
        else:
            params = init_head_params(cfg, FEATURES, rng, scale=0.3)
            params.arrays["b_sigma"][:] = -1.5 if family != "gmm" else -2.0
        v = rng.normal(size=(BATCH, FEATURES))
        B = rng.normal(size=(BATCH, 2, N_BASIS))
        em = emit(params, v)[1]
        if "mu" not in em or np.all((em["mu"] > 0.02) & (em["mu"] < 0.98)):
            return engine, params, v, B
    raise AssertionError("could not draw an in-domain configuration")

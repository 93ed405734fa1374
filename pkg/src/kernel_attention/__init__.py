"""Continuous attention over kernel (deformed) exponential family densities."""

from .attention import (
    AttentionConfig,
    AttentionEngine,
    GradientBundle,
    HeadParams,
    fd_gradcheck,
    forward_context,
    grad_log_normalizer,
    head_density,
    init_head_params,
)
from .deformed import (
    AlphaParam,
    GridDensity,
    beta_exp,
    beta_log,
    bregman_divergence,
    negentropy_gradient,
    tsallis_negentropy,
)
from .densities import (
    ContinuousSoftmaxDensity,
    GaussianMixtureDensity,
    KernelDeformedDensity,
    KernelExpDensity,
    TruncatedParabolaDensity,
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
from .errors import (
    ArgumentError,
    DegenerateDensityError,
    IntegrationWarning,
    KernelAttentionError,
    NumericError,
    StateError,
    TrainingError,
)
from .gmm import DiscreteAttention, expected_joint_stats, verify_moment_matching, weighted_em_fit
from .quadrature import BaseDensity, QuadratureRule, SupportSet, build_rule, find_support, integrate
from .rkhs import GaussianRBF, RkhsFunction, check_normalizable, rkhs_eval
from .value_function import BasisSet, TimeSeries, ValueParams, eval_basis, fit_ridge, value_eval

__version__ = "0.1.0"

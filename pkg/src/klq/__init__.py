"""KL-quadratic optimal control of finite Markov models with a relaxed dual solver."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .dual import (
    DualIterate,
    KlqProblem,
    Solution,
    SolverError,
    SolverOptions,
    aggregate_g,
    backward_recursion,
    dual_functional_general,
    dual_gradient,
    dual_value,
    golden_section_search,
    policy_from_multipliers,
    solve,
    tilt_operator,
)
from .mdp import (
    AbsoluteContinuityError,
    KlqError,
    KlqModel,
    ModelValidationError,
    kl_rate,
    propagate_marginals,
    validate_model,
)
from .relaxation import Basis, degenerate_basis, fourier_basis, parse_basis

"""Cross-checks: path log-likelihood ratios, relative entropy, primal values, tracking error.

The exhaustive path oracles enumerate X^(K+1) and refuse instances with more
than ``MAX_PATHS`` paths; they exist for testing small models only.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dual import KlqProblem, aggregate_g, evaluate, objective_terms
from .mdp import AbsoluteContinuityError, KlqModel, kl_rate, propagate_marginals
from .relaxation import Basis

MAX_PATHS = 10**6


def enumerate_paths(model: KlqModel, limit: int = MAX_PATHS) -> np.ndarray:
    """All paths in X^(K+1) as flattened point indices, shape (|X|^(K+1), K+1)."""
    n, K = model.num_points, model.horizon
    if n ** (K + 1) > limit:
        raise ValueError(f"{n}^{K + 1} paths exceeds the exhaustive limit {limit}")
    return np.array(list(itertools.product(range(n), repeat=K + 1)), dtype=np.int64)


def path_probabilities(model: KlqModel, policies: np.ndarray, paths: np.ndarray) -> np.ndarray:
    """p(x_0..x_K) = nu_0(x_0) prod_k T_{u_k}(s_k, s_{k+1}) phi_{k+1}(u_{k+1} | s_{k+1})."""
    nU = model.num_inputs
    s, u = np.divmod(paths, nU)
    p = model.initial_marginal[s[:, 0], u[:, 0]].copy()
    for k in range(model.horizon):
        p *= model.kernels[u[:, k], s[:, k], s[:, k + 1]]
        p *= policies[k + 1][s[:, k + 1], u[:, k + 1]]
    return p


def _split(model: KlqModel, path):
    path = np.asarray(path, dtype=np.int64)
    if path.shape != (model.horizon + 1,):
        raise ValueError(f"path must have length K+1 = {model.horizon + 1}")
    return np.divmod(path, model.num_inputs)


def _check_nominal_support(model: KlqModel, s, u):
    if model.initial_marginal[s[0], u[0]] <= 0:
        raise AbsoluteContinuityError("path starts outside the support of nu_0")
    for k in range(model.horizon):
        if model.kernels[u[k], s[k], s[k + 1]] <= 0 or model.nominal_policies[k + 1][s[k + 1], u[k + 1]] <= 0:
            raise AbsoluteContinuityError(f"path leaves the nominal support at step {k + 1}")


def path_deltas(model: KlqModel, g: np.ndarray, path) -> np.ndarray:
    """Delta_k = G_k(x_{k-1}) - g_k(s_k) for k = 1..K."""
    s, u = _split(model, path)
    return np.array(
        [aggregate_g(model, g[k - 1])[s[k - 1], u[k - 1]] - g[k - 1][s[k]] for k in range(1, model.horizon + 1)]
    )


def log_likelihood_ratio(model: KlqModel, basis: Basis, lam, g, path) -> float:
    """log p^lam / p^0 along ``path`` via the multiplier representation.

    L = sum_k (Delta_k + lam_check_k Y(x_k)) - G_1(x_0).
    """
    s, u = _split(model, path)
    _check_nominal_support(model, s, u)
    lamc = basis.expand(lam)
    G1 = aggregate_g(model, g[0])[s[0], u[0]]
    deltas = path_deltas(model, g, path)
    return float(np.sum(deltas + lamc * model.output[s[1:], u[1:]]) - G1)


def chain_rule_llr(model: KlqModel, policies: np.ndarray, path) -> float:
    """sum_k log(phi_k(u_k | s_k) / phi0_k(u_k | s_k))."""
    s, u = _split(model, path)
    _check_nominal_support(model, s, u)
    total = 0.0
    for k in range(1, model.horizon + 1):
        total += math.log(policies[k][s[k], u[k]] / model.nominal_policies[k][s[k], u[k]])
    return total


def relative_entropy(model: KlqModel, basis: Basis, lam) -> float:
    """D(p^lam || p^0) = sum_k lam_check_k <nu^lam_k, Y> - <nu_0, G^lam_1>."""
    problem = KlqProblem(model, np.zeros(model.horizon), 1.0, basis)
    it = evaluate(problem, lam)
    return float(it.lam_check @ it.output_means - it.initial_term)


def relative_entropy_by_rates(model: KlqModel, policies: np.ndarray) -> float:
    """sum_k KL rate of nu_k against the nominal marginal nu0_k."""
    nu = propagate_marginals(model, policies)
    nu0 = propagate_marginals(model, model.nominal_policies)
    return float(sum(kl_rate(nu[k], nu0[k]) for k in range(1, model.horizon + 1)))


def relative_entropy_exhaustive(model: KlqModel, policies: np.ndarray) -> float:
    """sum over all paths of p log(p / p0); test oracle for small instances."""
    paths = enumerate_paths(model)
    p = path_probabilities(model, policies, paths)
    p0 = path_probabilities(model, model.nominal_policies, paths)
    on = p > 0
    if np.any(p0[on] <= 0):
        raise AbsoluteContinuityError("controlled law charges a nominal-null path")
    return float(np.sum(p[on] * np.log(p[on] / p0[on])))


@dataclass
class PrimalValues:
    relative_entropy: float
    relaxed: float  # D + kappa/2 sum_n (Y_hat_n - r_hat_n)^2
    full: float  # D + kappa/2 sum_k (<nu_k, Y> - r_k)^2


def primal_value(problem: KlqProblem, lam) -> PrimalValues:
    """Primal objective of the tilted law p^lam, in relaxed and per-step forms."""
    return PrimalValues(*objective_terms(problem, evaluate(problem, lam)))


@dataclass
class TrackingError:
    series: np.ndarray
    rms: float
    max_abs: float


def tracking_error(achieved, r) -> TrackingError:
    """e_k = achieved_k - r_k.  ``achieved`` may be a Solution or an output series."""
    y = getattr(achieved, "output_trajectory", achieved)
    y = np.asarray(y, dtype=float)
    r = np.asarray(r, dtype=float)
    if y.shape != r.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {r.shape}")
    e = y - r
    return TrackingError(e, float(np.sqrt(np.mean(e**2))), float(np.max(np.abs(e))))


def unrelaxed_recursion(model: KlqModel, lam_steps):
    """Per-step multipliers straight into the optimal-policy formulas (no basis).

    Plain loops, kept independent of the vectorised solver so the two can be
    compared.  Returns (g, policies) in the solver's layouts.
    """
    K, nS, nU = model.horizon, model.num_states, model.num_inputs
    T, phi0, Y = model.kernels, model.nominal_policies, model.output
    g = np.zeros((K + 1, nS))
    phi = np.zeros((K + 1, nS, nU))
    phi[0] = phi0[0]
    for k in range(K, 0, -1):
        for s in range(nS):
            expo = []
            for u in range(nU):
                ahead = sum(T[u, s, s2] * g[k][s2] for s2 in range(nS))
                expo.append((u, ahead + lam_steps[k - 1] * Y[s, u]))
            top = max(e for u, e in expo if phi0[k][s, u] > 0)
            total = sum(phi0[k][s, u] * math.exp(e - top) for u, e in expo)
            g[k - 1][s] = top + math.log(total)
            for u, e in expo:
                phi[k][s, u] = phi0[k][s, u] * math.exp(e - g[k - 1][s])
    return g, phi

"""Dual solver for KLQ control with a subspace-relaxed tracking penalty.

Multipliers ``lam`` (length N) price the transformed tracking constraints and
backward multipliers ``g`` price the marginal dynamics.  For fixed ``lam`` the
best ``g`` comes from a log-sum-exp backward recursion and the reduced dual

    phi*(lam) = lam . r_hat - |lam|^2 / (2 kappa) - <nu_0, G_1>

is concave and smooth.  It is maximised by gradient ascent with a golden
section line search along each ascent direction.

Array layout: ``g`` has shape ``(K + 1, |S|)`` and row ``i`` holds ``g_{i+1}``,
so the last row is the terminal ``g_{K+1} = 0``.
"""

from __future__ import annotations

import logging
import math
import time
import weakref
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .mdp import KlqError, KlqModel, propagate_marginals, require_valid
from .relaxation import Basis, transform_reference

log = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class SolverError(KlqError):
    pass


class _Compiled:
    """Per-model arrays laid out for the inner loops.

    The kernel is stored dense on the model; here its nonzero pattern is kept
    in CSR form so deterministic or banded kernels cost O(nnz) per step.
    """

    def __init__(self, model: KlqModel):
        nS, nU = model.num_states, model.num_inputs
        # stacked[(s, u), s'] = T_u(s, s')
        self.stacked = np.ascontiguousarray(model.kernels.transpose(1, 0, 2).reshape(nS * nU, nS))
        rows, cols = np.nonzero(self.stacked)
        self.indptr = np.searchsorted(rows, np.arange(nS * nU + 1)).astype(np.int64)
        self.indices = cols.astype(np.int64)
        self.data = self.stacked[rows, cols].copy()
        with np.errstate(divide="ignore"):
            self.log_phi0 = np.ascontiguousarray(np.log(model.nominal_policies))
        self.output = np.array(model.output)
        self.shape = (nS, nU)


_compiled_cache: "weakref.WeakKeyDictionary[KlqModel, _Compiled]" = weakref.WeakKeyDictionary()


def _compiled(model: KlqModel) -> _Compiled:
    c = _compiled_cache.get(model)
    if c is None:
        c = _compiled_cache[model] = _Compiled(model)
    return c


@dataclass(frozen=True, eq=False)
class KlqProblem:
    """Model, absolute reference r_1..r_K, penalty kappa and relaxation basis."""

    model: KlqModel
    reference: np.ndarray
    kappa: float
    basis: Basis

    def __post_init__(self):
        require_valid(self.model)
        r = np.array(self.reference, dtype=float)
        if r.shape != (self.model.horizon,):
            raise ValueError(f"reference has shape {r.shape}, expected ({self.model.horizon},)")
        if self.basis.horizon != self.model.horizon:
            raise ValueError(f"basis horizon {self.basis.horizon} != model horizon {self.model.horizon}")
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be positive and finite, got {self.kappa}")
        r.setflags(write=False)
        object.__setattr__(self, "reference", r)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "r_hat", transform_reference(self.basis, r))


# ---------------------------------------------------------------------------
# backward recursion
# ---------------------------------------------------------------------------


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def tilt_operator(model: KlqModel, k: int, lam_k: float, f) -> np.ndarray:
    """log sum_u phi0_k(u|s) exp(sum_s' T_u(s,s') f(s') + lam_k Y(s,u)), for every s."""
    if not 1 <= k <= model.horizon:
        raise IndexError(f"time index {k} outside 1..{model.horizon}")
    c = _compiled(model)
    logits = c.log_phi0[k] + (c.stacked @ np.asarray(f, dtype=float)).reshape(c.shape) + lam_k * c.output
    return _logsumexp_rows(logits)


@njit(cache=True)
def _backward_kernel(indptr, indices, data, log_phi0, Y, lamc):
    K = lamc.shape[0]
    nS, nU = Y.shape
    g = np.zeros((K + 1, nS))
    logits = np.empty(nU)
    for k in range(K, 0, -1):
        lk = lamc[k - 1]
        for s in range(nS):
            mx = -np.inf
            for u in range(nU):
                row = s * nU + u
                acc = 0.0
                for j in range(indptr[row], indptr[row + 1]):
                    acc += data[j] * g[k, indices[j]]
                v = log_phi0[k, s, u] + acc + lk * Y[s, u]
                logits[u] = v
                if v > mx:
                    mx = v
            tot = 0.0
            for u in range(nU):
                tot += np.exp(logits[u] - mx)
            g[k - 1, s] = mx + np.log(tot)
    return g


@njit(cache=True)
def _tilt_kernel(indptr, indices, data, log_phi0, Y, lamc, g, phi):
    K = lamc.shape[0]
    nS, nU = Y.shape
    for k in range(1, K + 1):
        lk = lamc[k - 1]
        for s in range(nS):
            for u in range(nU):
                row = s * nU + u
                acc = 0.0
                for j in range(indptr[row], indptr[row + 1]):
                    acc += data[j] * g[k, indices[j]]
                phi[k, s, u] = np.exp(log_phi0[k, s, u] + acc + lk * Y[s, u] - g[k - 1, s])


def _backward(c: _Compiled, lamc: np.ndarray) -> np.ndarray:
    lamc = np.ascontiguousarray(lamc, dtype=float)
    return _backward_kernel(c.indptr, c.indices, c.data, c.log_phi0, c.output, lamc)


def backward_recursion(model: KlqModel, basis: Basis, lam) -> np.ndarray:
    """g_k = T^lam_k(g_{k+1}) for k = K..1 with g_{K+1} = 0.  Row i is g_{i+1}."""
    return _backward(_compiled(model), basis.expand(lam))


def aggregate_g(model: KlqModel, g_k) -> np.ndarray:
    """G(s, u) = sum_s' T_u(s, s') g_k(s')."""
    c = _compiled(model)
    return (c.stacked @ np.asarray(g_k, dtype=float)).reshape(c.shape)


def growth_constants(model: KlqModel, basis: Basis) -> np.ndarray:
    """C_k = |Y|_inf sum_{i >= k} |w(i)|, for k = 1..K (length K)."""
    norms = basis.column_norms()
    return np.abs(model.output).max() * np.cumsum(norms[::-1])[::-1]


# ---------------------------------------------------------------------------
# dual value, gradient and policy synthesis
# ---------------------------------------------------------------------------


def _initial_term(problem: KlqProblem, g: np.ndarray) -> float:
    """<nu_0, G_1>."""
    return float(np.sum(problem.model.initial_marginal * aggregate_g(problem.model, g[0])))


def _value_from_g(problem: KlqProblem, lam: np.ndarray, g: np.ndarray) -> float:
    return float(lam @ problem.r_hat - lam @ lam / (2.0 * problem.kappa) - _initial_term(problem, g))


def dual_value(problem: KlqProblem, lam) -> float:
    """Reduced dual phi*(lam) = lam.r_hat - |lam|^2/(2 kappa) - <nu_0, G^lam_1>."""
    lam = np.asarray(lam, dtype=float)
    g = _backward(_compiled(problem.model), problem.basis.expand(lam))
    return _value_from_g(problem, lam, g)


def dual_functional_general(problem: KlqProblem, lam, g) -> float:
    """Dual functional at an arbitrary (lam, g), before maximising out g.

    Adds sum_k min_s [g_k(s) - T^lam_k(g_{k+1}; s)] to the reduced formula.
    ``g`` must have shape (K+1, |S|) with a zero last row.
    """
    model = problem.model
    lam = np.asarray(lam, dtype=float)
    g = np.asarray(g, dtype=float)
    K = model.horizon
    if g.shape != (K + 1, model.num_states):
        raise ValueError(f"g has shape {g.shape}, expected {(K + 1, model.num_states)}")
    if np.any(g[K] != 0.0):
        raise ValueError("terminal row g_{K+1} must be identically zero")
    lamc = problem.basis.expand(lam)
    slack = 0.0
    for k in range(1, K + 1):
        slack += float(np.min(g[k - 1] - tilt_operator(model, k, lamc[k - 1], g[k])))
    return _value_from_g(problem, lam, g) + slack


def _tilted_policies(c: _Compiled, model: KlqModel, lamc: np.ndarray, g: np.ndarray) -> np.ndarray:
    phi = np.empty((model.horizon + 1,) + c.shape)
    phi[0] = model.nominal_policies[0]
    lamc = np.ascontiguousarray(lamc, dtype=float)
    _tilt_kernel(c.indptr, c.indices, c.data, c.log_phi0, c.output, lamc, np.ascontiguousarray(g), phi)
    return phi


def policy_from_multipliers(model: KlqModel, basis: Basis, lam, g, check_tol: float = 1e-6) -> np.ndarray:
    """Exponentially tilted policy phi0_k(u|s) exp(G_{k+1}(s,u) + lam_check_k Y(s,u) - g_k(s)).

    Rows normalise only when ``g`` solves the backward recursion for ``lam``;
    a row-sum error above ``check_tol`` raises SolverError.
    """
    c = _compiled(model)
    phi = _tilted_policies(c, model, basis.expand(lam), np.asarray(g, dtype=float))
    err = float(np.max(np.abs(phi[1:].sum(axis=-1) - 1.0)))
    if err > check_tol:
        raise SolverError(f"tilted policy rows off by {err:.3g}; g is inconsistent with lam")
    return _renormalise(phi)


def _renormalise(phi: np.ndarray) -> np.ndarray:
    # rounding in exp(... - g) grows with |g|; keep rows stochastic to machine precision
    phi[1:] /= phi[1:].sum(axis=-1, keepdims=True)
    return phi


@dataclass
class DualIterate:
    lam: np.ndarray
    lam_check: np.ndarray
    g: np.ndarray
    value: float
    gradient: np.ndarray
    policies: np.ndarray
    marginals: np.ndarray
    output_means: np.ndarray  # <nu_k, Y> for k = 1..K
    initial_term: float  # <nu_0, G_1>


def evaluate(problem: KlqProblem, lam) -> DualIterate:
    """Everything the solver needs at ``lam``: g, value, tilted policy, marginals, gradient."""
    model = problem.model
    c = _compiled(model)
    lam = np.array(lam, dtype=float)
    lamc = problem.basis.expand(lam)
    g = _backward(c, lamc)
    phi = _renormalise(_tilted_policies(c, model, lamc, g))
    nu = propagate_marginals(model, phi)
    ybar = np.einsum("ksu,su->k", nu[1:], model.output)
    grad = problem.r_hat - lam / problem.kappa - problem.basis.weights @ ybar
    init = _initial_term(problem, g)
    value = float(lam @ problem.r_hat - lam @ lam / (2.0 * problem.kappa) - init)
    return DualIterate(lam, lamc, g, value, grad, phi, nu, ybar, init)


def dual_gradient(problem: KlqProblem, lam) -> np.ndarray:
    """d phi*/d lam_n = r_hat_n - lam_n/kappa - sum_k w_n(k) <nu^lam_k, Y>."""
    return evaluate(problem, lam).gradient


# ---------------------------------------------------------------------------
# line search and ascent
# ---------------------------------------------------------------------------


def golden_section_search(f, lo: float, hi: float, tol: float) -> float:
    """Maximiser of a unimodal ``f`` on [lo, hi] to within ``tol``.

    For monotone ``f`` the result lands within ``tol`` of the better endpoint.
    """
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid interval [{lo}, {hi}]")
    if not tol > 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    a, b = lo, hi
    x1 = b - INV_PHI * (b - a)
    x2 = a + INV_PHI * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - INV_PHI * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (b - a)
            f2 = f(x2)
    return 0.5 * (a + b)


@dataclass
class SolverOptions:
    max_iters: int = 500
    grad_tol: float | None = None  # default 1e-8 * (1 + |r_hat|_inf)
    line_search_tol: float = 1e-10  # relative to the bracket's upper end
    bracket_growth: float = 2.0
    direction: str = "gradient"  # "cg" (Polak-Ribiere) or "lbfgs" (limited-memory quasi-Newton)
    memory: int = 20  # correction pairs kept by "lbfgs"
    gap_tol: float = 1e-6  # relative duality-gap tolerance reported on the solution

    def resolved_grad_tol(self, r_hat: np.ndarray) -> float:
        if self.grad_tol is not None:
            return self.grad_tol
        return 1e-8 * (1.0 + float(np.max(np.abs(r_hat))))


@dataclass
class Solution:
    problem: KlqProblem
    lam: np.ndarray
    g: np.ndarray
    policies: np.ndarray
    marginals: np.ndarray
    output_trajectory: np.ndarray
    dual_value: float
    primal_value: float  # relaxed objective, the one with no duality gap
    primal_full: float  # per-step tracking objective
    relative_entropy: float
    duality_gap: float
    gradient: np.ndarray
    iterations: int
    converged: bool
    message: str = ""
    history: list = field(default_factory=list)
    solve_seconds: float = 0.0

    @property
    def gamma(self) -> np.ndarray:
        """Optimal transformed tracking errors gamma_n = -lam_n / kappa."""
        return -self.lam / self.problem.kappa

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.gradient)))


def objective_terms(problem: KlqProblem, it: DualIterate):
    """(relative entropy, relaxed primal, full primal) of the tilted law at ``it``."""
    rel_ent = float(it.lam_check @ it.output_means - it.initial_term)
    y_hat = problem.basis.weights @ it.output_means
    relaxed = rel_ent + 0.5 * problem.kappa * float(np.sum((y_hat - problem.r_hat) ** 2))
    full = rel_ent + 0.5 * problem.kappa * float(np.sum((it.output_means - problem.reference) ** 2))
    return rel_ent, relaxed, full


def _line_search(h, h0: float, t_max: float, t_init: float, opts: SolverOptions):
    """Best step along a ray; returns (t, h(t)) with h(t) > h0, or (0, h0) on failure."""
    growth = opts.bracket_growth
    t = min(t_init, t_max)
    ht = h(t)
    if ht > h0:
        lo, hi = 0.0, t_max
        while t < t_max:
            t_next = min(growth * t, t_max)
            h_next = h(t_next)
            if h_next <= ht:
                hi = t_next
                break
            lo, t, ht = t, t_next, h_next
    else:
        # overshoot: shrink towards 0 until the ray improves
        for _ in range(200):
            t /= growth
            ht = h(t)
            if ht > h0:
                break
        else:
            return 0.0, h0
        lo, hi = 0.0, min(growth * t, t_max)
    ts = golden_section_search(h, lo, hi, opts.line_search_tol * hi)
    hs = h(ts)
    if hs > ht:
        return ts, hs
    return t, ht


def _two_loop(grad: np.ndarray, pairs) -> np.ndarray:
    """Limited-memory inverse-curvature product for ascent.

    ``pairs`` holds (s, y) with s a step and y = -(change in gradient), so
    s.y > 0 for a concave objective.
    """
    q = grad.copy()
    alphas = []
    for s, y in reversed(pairs):
        a = float(s @ q) / float(s @ y)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), a in zip(pairs, reversed(alphas)):
        b = float(y @ q) / float(s @ y)
        q += (a - b) * s
    return q


def solve(problem: KlqProblem, opts: SolverOptions | None = None, lam0=None) -> Solution:
    """Maximise the reduced dual and synthesise the optimal tilted policy.

    Starts from ``lam0`` (default 0, the nominal policy).  Each iteration
    moves along the ascent direction by a golden-section line search over a
    bracket grown by doubling.  Iteration exhaustion returns
    ``converged=False`` rather than raising.
    """
    opts = opts or SolverOptions()
    if opts.direction not in ("gradient", "cg", "lbfgs"):
        raise ValueError(f"unknown direction {opts.direction!r}")
    t_start = time.perf_counter()
    N = problem.basis.size
    kappa = problem.kappa
    tol = opts.resolved_grad_tol(problem.r_hat)
    c = _compiled(problem.model)
    W = problem.basis.weights

    lam = np.zeros(N) if lam0 is None else np.array(lam0, dtype=float)
    it = evaluate(problem, lam)
    if not math.isfinite(it.value):
        raise SolverError("non-finite dual value at the starting point")
    history = [(0, it.value, float(np.max(np.abs(it.gradient))))]
    d = prev_grad = prev_z = None
    pairs: list = []
    since_restart = 0
    step = 1.0 / kappa
    converged = False
    message = "iteration limit reached"
    n_iter = 0

    while True:
        grad = it.gradient
        if np.max(np.abs(grad)) <= tol:
            converged = True
            message = "gradient tolerance reached"
            break
        if n_iter >= opts.max_iters:
            break
        z = grad.copy()
        if opts.direction == "lbfgs":
            d = _two_loop(grad, pairs)
            since_restart = len(pairs)
            if d @ grad <= 0:
                pairs.clear()
                d, since_restart = z, 0
        elif opts.direction == "cg" and d is not None and since_restart < N:
            beta = max(0.0, float(z @ (grad - prev_grad)) / float(prev_z @ prev_grad))
            d = z + beta * d
            since_restart += 1
            if d @ grad <= 0:
                d, since_restart = z, 0
        else:
            d, since_restart = z, 0

        slope = float(d @ grad)
        # curvature along d is at most -|d|^2/kappa, so the maximiser lies below t_max
        t_max = kappa * slope / float(d @ d)
        lamc0 = W.T @ lam
        lamc_d = W.T @ d

        def h(t):
            return _value_from_g(problem, lam + t * d, _backward(c, lamc0 + t * lamc_d))

        t, _ = _line_search(h, it.value, t_max, step, opts)
        if t == 0.0:
            if since_restart > 0:
                d = None  # retry along the plain gradient
                pairs.clear()
                continue
            message = "line search stalled"
            break
        n_iter += 1
        step = t
        prev_grad, prev_z = grad, z
        lam = lam + t * d
        it = evaluate(problem, lam)
        if not math.isfinite(it.value):
            raise SolverError(f"non-finite dual value at iteration {n_iter}")
        if opts.direction == "lbfgs":
            sk, yk = t * d, prev_grad - it.gradient
            if float(sk @ yk) > 1e-12 * float(np.linalg.norm(sk) * np.linalg.norm(yk)):
                pairs.append((sk, yk))
                del pairs[: -opts.memory]
        history.append((n_iter, it.value, float(np.max(np.abs(it.gradient)))))
        log.debug("iter %d value %.12g |grad| %.3g step %.3g", n_iter, it.value, history[-1][2], t)

    rel_ent, relaxed, full = objective_terms(problem, it)
    gap = relaxed - it.value
    if message == "line search stalled" and gap <= opts.gap_tol * (1.0 + abs(it.value)):
        # no representable ascent left and weak duality certifies optimality
        converged = True
        message = "line search stalled at machine precision; duality gap within tolerance"
    if converged and gap > opts.gap_tol * (1.0 + abs(it.value)):
        converged = False
        message = f"gradient small but duality gap {gap:.3g} above tolerance"
    return Solution(
        problem=problem,
        lam=it.lam,
        g=it.g,
        policies=it.policies,
        marginals=it.marginals,
        output_trajectory=it.output_means,
        dual_value=it.value,
        primal_value=relaxed,
        primal_full=full,
        relative_entropy=rel_ent,
        duality_gap=gap,
        gradient=it.gradient,
        iterations=n_iter,
        converged=converged,
        message=message,
        history=history,
        solve_seconds=time.perf_counter() - t_start,
    )

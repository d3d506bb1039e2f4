"""Finite-population simulation, Monte Carlo gradients, coupling runs and the MPC loop.

Randomness is counter based: the two uniforms agent ``i`` uses for the step
into time ``k`` are a fixed function of (seed, k, i), drawn from a Philox
stream keyed by (seed, k).  Splitting the population into chunks therefore
cannot change any trajectory.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dual import KlqProblem, SolverError, SolverOptions, Solution, evaluate, solve
from .mdp import KlqError, KlqModel, output_means, propagate_marginals, total_variation
from .relaxation import Basis, degenerate_basis, fourier_basis

log = logging.getLogger(__name__)

CHUNK = 8192  # agents per vectorised sampling block


def _agent_uniforms(seed: int, k: int, start: int, count: int) -> np.ndarray:
    """Uniforms for agents start..start+count-1 at step k, shape (count, 2)."""
    first = 2 * start
    block, skip = divmod(first, 4)  # Philox emits four 64-bit words per counter value
    bitgen = np.random.Philox(key=np.array([seed, k], dtype=np.uint64), counter=np.array([block, 0, 0, 0], dtype=np.uint64))
    u = np.random.Generator(bitgen).random(skip + 2 * count)[skip:]
    return u.reshape(count, 2)


def _cumulative(rows: np.ndarray) -> np.ndarray:
    c = np.cumsum(rows, axis=-1)
    # exact 1.0 at the last positive entry so u < 1 never runs off the end
    return c / c[..., -1:]


def _pick(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.sum(cum_rows <= u[:, None], axis=1)


@dataclass
class FleetState:
    """Population of agents, each at a point x = s * |U| + u of X, at time ``k``."""

    agents: np.ndarray
    k: int
    seed: int
    num_states: int
    num_inputs: int

    @property
    def size(self) -> int:
        return self.agents.shape[0]

    def empirical_marginal(self) -> np.ndarray:
        counts = np.bincount(self.agents, minlength=self.num_states * self.num_inputs)
        return (counts / self.size).reshape(self.num_states, self.num_inputs)

    def mean_output(self, output: np.ndarray) -> float:
        return float(np.mean(output.ravel()[self.agents]))


def init_fleet(model: KlqModel, n: int, seed: int, initial_marginal=None) -> FleetState:
    """Draw ``n`` agents i.i.d. from the initial marginal (default the model's nu_0)."""
    if n < 1:
        raise ValueError(f"need at least one agent, got {n}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    nu0 = model.initial_marginal if initial_marginal is None else np.asarray(initial_marginal, dtype=float)
    cum = _cumulative(nu0.ravel()[None, :])[0]
    agents = np.empty(n, dtype=np.int64)
    for a in range(0, n, CHUNK):
        b = min(a + CHUNK, n)
        u = _agent_uniforms(seed, 0, a, b - a)[:, 0]
        agents[a:b] = np.searchsorted(cum, u, side="right")
    return FleetState(agents, 0, int(seed), model.num_states, model.num_inputs)


def step_fleet(model: KlqModel, fleet: FleetState, policy_next: np.ndarray) -> FleetState:
    """Advance one step: S' ~ T_u(s, .), then U' ~ policy_next(. | S')."""
    nU = model.num_inputs
    k_next = fleet.k + 1
    cumT = _cumulative(model.kernels)
    cumP = _cumulative(np.asarray(policy_next))
    new = np.empty_like(fleet.agents)
    for a in range(0, fleet.size, CHUNK):
        b = min(a + CHUNK, fleet.size)
        u = _agent_uniforms(fleet.seed, k_next, a, b - a)
        s, inp = np.divmod(fleet.agents[a:b], nU)
        s_next = _pick(cumT[inp, s], u[:, 0])
        u_next = _pick(cumP[s_next], u[:, 1])
        new[a:b] = s_next * nU + u_next
    return FleetState(new, k_next, fleet.seed, fleet.num_states, fleet.num_inputs)


@dataclass
class FleetRun:
    marginals: np.ndarray  # empirical, (K+1, |S|, |U|)
    paths: np.ndarray | None  # (n, K+1) point indices when recorded
    final: FleetState


def simulate_fleet(model: KlqModel, policies, n: int, seed: int, *, record_paths: bool = True) -> FleetRun:
    """Simulate ``n`` independent agents under ``policies`` for k = 0..K."""
    K = model.horizon
    fleet = init_fleet(model, n, seed)
    marg = np.empty((K + 1, model.num_states, model.num_inputs))
    paths = np.empty((n, K + 1), dtype=np.int64) if record_paths else None
    marg[0] = fleet.empirical_marginal()
    if record_paths:
        paths[:, 0] = fleet.agents
    for k in range(K):
        fleet = step_fleet(model, fleet, policies[k + 1])
        marg[k + 1] = fleet.empirical_marginal()
        if record_paths:
            paths[:, k + 1] = fleet.agents
    return FleetRun(marg, paths, fleet)


def max_tv_to_exact(run: FleetRun, exact: np.ndarray) -> float:
    return max(total_variation(run.marginals[k], exact[k]) for k in range(exact.shape[0]))


def monte_carlo_gradient(problem: KlqProblem, lam, n: int, seed: int):
    """Sample-mean estimate of r_hat - lam/kappa - E[Y_hat(X)] under p^lam.

    Returns (gradient estimate, per-coordinate standard error).
    """
    model = problem.model
    lam = np.asarray(lam, dtype=float)
    it = evaluate(problem, lam)
    run = simulate_fleet(model, it.policies, n, seed)
    y = model.output.ravel()[run.paths[:, 1:]]  # (n, K)
    y_hat = y @ problem.basis.weights.T  # per-agent transformed outputs, (n, N)
    mean = y_hat.mean(axis=0)
    stderr = y_hat.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(problem.basis.size, np.inf)
    return problem.r_hat - lam / problem.kappa - mean, stderr


# ---------------------------------------------------------------------------
# coupling
# ---------------------------------------------------------------------------


@dataclass
class CouplingRun:
    kappa: float
    solutions: list
    pair_tv: np.ndarray  # (K+1, n_pairs)
    tv_max: np.ndarray  # (K+1,)
    power: np.ndarray  # (n_init, K) achieved mean output
    deviation: np.ndarray  # (n_init, K) nominal power minus achieved
    first_below: int | None


@dataclass
class CouplingResult:
    pairs: list
    runs: list = field(default_factory=list)
    threshold: float = 0.05


def coupling_experiment(
    problem: KlqProblem,
    initial_marginals,
    kappas,
    *,
    opts: SolverOptions | None = None,
    threshold: float = 0.05,
    baseline=None,
) -> CouplingResult:
    """Solve once per (initial marginal, kappa) and track pairwise TV distances.

    ``first_below`` is the first k with max pairwise TV <= ``threshold``.
    ``baseline`` is the nominal power the deviations are measured from
    (default: the nominal trajectory of ``problem.model``).
    """
    inits = [np.asarray(nu, dtype=float) for nu in initial_marginals]
    pairs = list(itertools.combinations(range(len(inits)), 2))
    if baseline is None:
        baseline = output_means(problem.model, propagate_marginals(problem.model, problem.model.nominal_policies))[1:]
    result = CouplingResult(pairs, threshold=threshold)
    for kappa in kappas:
        sols = []
        for nu0 in inits:
            p = KlqProblem(problem.model.replace(initial_marginal=nu0), problem.reference, float(kappa), problem.basis)
            sols.append(solve(p, opts))
        K = problem.model.horizon
        tv = np.zeros((K + 1, len(pairs)))
        for j, (a, b) in enumerate(pairs):
            tv[:, j] = 0.5 * np.abs(sols[a].marginals - sols[b].marginals).sum(axis=(1, 2))
        tv_max = tv.max(axis=1) if pairs else np.zeros(K + 1)
        below = np.flatnonzero(tv_max <= threshold)
        power = np.array([s.output_trajectory for s in sols])
        result.runs.append(
            CouplingRun(
                float(kappa), sols, tv, tv_max, power, baseline - power, int(below[0]) if below.size else None
            )
        )
    return result


# ---------------------------------------------------------------------------
# receding horizon
# ---------------------------------------------------------------------------


def window_basis_factory(basis: Basis) -> Callable[[int], Basis]:
    """Bases for shorter windows in the same family as ``basis``.

    The full-length basis is returned unchanged.  Fourier families keep the
    number of fundamental periods per window; anything else falls back to
    the degenerate family.
    """
    K = basis.horizon

    def make(length: int) -> Basis:
        if length == K:
            return basis
        parts = basis.name.split(":")
        if parts[0] == "fourier" and len(parts) == 3:
            N = min(int(parts[1]), length if length % 2 else length - 1)
            return fourier_basis(length, N, float(parts[2]) * K / length)
        return degenerate_basis(length)

    return make


@dataclass
class WindowRecord:
    start: int
    length: int
    lam: np.ndarray | None
    converged: bool
    message: str
    iterations: int
    solve_seconds: float
    estimate_sum: float  # total mass of the marginal estimate (sanity)


@dataclass
class MpcTrace:
    reference: np.ndarray  # r_k, k = 1..K
    achieved: np.ndarray  # mean output at k = 1..K
    planned: np.ndarray  # model-predicted mean output from the active window
    tv_to_plan: np.ndarray  # TV(fleet empirical_k, planned marginal_k); zero in exact mode
    windows: list

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean((self.achieved - self.reference) ** 2)))


def mpc_run(
    problem: KlqProblem,
    window: int,
    step: int,
    fleet: FleetState | None = None,
    *,
    opts: SolverOptions | None = None,
    basis_factory: Callable[[int], Basis] | None = None,
) -> MpcTrace:
    """Receding-horizon loop over the reference in ``problem``.

    Each round estimates the current marginal (the fleet's empirical
    histogram, or the exact propagated marginal when ``fleet`` is None),
    solves over [t0, t0 + window] (truncated at the horizon), and applies the
    first ``step`` policies.  A failed or non-converged solve is recorded and
    the previously planned policies (nominal before any success) stay in force.
    """
    model = problem.model
    K = model.horizon
    if not 1 <= step <= window <= K:
        raise ValueError(f"need 1 <= step <= window <= K, got step={step}, window={window}, K={K}")
    if fleet is not None and fleet.k != 0:
        raise ValueError("fleet must start at k = 0")
    make_basis = basis_factory or window_basis_factory(problem.basis)
    Y = model.output
    plan = np.array(model.nominal_policies)  # absolute-time policies currently in force
    plan_marg = propagate_marginals(model, plan)
    achieved = np.empty(K)
    planned = np.empty(K)
    tv_plan = np.zeros(K)
    windows = []
    exact = np.array(model.initial_marginal)
    t0 = 0
    while t0 < K:
        length = min(window, K - t0)
        est = exact if fleet is None else fleet.empirical_marginal()
        sub = KlqProblem(
            model.window(t0, length, initial_marginal=est),
            problem.reference[t0 : t0 + length],
            problem.kappa,
            make_basis(length),
        )
        t = time.perf_counter()
        try:
            sol = solve(sub, opts)
            ok, msg, iters, lam = sol.converged, sol.message, sol.iterations, sol.lam
        except (SolverError, KlqError, FloatingPointError) as exc:
            sol, ok, msg, iters, lam = None, False, f"solve failed: {exc}", 0, None
        elapsed = time.perf_counter() - t
        if ok:
            plan[t0 + 1 : t0 + length + 1] = sol.policies[1:]
            plan_marg[t0 : t0 + length + 1] = sol.marginals
        else:
            log.warning("window at k=%d: %s; keeping previous policy", t0, msg)
            sub_marg = propagate_marginals(sub.model, plan[t0 : t0 + length + 1])
            plan_marg[t0 : t0 + length + 1] = sub_marg
        windows.append(WindowRecord(t0, length, lam, ok, msg, iters, elapsed, float(np.sum(est))))
        n_apply = min(step, length)
        for k in range(t0, t0 + n_apply):
            if fleet is None:
                nu_hat = np.einsum("su,usv->v", exact, model.kernels)
                exact = nu_hat[:, None] * plan[k + 1]
                achieved[k] = float(np.sum(exact * Y))
            else:
                fleet = step_fleet(model, fleet, plan[k + 1])
                achieved[k] = fleet.mean_output(Y)
                tv_plan[k] = total_variation(fleet.empirical_marginal(), plan_marg[k + 1])
            planned[k] = float(np.sum(plan_marg[k + 1] * Y))
        t0 += n_apply
    return MpcTrace(np.array(problem.reference), achieved, planned, tv_plan, windows)


def open_loop_rms(solution: Solution) -> float:
    e = solution.output_trajectory - solution.problem.reference
    return float(np.sqrt(np.mean(e**2)))

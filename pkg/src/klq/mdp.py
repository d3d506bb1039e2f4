"""Finite MDP data model, policy/kernel algebra and relative-entropy rates.

Conventions used across the package:

* a joint state-input point ``x = (s, u)`` is flattened as ``x = s * |U| + u``;
* policy and marginal sequences are dense arrays of shape ``(K + 1, |S|, |U|)``
  indexed by time ``k = 0..K``.  Row ``0`` of a policy sequence is only used to
  keep indices aligned; controlled policies act for ``k = 1..K``;
* all logarithms are natural (nats).

Kernels are stored dense.  State spaces in this package are at most a few
hundred states; sparse kernels are left for later work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STOCHASTIC_TOL = 1e-9


class KlqError(Exception):
    """Base class for domain errors raised by this package."""


class ModelValidationError(KlqError, ValueError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("invalid model:\n  " + "\n  ".join(report.violations))


class AbsoluteContinuityError(KlqError, ValueError):
    """Raised where a divergence would be infinite (support violation)."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KlqModel:
    """Finite controlled Markov model with a nominal randomized policy.

    ``kernels[u, s, s']`` is ``T_u(s, s')``.  ``nominal_policies[k, s, u]`` is
    ``phi0_k(u | s)`` for ``k = 0..K``; a single ``(|S|, |U|)`` table is
    broadcast over time.  ``output[s, u]`` is the observed quantity and
    ``initial_marginal[s, u]`` the pmf of ``X_0``.
    """

    kernels: np.ndarray
    nominal_policies: np.ndarray
    output: np.ndarray
    initial_marginal: np.ndarray
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "horizon", int(self.horizon))
        phi0 = np.array(self.nominal_policies, dtype=float)
        if phi0.ndim == 2:
            phi0 = np.broadcast_to(phi0, (self.horizon + 1,) + phi0.shape)
        for name, value in (
            ("kernels", self.kernels),
            ("nominal_policies", phi0),
            ("output", self.output),
            ("initial_marginal", self.initial_marginal),
        ):
            object.__setattr__(self, name, _frozen(value))

    @property
    def num_states(self) -> int:
        return self.kernels.shape[1]

    @property
    def num_inputs(self) -> int:
        return self.kernels.shape[0]

    @property
    def num_points(self) -> int:
        """Size of the joint state-input space X."""
        return self.num_states * self.num_inputs

    def replace(self, **changes) -> "KlqModel":
        fields = dict(
            kernels=self.kernels,
            nominal_policies=self.nominal_policies,
            output=self.output,
            initial_marginal=self.initial_marginal,
            horizon=self.horizon,
        )
        fields.update(changes)
        return KlqModel(**fields)

    def window(self, start: int, length: int, initial_marginal=None) -> "KlqModel":
        """Sub-model covering times ``start..start+length`` (nominal policy sliced)."""
        if start < 0 or length < 1 or start + length > self.horizon:
            raise IndexError(f"window [{start}, {start + length}] outside horizon {self.horizon}")
        nu0 = self.initial_marginal if initial_marginal is None else initial_marginal
        return self.replace(
            nominal_policies=self.nominal_policies[start : start + length + 1],
            initial_marginal=nu0,
            horizon=length,
        )


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str):
        self.violations.append(msg)

    def __str__(self):
        return "ok" if self.ok else "\n".join(self.violations)


def _check_pmf_rows(report, name, rows, tol):
    rows = rows.reshape(-1, rows.shape[-1])
    if np.any(~np.isfinite(rows)):
        report.add(f"non-finite {name} entry")
        return
    if np.any(rows < 0):
        report.add(f"negative {name} entry (min {rows.min():g})")
    sums = rows.sum(axis=-1)
    for i in np.flatnonzero(np.abs(sums - 1.0) > tol):
        report.add(f"{name} row {i} sum {sums[i]:.12g} != 1")


def validate_model(model: KlqModel, tol: float = STOCHASTIC_TOL) -> ValidationReport:
    """List every violated model invariant.  Never raises; empty report means valid."""
    report = ValidationReport()
    T = model.kernels
    if T.ndim != 3 or T.shape[1] != T.shape[2]:
        report.add(f"kernels must have shape (|U|, |S|, |S|), got {T.shape}")
        return report
    nU, nS = T.shape[0], T.shape[1]
    if model.horizon < 1:
        report.add(f"horizon must be >= 1, got {model.horizon}")
    expected = {
        "nominal_policies": (model.horizon + 1, nS, nU),
        "output": (nS, nU),
        "initial_marginal": (nS, nU),
    }
    shapes_ok = True
    for name, shape in expected.items():
        got = getattr(model, name).shape
        if got != shape:
            report.add(f"{name} has shape {got}, expected {shape}")
            shapes_ok = False

    for u in range(nU):
        _check_pmf_rows(report, f"kernel T_{u}", T[u], tol)
    if not shapes_ok:
        return report
    for k in range(model.horizon + 1):
        _check_pmf_rows(report, f"policy phi0_{k}", model.nominal_policies[k], tol)
    if not np.all(np.isfinite(model.output)):
        report.add("non-finite output entry")
    _check_pmf_rows(report, "initial marginal", model.initial_marginal.reshape(1, -1), tol)
    # A kernel row problem is reported once per offending row, policy problems
    # once per (k, s); collapse identical negativity messages.
    report.violations = list(dict.fromkeys(report.violations))
    return report


def require_valid(model: KlqModel) -> KlqModel:
    report = validate_model(model)
    if not report.ok:
        raise ModelValidationError(report)
    return model


def state_marginal(nu: np.ndarray) -> np.ndarray:
    """nu_hat(s) = sum_u nu(s, u); works on a single pmf or a sequence."""
    return np.asarray(nu).sum(axis=-1)


def policy_to_kernel(model: KlqModel, policies: np.ndarray, k: int) -> np.ndarray:
    """Transition matrix on X from time k to k+1: T_u(s, s') * phi_{k+1}(u' | s')."""
    K = model.horizon
    if not 0 <= k <= K - 1:
        raise IndexError(f"time index {k} outside 0..{K - 1}")
    nU, nS = model.num_inputs, model.num_states
    phi_next = np.asarray(policies)[k + 1]
    # P[s, u, s', u'] = T[u, s, s'] * phi[s', u']
    P = np.einsum("usv,vw->suvw", model.kernels, phi_next)
    return P.reshape(nS * nU, nS * nU)


def propagate_marginals(model: KlqModel, policies: np.ndarray) -> np.ndarray:
    """Forward marginals nu_k = nu_{k-1} P_{k-1}, returned with shape (K+1, |S|, |U|)."""
    policies = np.asarray(policies)
    K = model.horizon
    nu = np.empty((K + 1, model.num_states, model.num_inputs))
    nu[0] = model.initial_marginal
    for k in range(1, K + 1):
        nu_hat = np.einsum("su,usv->v", nu[k - 1], model.kernels)
        nu[k] = nu_hat[:, None] * policies[k]
    return nu


def output_means(model: KlqModel, marginals: np.ndarray) -> np.ndarray:
    """<nu_k, Y> for every k in the sequence."""
    return np.einsum("ksu,su->k", marginals, model.output)


def conditional(nu: np.ndarray):
    """Split a pmf on X into (state marginal, conditional policy).

    Rows of the conditional with zero state mass are left as zeros.
    """
    nu = np.asarray(nu, dtype=float)
    nu_hat = nu.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.where(nu_hat[..., None] > 0, nu / nu_hat[..., None], 0.0)
    return nu_hat, phi


def _log_ratio_on_support(nu, nu0):
    nu = np.asarray(nu, dtype=float)
    nu0 = np.asarray(nu0, dtype=float)
    _, phi = conditional(nu)
    _, phi0 = conditional(nu0)
    support = nu > 0
    bad = support & (phi0 <= 0)
    if np.any(bad):
        s, u = np.argwhere(bad)[0]
        raise AbsoluteContinuityError(
            f"nu(s={s}, u={u}) > 0 where the reference conditional is 0; divergence is infinite"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        llr = np.where(support, np.log(np.where(support, phi, 1.0) / np.where(support, phi0, 1.0)), 0.0)
    return llr, support, phi, phi0


def kl_rate(nu: np.ndarray, nu0: np.ndarray) -> float:
    """Relative entropy rate sum_{s,u} nu(s,u) log(phi(u|s) / phi0(u|s)).

    ``phi`` and ``phi0`` are the conditionals of ``nu`` and ``nu0``.  Terms with
    ``nu(s,u) = 0`` contribute nothing.
    """
    llr, _, _, _ = _log_ratio_on_support(nu, nu0)
    return float(np.sum(np.asarray(nu) * llr))


def kl_rate_subgradient(mu: np.ndarray, nu0: np.ndarray) -> np.ndarray:
    """Subgradient log(phi_mu(u|s) / phi0(u|s)) of the KL rate at ``mu``.

    Unique on the support of ``mu``; set to 0 elsewhere.
    """
    llr, _, _, _ = _log_ratio_on_support(mu, nu0)
    return llr


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Plain relative entropy D(p || q) of two pmfs of the same shape."""
    p = np.ravel(np.asarray(p, dtype=float))
    q = np.ravel(np.asarray(q, dtype=float))
    support = p > 0
    if np.any(q[support] <= 0):
        raise AbsoluteContinuityError("p is not absolutely continuous w.r.t. q")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def total_variation(nu: np.ndarray, nu_prime: np.ndarray) -> float:
    """(1/2) sum_x |nu(x) - nu'(x)|."""
    return 0.5 * float(np.abs(np.asarray(nu) - np.asarray(nu_prime)).sum())


def stationary_marginal(model: KlqModel, k: int | None = None) -> np.ndarray:
    """Invariant pmf on X of the nominal chain with the time-k policy (default: last).

    Only meaningful for time-homogeneous nominal policies.
    """
    k = model.horizon if k is None else k
    phi = model.nominal_policies[k]
    P = np.einsum("usv,vw->suvw", model.kernels, phi).reshape(model.num_points, model.num_points)
    n = model.num_points
    # one balance equation is redundant; swap it for normalisation
    A = P.T - np.eye(n)
    A[-1] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:  # reducible chain: pick a least-squares invariant law
        A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
        pi, *_ = np.linalg.lstsq(A, np.append(np.zeros(n), 1.0), rcond=None)
    pi = np.clip(pi, 0.0, None)
    return (pi / pi.sum()).reshape(model.num_states, model.num_inputs)

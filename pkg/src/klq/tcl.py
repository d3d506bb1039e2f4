"""Discretised refrigerator population (thermostatically controlled load).

Temperature follows ``theta' = theta + alpha (theta_a - theta) - rho m`` with
power mode ``m`` in {0, 1}.  The MDP state is ``s = (bin, mode)``, where
``mode`` is the power mode applied at the previous step, flattened as
``s = 2 * bin + mode``.  The input is the mode applied next, and the output
``Y(s, u) = u`` is the power drawn (fraction of rated power).

Carrying the previous mode in the state keeps the hysteresis thermostat a
Markov policy.  The temperature grid covers the deadband plus a margin on
each side, so that "above the deadband" and "below the deadband" are states
the controlled population can actually occupy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dual import KlqProblem
from .mdp import KlqModel, output_means, propagate_marginals, stationary_marginal
from .relaxation import Basis, parse_basis


class GridTooCoarse(ValueError):
    pass


@dataclass(frozen=True)
class TclParams:
    """Refrigerator model and discretisation.

    The defaults are a desk-scale fixture: when off the temperature rises
    about one bin per step, when on it falls about 1.6 bins, the duty cycle
    is about 0.34 and one on/off cycle takes a little over an hour at
    one-minute steps.
    """

    alpha: float = 0.0032  # thermal leakage per step
    rho: float = 0.145  # cooling per step when on, degC
    ambient: float = 20.0  # degC
    theta_min: float = 2.0
    theta_max: float = 6.0
    num_bins: int = 80
    step_seconds: float = 60.0
    eps: float = 0.25  # nominal switching randomisation
    horizon: int = 360
    margin: float = 0.4  # grid extension beyond each side of the deadband, degC
    kernel_noise: float = 0.0  # mass moved to the second-nearest bin

    def __post_init__(self):
        errors = []
        if not self.theta_min < self.theta_max:
            errors.append("theta_min must be below theta_max")
        if not 0 < self.alpha < 1:
            errors.append("alpha must lie in (0, 1)")
        if not self.rho > 0:
            errors.append("rho must be positive")
        if self.num_bins < 2:
            errors.append("num_bins must be >= 2")
        if not 0 < self.eps < 0.5:
            errors.append("eps must lie in (0, 1/2)")
        if self.horizon < 1:
            errors.append("horizon must be >= 1")
        if self.margin < 0:
            errors.append("margin must be >= 0")
        if not 0 <= self.kernel_noise < 0.5:
            errors.append("kernel_noise must lie in [0, 1/2)")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def grid_low(self) -> float:
        return self.theta_min - self.margin

    @property
    def grid_high(self) -> float:
        return self.theta_max + self.margin

    @property
    def bin_width(self) -> float:
        return (self.grid_high - self.grid_low) / self.num_bins

    @property
    def bin_centers(self) -> np.ndarray:
        return self.grid_low + self.bin_width * (np.arange(self.num_bins) + 0.5)

    @property
    def num_states(self) -> int:
        return 2 * self.num_bins

    def with_(self, **changes) -> "TclParams":
        d = dict(self.__dict__)
        d.update(changes)
        return TclParams(**d)


def temperature_update(params: TclParams, theta, mode):
    """One step of the linear thermal model."""
    return theta + params.alpha * (params.ambient - theta) - params.rho * mode


def temperature_bin(params: TclParams, theta) -> np.ndarray:
    """Nearest bin index; temperatures outside the grid clamp to the boundary bins."""
    idx = np.floor((np.asarray(theta) - params.grid_low) / params.bin_width).astype(int)
    return np.clip(idx, 0, params.num_bins - 1)


def state_index(bin_, mode) -> np.ndarray:
    return 2 * np.asarray(bin_) + np.asarray(mode)


def _check_grid(params: TclParams):
    half = 0.5 * params.bin_width
    leak = params.alpha * (params.ambient - params.theta_min)
    if params.rho < half or abs(leak) < half:
        raise GridTooCoarse(
            f"temperature moves (rho={params.rho:g}, leakage={leak:g}) are below half a bin "
            f"({half:g} degC); use more bins"
        )


def tcl_kernels(params: TclParams) -> np.ndarray:
    """T_u((b, m), (b', u)); deterministic nearest-bin rows unless kernel_noise > 0."""
    _check_grid(params)
    nb = params.num_bins
    T = np.zeros((2, 2 * nb, 2 * nb))
    centers = params.bin_centers
    for u in (0, 1):
        theta_next = temperature_update(params, centers, u)
        pos = (theta_next - params.grid_low) / params.bin_width - 0.5
        nearest = np.clip(np.rint(pos).astype(int), 0, nb - 1)
        other = np.clip(np.where(pos >= nearest, nearest + 1, nearest - 1), 0, nb - 1)
        for b in range(nb):
            dest = [(nearest[b], 1.0 - params.kernel_noise), (other[b], params.kernel_noise)]
            for mode in (0, 1):
                s = 2 * b + mode
                for b2, p in dest:
                    T[u, s, 2 * b2 + u] += p
    return T


def nominal_thermostat_policy(params: TclParams) -> np.ndarray:
    """Randomised hysteresis thermostat, shape (K+1, |S|, 2).

    Above the deadband: on with prob 1-eps.  Below: off with prob 1-eps.
    Inside: keep the current mode with prob 1-eps.  Every entry is >= eps.
    """
    nb, eps = params.num_bins, params.eps
    phi = np.empty((2 * nb, 2))
    for b, theta in enumerate(params.bin_centers):
        for mode in (0, 1):
            if theta > params.theta_max:
                p_on = 1.0 - eps
            elif theta < params.theta_min:
                p_on = eps
            else:
                p_on = 1.0 - eps if mode == 1 else eps
            phi[2 * b + mode] = (1.0 - p_on, p_on)
    return np.broadcast_to(phi, (params.horizon + 1,) + phi.shape).copy()


def build_tcl_model(params: TclParams, initial_marginal=None) -> KlqModel:
    """KlqModel of one refrigerator; the default initial marginal is the nominal stationary pmf."""
    nb = params.num_bins
    output = np.tile([0.0, 1.0], (2 * nb, 1))
    placeholder = np.full((2 * nb, 2), 1.0 / (4 * nb))
    model = KlqModel(
        kernels=tcl_kernels(params),
        nominal_policies=nominal_thermostat_policy(params),
        output=output,
        initial_marginal=placeholder if initial_marginal is None else initial_marginal,
        horizon=params.horizon,
    )
    if initial_marginal is None:
        model = model.replace(initial_marginal=stationary_marginal(model))
    return model


def point_mass(params: TclParams, theta: float, mode: int) -> np.ndarray:
    """Initial marginal concentrated on one temperature bin with the given mode."""
    nu = np.zeros((2 * params.num_bins, 2))
    nu[int(state_index(temperature_bin(params, theta), mode)), mode] = 1.0
    return nu


def coupling_initial_marginals(params: TclParams, count: int = 6) -> list[np.ndarray]:
    """``count`` point masses at evenly spaced deadband temperatures, alternating off/on."""
    thetas = np.linspace(params.theta_min, params.theta_max, count + 2)[1:-1]
    return [point_mass(params, t, i % 2) for i, t in enumerate(thetas)]


def nominal_power(model: KlqModel) -> np.ndarray:
    """<nu0_k, Y> for k = 1..K under the nominal policy."""
    return output_means(model, propagate_marginals(model, model.nominal_policies))[1:]


def steady_state_duty(params: TclParams) -> float:
    """Energy-balance duty estimate alpha (theta_a - theta_mid) / rho.

    Exact balance uses the stationary mean temperature in place of the deadband
    midpoint; randomised switching shifts that mean, so this is a rough guide.
    """
    mid = 0.5 * (params.theta_min + params.theta_max)
    return params.alpha * (params.ambient - mid) / params.rho


def nominal_headroom(model: KlqModel) -> float:
    """Largest symmetric power deviation around the stationary nominal power."""
    y = float(np.sum(stationary_marginal(model) * model.output))
    return min(y, 1.0 - y)


def sinusoid_reference(K: int, amplitude: float, period: float, phase: float = 0.0) -> np.ndarray:
    """Power-deviation request A sin(2 pi k / period + phase), k = 1..K."""
    k = np.arange(1, K + 1)
    return amplitude * np.sin(2.0 * math.pi * k / period + phase)


def build_tracking_problem(
    params: TclParams,
    r,
    kappa: float,
    basis: Basis | str,
    *,
    model: KlqModel | None = None,
    baseline=None,
) -> KlqProblem:
    """KLQ problem whose tracking term penalises power-deviation mismatch.

    ``r`` is the requested deviation below nominal power (positive means
    discharge, i.e. less consumption).  The solver reference is
    ``baseline_k - r_k``; the baseline defaults to this model's nominal power
    trajectory.  Pass a common ``baseline`` when several initial marginals must
    track the same absolute power.
    """
    model = build_tcl_model(params) if model is None else model
    r = np.asarray(r, dtype=float)
    if r.shape != (model.horizon,):
        raise ValueError(f"deviation reference has shape {r.shape}, expected ({model.horizon},)")
    base = nominal_power(model) if baseline is None else np.broadcast_to(np.asarray(baseline, dtype=float), r.shape)
    if isinstance(basis, str):
        basis = parse_basis(basis, model.horizon)
    return KlqProblem(model, base - r, kappa, basis)

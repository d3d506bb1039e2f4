"""Shared fixtures-as-functions: the two-state swap model and random small problems."""

import numpy as np

from klq.dual import KlqProblem
from klq.mdp import KlqModel
from klq.relaxation import Basis, degenerate_basis

E = np.e


def m2_model(horizon=2):
    T = np.array([np.eye(2), [[0.0, 1.0], [1.0, 0.0]]])
    return KlqModel(
        kernels=T,
        nominal_policies=np.full((2, 2), 0.5),
        output=np.array([[0.0, 1.0], [0.0, 1.0]]),
        initial_marginal=np.array([[0.5, 0.5], [0.0, 0.0]]),
        horizon=horizon,
    )


def m2_problem(kappa=1.0, r=(0.7, 0.7)):
    return KlqProblem(m2_model(), np.array(r), kappa, degenerate_basis(2))


def random_model(rng, max_states=6, max_inputs=3, max_horizon=8, zeros=True):
    nS = int(rng.integers(1, max_states + 1))
    nU = int(rng.integers(1, max_inputs + 1))
    K = int(rng.integers(1, max_horizon + 1))
    T = rng.dirichlet(np.ones(nS), size=(nU, nS))
    phi0 = rng.dirichlet(np.ones(nU), size=(K + 1, nS))
    if zeros and nU > 1:
        # knock out some nominal inputs, keeping one positive entry per row
        mask = rng.random((K + 1, nS, nU)) < 0.2
        keep = rng.integers(0, nU, size=(K + 1, nS))
        mask[np.arange(K + 1)[:, None], np.arange(nS)[None, :], keep] = False
        phi0 = np.where(mask, 0.0, phi0)
        phi0 /= phi0.sum(axis=-1, keepdims=True)
    nu0 = rng.dirichlet(np.ones(nS * nU)).reshape(nS, nU)
    Y = rng.normal(size=(nS, nU))
    return KlqModel(T, phi0, Y, nu0, K)


def random_basis(rng, K):
    N = int(rng.integers(1, K + 1))
    while True:
        w = rng.normal(size=(N, K))
        if np.all(np.any(w != 0, axis=1)):
            return Basis(w, name="random")


def random_problem(rng, kappa=None, **kw):
    model = random_model(rng, **kw)
    basis = random_basis(rng, model.horizon)
    r = rng.normal(scale=0.5, size=model.horizon)
    kappa = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0)))) if kappa is None else kappa
    return KlqProblem(model, r, kappa, basis)

"""Weight families for the subspace relaxation of the tracking penalty.

A basis is an ``N x K`` matrix ``w[n, k-1] = w_n(k)`` evaluated at ``k = 1..K``.
Rows are kept raw (not orthonormalised).  Badly conditioned bases slow the
dual ascent down, so keep ``N`` well below ``K``.  Note that transformed
quantities are plain sums over time, so penalty weights are not comparable
across bases without rescaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Basis:
    weights: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError(f"basis weights must be 2-D, got shape {w.shape}")
        N, K = w.shape
        if N < 1 or N > K:
            raise ValueError(f"need 1 <= N <= K, got N={N}, K={K}")
        if np.any(np.all(w == 0.0, axis=1)):
            raise ValueError("basis has an identically zero row")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def horizon(self) -> int:
        return self.weights.shape[1]

    def expand(self, lam) -> np.ndarray:
        """Per-step multipliers lam_check_k = sum_n lam_n w_n(k), length K."""
        return np.asarray(lam, dtype=float) @ self.weights

    def column_norms(self) -> np.ndarray:
        """Euclidean norm of w(k) = (w_1(k), ..., w_N(k)) for each k."""
        return np.linalg.norm(self.weights, axis=0)


def degenerate_basis(K: int) -> Basis:
    """Identity family w_n(k) = 1{n = k}; recovers the unrelaxed problem."""
    if K < 1:
        raise ValueError(f"horizon must be >= 1, got {K}")
    return Basis(np.eye(K), name="degenerate")


def fourier_basis(K: int, N: int, omega: float | None = None) -> Basis:
    """Rows 1, sin(omega m k), cos(omega m k) for m = 1..(N-1)/2, at k = 1..K.

    ``omega`` defaults to 2*pi/K, one fundamental period over the horizon.
    """
    if N % 2 == 0:
        raise ValueError(f"N must be odd, got {N}")
    if not 1 <= N <= K:
        raise ValueError(f"need 1 <= N <= K, got N={N}, K={K}")
    if omega is None:
        omega = 2.0 * math.pi / K
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    k = np.arange(1, K + 1)
    rows = [np.ones(K)]
    for m in range(1, (N - 1) // 2 + 1):
        rows.append(np.sin(omega * m * k))
        rows.append(np.cos(omega * m * k))
    return Basis(np.array(rows), name=f"fourier:{N}:{omega!r}")


def transform_reference(basis: Basis, r) -> np.ndarray:
    """r_hat_n = sum_k w_n(k) r_k."""
    r = np.asarray(r, dtype=float)
    if r.shape != (basis.horizon,):
        raise ValueError(f"reference has shape {r.shape}, basis expects ({basis.horizon},)")
    return basis.weights @ r


def parse_basis(selector: str, K: int) -> Basis:
    """Build a basis from ``"degenerate"`` or ``"fourier:N[:omega]"``."""
    parts = selector.strip().split(":")
    kind = parts[0].lower()
    if kind == "degenerate" and len(parts) == 1:
        return degenerate_basis(K)
    if kind == "fourier" and len(parts) in (2, 3):
        try:
            N = int(parts[1])
            omega = float(parts[2]) if len(parts) == 3 else None
        except ValueError:
            raise ValueError(f"bad basis selector {selector!r}") from None
        return fourier_basis(K, N, omega)
    raise ValueError(f"bad basis selector {selector!r}; use 'degenerate' or 'fourier:N[:omega]'")

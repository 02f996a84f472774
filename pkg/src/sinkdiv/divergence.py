"""Sinkhorn divergence and its two limit oracles.

``W_eps(mu, nu)`` is the transport cost ``<C, P_eps>`` of the entropic plan (the
entropy term is not included). The debiased divergence is
``2 W_eps(mu, nu) - W_eps(mu, mu) - W_eps(nu, nu)``; as ``eps -> 0`` it tends to
twice the exact OT cost and as ``eps -> inf`` to the energy distance with
kernel ``-c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError, UnsupportedInstanceError
from .measures import SQEUCLIDEAN, DiscreteMeasure, GroundCost, cost_matrix
from .sinkhorn import regularized_cost, sinkhorn, sinkhorn_converged

__all__ = [
    "ZERO",
    "INFINITY",
    "DivergenceSpec",
    "transport_cost",
    "sinkhorn_divergence",
    "divergence",
    "mmd_energy",
    "exact_ot",
]

ZERO = "zero"
INFINITY = "infinity"


@dataclass(frozen=True)
class DivergenceSpec:
    """Cost, regularization and iteration budget for one divergence evaluation.

    ``epsilon`` is a positive float or one of the symbolic limits
    :data:`ZERO` / :data:`INFINITY`. ``L=None`` means "run Sinkhorn to
    convergence" (marginal L1 error below ``tol``) instead of a fixed budget.
    """

    cost: GroundCost = SQEUCLIDEAN
    epsilon: float | str = 1.0
    L: int | None = 100
    mode: str = "auto"
    tol: float = 1e-9
    max_iter: int = 100_000

    def __post_init__(self):
        eps = self.epsilon
        if isinstance(eps, str):
            if eps not in (ZERO, INFINITY):
                raise InputError(f"symbolic epsilon must be {ZERO!r} or {INFINITY!r}")
        elif not (np.isfinite(eps) and eps > 0):
            raise InputError(f"epsilon must be positive, got {eps}")
        if self.L is not None and (int(self.L) != self.L or self.L < 1):
            raise InputError("L must be a positive integer or None")

    @property
    def is_finite(self) -> bool:
        return not isinstance(self.epsilon, str)


def transport_cost(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DivergenceSpec) -> float:
    """``W_eps(mu, nu) = <C, P>`` for the Sinkhorn plan selected by ``spec``."""
    if not spec.is_finite:
        raise InputError("transport_cost needs a finite epsilon")
    if mu.dim != nu.dim:
        raise InputError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    C = cost_matrix(mu.points, nu.points, spec.cost).entries
    if spec.L is None:
        state = sinkhorn_converged(C, mu.weights, nu.weights, spec.epsilon, spec.tol, spec.max_iter)
    else:
        state = sinkhorn(C, mu.weights, nu.weights, spec.epsilon, spec.L, mode=spec.mode)
    return regularized_cost(state, C)


def sinkhorn_divergence(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DivergenceSpec) -> float:
    """Debiased Sinkhorn divergence ``2 W(mu, nu) - W(mu, mu) - W(nu, nu)``.

    All three terms share ``spec`` (same eps, L and mode). The value is not
    clamped: positivity for finite eps is an empirical observation only.
    """
    if not spec.is_finite:
        raise InputError("sinkhorn_divergence needs a finite epsilon; use divergence() for limits")
    w_xy = transport_cost(mu, nu, spec)
    w_xx = transport_cost(mu, mu, spec)
    w_yy = transport_cost(nu, nu, spec)
    return 2.0 * w_xy - w_xx - w_yy


def divergence(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DivergenceSpec) -> float:
    """Route on ``spec.epsilon``: exact OT at zero, energy distance at infinity."""
    if spec.epsilon == ZERO:
        return 2.0 * exact_ot(mu, nu, spec.cost)
    if spec.epsilon == INFINITY:
        if spec.cost.kind != "euclidean-power":
            raise UnsupportedInstanceError("the infinite-eps limit needs an euclidean-power cost")
        return mmd_energy(mu, nu, spec.cost.p)
    return sinkhorn_divergence(mu, nu, spec)


def mmd_energy(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float) -> float:
    """Energy distance ``2 E c(X, Y) - E c(X, X') - E c(Y, Y')`` with ``c = ||.||^p``.

    Weighted double sums over all pairs, including the diagonal. Requires
    ``0 < p < 2``, where ``-||x - y||^p`` is conditionally positive definite.
    """
    if not 0 < p < 2:
        raise InputError(f"energy distance needs 0 < p < 2, got {p}")
    if mu.dim != nu.dim:
        raise InputError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    cost = GroundCost.power(p)
    a, b = mu.weights, nu.weights
    cross = a @ cost_matrix(mu.points, nu.points, cost).entries @ b
    self_mu = a @ cost_matrix(mu.points, mu.points, cost).entries @ a
    self_nu = b @ cost_matrix(nu.points, nu.points, cost).entries @ b
    return float(2.0 * cross - self_mu - self_nu)


def _check_assignment_instance(mu: DiscreteMeasure, nu: DiscreteMeasure):
    if mu.n != nu.n:
        raise UnsupportedInstanceError(
            f"exact OT oracle needs equal sizes, got {mu.n} and {nu.n}"
        )
    if not (mu.is_uniform() and nu.is_uniform()):
        raise UnsupportedInstanceError("exact OT oracle needs uniform weights")
    if mu.dim != nu.dim:
        raise InputError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def exact_ot(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: GroundCost = SQEUCLIDEAN) -> float:
    """Unregularized OT between equal-size uniform measures.

    With uniform weights an optimal plan is a permutation, so the value is
    ``(1/n) * min_sigma sum_i c(x_i, y_sigma(i))``.
    """
    _check_assignment_instance(mu, nu)
    C = cost_matrix(mu.points, nu.points, cost).entries
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].sum() / mu.n)


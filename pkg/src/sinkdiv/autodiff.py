"""Reverse-mode differentiation of the L-step Sinkhorn transport cost.

The differentiated function is the algorithmic loss

    E(C) = sum_ij C_ij a_i K_ij b_j,   K = exp(-C / eps),

where ``a, b`` come out of exactly ``L`` sweeps started at ``b = 1``. The
gradient is that of the unrolled recursion, not of the converged problem:
every division and every use of ``K`` is back-propagated. Point and parameter
gradients follow by the chain rule through ``C``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NonDifferentiableError, StabilizationRequired
from .measures import SQEUCLIDEAN, GroundCost, cost_matrix, squared_distances
from .sinkhorn import (
    Tape,
    _check_inputs,
    _log_sweeps,
    _plain_sweeps,
    regularized_cost,
    resolve_mode,
    sinkhorn,
)

__all__ = [
    "GradientBundle",
    "loss_and_grad_cost",
    "replay_tape",
    "cost_vjp",
    "grad_points",
    "grad_self_points",
    "grad_divergence_points",
    "central_differences",
    "finite_diff_check",
]


@dataclass
class GradientBundle:
    """Loss value with gradients w.r.t. the cost matrix and optionally the points."""

    value: float
    d_cost: np.ndarray
    d_x: np.ndarray | None = None
    d_y: np.ndarray | None = None


def _plain_backward(C, K, mu_w, nu_w, eps, tape):
    rows, cols = tape.rows, tape.cols
    L = rows.shape[0]
    a, b = rows[-1], cols[-1]
    KC = K * C
    d_a = KC @ b
    d_b = KC.T @ a
    s_bar = np.empty_like(cols[1:])
    r_bar = np.empty_like(rows)
    for ell in range(L - 1, -1, -1):
        a_l, b_l = rows[ell], cols[ell + 1]
        # b_l = nu / s with s = K^T a_l, so d(b_l)/ds = -b_l^2 / nu
        s = -d_b * b_l * b_l / nu_w
        d_a = d_a + K @ s
        s_bar[ell] = s
        # a_l = mu / r with r = K b_{l-1}
        r = -d_a * a_l * a_l / mu_w
        r_bar[ell] = r
        d_b = K.T @ r
        d_a = 0.0
    d_K = C * np.outer(a, b) + rows.T @ s_bar + r_bar.T @ cols[:-1]
    return np.outer(a, b) * K - d_K * K / eps


def _log_backward(C, mu_w, nu_w, eps, tape):
    rows, cols = tape.rows, tape.cols
    L = rows.shape[0]
    f, g = rows[-1], cols[-1]
    with np.errstate(under="ignore"):
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        CP = C * P
        d_C = P - CP / eps
        d_f = CP.sum(axis=1) / eps
        d_g = CP.sum(axis=0) / eps
        for ell in range(L - 1, -1, -1):
            f_l, g_l, g_prev = rows[ell], cols[ell + 1], cols[ell]
            # g_l = eps log nu - eps LSE_i((f_l - C) / eps): column-normalised weights
            col_w = np.exp((f_l[:, None] + g_l[None, :] - C) / eps) / nu_w[None, :]
            d_C += col_w * d_g[None, :]
            d_f = d_f - col_w @ d_g
            # f_l = eps log mu - eps LSE_j((g_prev - C) / eps): row-normalised weights
            row_w = np.exp((f_l[:, None] + g_prev[None, :] - C) / eps) / mu_w[:, None]
            d_C += row_w * d_f[:, None]
            d_g = -(row_w.T @ d_f)
            d_f = np.zeros_like(d_f)
    return d_C


def loss_and_grad_cost(C, mu_w, nu_w, epsilon: float, L: int, mode: str = "auto") -> GradientBundle:
    """Value ``<C, P^(L)>`` and its exact gradient w.r.t. every entry of ``C``.

    The stabilization ``mode`` ("auto", "plain"/"off", "log"/"on") is decided
    once and used for both passes. The value is bitwise identical to
    ``regularized_cost(sinkhorn(C, ..., mode=mode), C)``.
    """
    C, mu_w, nu_w, epsilon = _check_inputs(C, mu_w, nu_w, epsilon, L)
    log_domain = resolve_mode(C, epsilon, mode)
    state = sinkhorn(C, mu_w, nu_w, epsilon, L, mode="log" if log_domain else "plain", record=True)
    value = regularized_cost(state, C)
    with np.errstate(over="ignore", invalid="ignore"):
        if log_domain:
            d_cost = _log_backward(C, mu_w, nu_w, epsilon, state.tape)
        else:
            d_cost = _plain_backward(C, state.kernel, mu_w, nu_w, epsilon, state.tape)
    if not np.all(np.isfinite(d_cost)):
        raise StabilizationRequired("reverse pass overflowed; use log-domain mode")
    return GradientBundle(value, d_cost)


def replay_tape(C, mu_w, nu_w, epsilon: float, L: int, log_domain: bool) -> Tape:
    """Recompute the forward iterates; matches a recorded tape bitwise."""
    C, mu_w, nu_w, epsilon = _check_inputs(C, mu_w, nu_w, epsilon, L)
    if log_domain:
        _, _, rows, cols = _log_sweeps(C, mu_w, nu_w, epsilon, int(L), True)
    else:
        with np.errstate(under="ignore"):
            K = np.exp(-C / epsilon)
            _, _, rows, cols = _plain_sweeps(K, mu_w, nu_w, int(L), True)
    return Tape(rows, cols, log_domain)


def _pair_weights(X, Y, G, cost: GroundCost, self_pair: bool):
    """Coefficients ``W_ij`` with ``dc_ij/dx_i = W_ij / G_ij * (x_i - y_j)``."""
    if cost.kind == "squared-euclidean":
        return 2.0 * G
    p = cost.p
    r = np.sqrt(squared_distances(X, Y))
    zero = r == 0.0
    if self_pair:
        np.fill_diagonal(zero, False)
    if p <= 1.0 and np.any(zero):
        i, j = np.argwhere(zero)[0]
        raise NonDifferentiableError(
            f"cost ||x - y||^{p:g} is not differentiable at coincident points ({i}, {j})"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        W = G * p * r ** (p - 2.0)
    W[r == 0.0] = 0.0
    return W


def cost_vjp(X, Y, G, cost: GroundCost = SQEUCLIDEAN, self_pair: bool = False):
    """Pull a cost-matrix gradient ``G`` back to the points.

    Returns ``(d_x, d_y)`` with ``d_x[i] = sum_j G_ij dc(x_i, y_j)/dx_i`` and
    likewise for ``d_y``. With ``self_pair=True`` (``Y`` is ``X``) diagonal
    entries are the constant ``c(x, x) = 0`` and carry no gradient.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (X.shape[0], Y.shape[0]):
        raise InputError("gradient shape does not match the point clouds")
    W = _pair_weights(X, Y, G, cost, self_pair)
    if self_pair:
        W = W.copy()
        np.fill_diagonal(W, 0.0)
    d_x = W.sum(axis=1)[:, None] * X - W @ Y
    d_y = W.sum(axis=0)[:, None] * Y - W.T @ X
    return d_x, d_y


def grad_points(X, Y, cost: GroundCost, mu_w, nu_w, epsilon: float, L: int, mode: str = "auto") -> GradientBundle:
    """Gradient of ``W_L(X, Y)`` w.r.t. both point clouds (treated as distinct)."""
    C = cost_matrix(X, Y, cost).entries
    bundle = loss_and_grad_cost(C, mu_w, nu_w, epsilon, L, mode)
    bundle.d_x, bundle.d_y = cost_vjp(X, Y, bundle.d_cost, cost)
    return bundle


def grad_self_points(X, cost: GroundCost, w, epsilon: float, L: int, mode: str = "auto") -> GradientBundle:
    """Gradient of the self term ``W_L(X, X)`` w.r.t. ``X`` (both sides move)."""
    C = cost_matrix(X, X, cost).entries
    bundle = loss_and_grad_cost(C, w, w, epsilon, L, mode)
    d_row, d_col = cost_vjp(X, X, bundle.d_cost, cost, self_pair=True)
    bundle.d_x = d_row + d_col
    return bundle


def grad_divergence_points(
    X, Y, cost: GroundCost, epsilon: float, L: int, mu_w=None, nu_w=None, mode: str = "auto"
) -> GradientBundle:
    """Gradient of ``2 W(X, Y) - W(X, X) - W(Y, Y)`` w.r.t. ``X`` and ``Y``.

    ``d_cost`` is the gradient w.r.t. the cross cost matrix only (times 2).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    mu_w = np.full(len(X), 1.0 / len(X)) if mu_w is None else np.asarray(mu_w, dtype=np.float64)
    nu_w = np.full(len(Y), 1.0 / len(Y)) if nu_w is None else np.asarray(nu_w, dtype=np.float64)
    cross = grad_points(X, Y, cost, mu_w, nu_w, epsilon, L, mode)
    sx = grad_self_points(X, cost, mu_w, epsilon, L, mode)
    sy = grad_self_points(Y, cost, nu_w, epsilon, L, mode)
    value = 2.0 * cross.value - sx.value - sy.value
    return GradientBundle(
        value,
        2.0 * cross.d_cost,
        d_x=2.0 * cross.d_x - sx.d_x,
        d_y=2.0 * cross.d_y - sy.d_x,
    )


def central_differences(f, x0, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient ``(f(x + h e_i) - f(x - h e_i)) / (x_i+ - x_i-)``.

    The subtraction happens in whatever number type ``f`` returns, so an ``f``
    that evaluates in extended precision yields a correspondingly clean
    difference. The denominator is the exactly representable realised step.
    """
    x0 = np.array(x0, dtype=np.float64)
    flat = x0.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        step = xp[i] - xm[i]
        out[i] = float((f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / step)
    return out.reshape(x0.shape)


def finite_diff_check(f, grad, x0, h: float = 1e-5, scale_floor: float = 0.0) -> float:
    """Max relative error between ``grad`` and central differences of ``f`` at ``x0``.

    Per coordinate: ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    with ``floor = max(1e-12, scale_floor * max|numeric|)``. A positive
    ``scale_floor`` keeps coordinates far below the gradient's scale, where
    double-precision differences are pure rounding noise, from dominating.
    """
    analytic = np.asarray(grad, dtype=np.float64)
    numeric = central_differences(f, x0, h)
    if analytic.shape != numeric.shape:
        raise InputError("analytic gradient shape does not match x0")
    floor = max(1e-12, scale_floor * float(np.max(np.abs(numeric), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))

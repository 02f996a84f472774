"""Entropic optimal transport by Sinkhorn matrix scaling.

Two fixed-budget solvers run exactly ``L`` sweeps starting from ``b = 1``:

* :func:`sinkhorn_scaling` -- multiplicative updates on the scalings ``a, b``
  against the Gibbs kernel ``K = exp(-C / eps)``;
* :func:`log_sinkhorn_scaling` -- the same recursion on the potentials
  ``f = eps log a`` and ``g = eps log b`` with log-sum-exp reductions.

Each sweep updates ``a`` first and ``b`` second, so the column marginals of
the implied coupling are exact after every sweep. :func:`sinkhorn_converged`
is the tolerance-driven variant used for evaluation only; it is never
differentiated.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, NumericalError, StabilizationRequired, StabilizationWarning
from .measures import CostMatrix

__all__ = [
    "SinkhornState",
    "Coupling",
    "Tape",
    "gibbs_kernel",
    "needs_log_domain",
    "sinkhorn_scaling",
    "log_sinkhorn_scaling",
    "sinkhorn",
    "sinkhorn_converged",
    "coupling",
    "regularized_cost",
    "marginal_residuals",
]

_TINY = np.finfo(np.float64).tiny
# exp(-x) is subnormal or zero in float64 beyond this
_UNDERFLOW = -np.log(_TINY)


def _entries(C) -> np.ndarray:
    if isinstance(C, CostMatrix):
        return C.entries
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise InputError("cost matrix must be two-dimensional")
    if not np.all(np.isfinite(C)):
        raise InputError("cost matrix contains non-finite entries")
    return C


def _check_weights(w, n, name):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise InputError(f"{name} must have length {n}, got shape {w.shape}")
    if not np.all(w > 0):
        raise InputError(f"{name} must be strictly positive")
    if abs(w.sum() - 1.0) > 1e-10:
        raise InputError(f"{name} must sum to one")
    return w


def _check_inputs(C, mu_w, nu_w, epsilon, L=None):
    C = _entries(C)
    m, n = C.shape
    mu_w = _check_weights(mu_w, m, "mu_w")
    nu_w = _check_weights(nu_w, n, "nu_w")
    if not (np.isfinite(epsilon) and epsilon > 0):
        raise InputError(f"epsilon must be a positive real, got {epsilon}")
    if L is not None and (int(L) != L or L < 1):
        raise InputError(f"iteration budget must be a positive integer, got {L}")
    return C, mu_w, nu_w, float(epsilon)


@dataclass
class Tape:
    """Forward iterates kept for the reverse pass.

    ``rows[l]`` is ``a`` (or ``f`` in log mode) produced by sweep ``l + 1``;
    ``cols[l]`` is ``b`` (or ``g``) after ``l`` sweeps, so ``cols[0]`` is the
    starting point and the tape holds ``L + 1`` column iterates.
    """

    rows: np.ndarray
    cols: np.ndarray
    log_domain: bool


@dataclass
class SinkhornState:
    """Result of a Sinkhorn run.

    In plain mode ``a``, ``b`` and ``kernel`` are set. In log-domain mode the
    potentials ``f``, ``g`` (``f = eps log a``) are authoritative and ``kernel``
    is ``None``; ``a`` and ``b`` are then derived and may over/underflow.
    """

    epsilon: float
    iterations_run: int
    mu_weights: np.ndarray
    nu_weights: np.ndarray
    cost: np.ndarray
    log_domain: bool
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    kernel: np.ndarray | None = None
    f: np.ndarray | None = None
    g: np.ndarray | None = None
    tape: Tape | None = None
    residual: float | None = None
    converged: bool | None = None

    def __post_init__(self):
        if self.log_domain:
            with np.errstate(over="ignore", under="ignore"):
                self.a = np.exp(self.f / self.epsilon)
                self.b = np.exp(self.g / self.epsilon)
        else:
            with np.errstate(divide="ignore"):
                self.f = self.epsilon * np.log(self.a)
                self.g = self.epsilon * np.log(self.b)

    def plan(self) -> np.ndarray:
        if self.log_domain:
            return np.exp((self.f[:, None] + self.g[None, :] - self.cost) / self.epsilon)
        return self.a[:, None] * self.kernel * self.b[None, :]


@dataclass
class Coupling:
    """Transport plan with its marginal deviations (max absolute error)."""

    matrix: np.ndarray
    row_residual: float
    col_residual: float


def gibbs_kernel(C, epsilon: float) -> np.ndarray:
    """``K = exp(-C / eps)``; warns with :class:`StabilizationWarning` on underflow."""
    C = _entries(C)
    if not (np.isfinite(epsilon) and epsilon > 0):
        raise InputError(f"epsilon must be a positive real, got {epsilon}")
    with np.errstate(under="ignore"):
        K = np.exp(-C / epsilon)
    if np.any(K < _TINY):
        warnings.warn(
            "Gibbs kernel underflows; switch to log-domain iterations",
            StabilizationWarning,
            stacklevel=2,
        )
    return K


def needs_log_domain(C, epsilon: float) -> bool:
    """Automatic mode rule: small ``eps`` relative to the costs, or kernel underflow."""
    C = _entries(C)
    cmax = float(C.max()) if C.size else 0.0
    return bool(epsilon < 0.01 * cmax or cmax / epsilon > _UNDERFLOW)


def _divide(num, den):
    if not np.all(den >= _TINY):
        raise StabilizationRequired(
            "Sinkhorn denominator below the smallest normal float; use log-domain mode"
        )
    out = num / den
    if not np.all(np.isfinite(out)):
        raise StabilizationRequired("Sinkhorn scaling overflowed; use log-domain mode")
    return out


def _plain_sweeps(K, mu_w, nu_w, L, record):
    m, n = K.shape
    b = np.ones(n)
    a = None
    rows = np.empty((L, m)) if record else None
    cols = np.empty((L + 1, n)) if record else None
    if record:
        cols[0] = b
    for ell in range(L):
        a = _divide(mu_w, K @ b)
        b = _divide(nu_w, K.T @ a)
        if record:
            rows[ell] = a
            cols[ell + 1] = b
    return a, b, rows, cols


def _log_sweeps(C, mu_w, nu_w, epsilon, L, record):
    m, n = C.shape
    log_mu = epsilon * np.log(mu_w)
    log_nu = epsilon * np.log(nu_w)
    Ce = C / epsilon
    g = np.zeros(n)
    f = None
    rows = np.empty((L, m)) if record else None
    cols = np.empty((L + 1, n)) if record else None
    if record:
        cols[0] = g
    for ell in range(L):
        f = log_mu - epsilon * logsumexp(g[None, :] / epsilon - Ce, axis=1)
        g = log_nu - epsilon * logsumexp(f[:, None] / epsilon - Ce, axis=0)
        if record:
            rows[ell] = f
            cols[ell + 1] = g
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise NumericalError("non-finite Sinkhorn potentials")
    return f, g, rows, cols


def sinkhorn_scaling(C, mu_w, nu_w, epsilon: float, L: int, record: bool = False) -> SinkhornState:
    """Run ``L`` multiplicative sweeps ``a <- mu/(K b)``, ``b <- nu/(K^T a)``.

    Raises :class:`StabilizationRequired` if a denominator drops below the
    smallest normal float or a scaling overflows.
    """
    C, mu_w, nu_w, epsilon = _check_inputs(C, mu_w, nu_w, epsilon, L)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilizationWarning)
        K = gibbs_kernel(C, epsilon)
    with np.errstate(under="ignore"):
        a, b, rows, cols = _plain_sweeps(K, mu_w, nu_w, int(L), record)
    tape = Tape(rows, cols, False) if record else None
    return SinkhornState(epsilon, int(L), mu_w, nu_w, C, False, a=a, b=b, kernel=K, tape=tape)


def log_sinkhorn_scaling(C, mu_w, nu_w, epsilon: float, L: int, record: bool = False) -> SinkhornState:
    """Log-domain twin of :func:`sinkhorn_scaling`; never under/overflows."""
    C, mu_w, nu_w, epsilon = _check_inputs(C, mu_w, nu_w, epsilon, L)
    f, g, rows, cols = _log_sweeps(C, mu_w, nu_w, epsilon, int(L), record)
    tape = Tape(rows, cols, True) if record else None
    return SinkhornState(epsilon, int(L), mu_w, nu_w, C, True, f=f, g=g, tape=tape)


def resolve_mode(C, epsilon: float, mode: str = "auto") -> bool:
    """Return ``True`` when the log-domain path should be used."""
    if mode in ("log", "on", True):
        return True
    if mode in ("plain", "off", False):
        return False
    if mode != "auto":
        raise InputError(f"unknown stabilization mode {mode!r}")
    return needs_log_domain(C, epsilon)


def sinkhorn(C, mu_w, nu_w, epsilon: float, L: int, mode: str = "auto", record: bool = False):
    """Fixed-budget Sinkhorn with the stabilization mode chosen once up front."""
    if resolve_mode(C, epsilon, mode):
        return log_sinkhorn_scaling(C, mu_w, nu_w, epsilon, L, record=record)
    return sinkhorn_scaling(C, mu_w, nu_w, epsilon, L, record=record)


def _newton_semidual(C, mu_w, log_nu, epsilon, f, tol, max_steps, max_halvings=30):
    """Damped Newton ascent on the dual with ``g`` eliminated by the exact column update.

    Returns ``(f, g, row_residual, steps)``. Steps are accepted when they
    lower the row-marginal L1 error; the loop stops at ``tol`` or when no
    halving of the step helps.
    """
    m = len(f)

    def evaluate(f):
        g = log_nu - epsilon * logsumexp((f[:, None] - C) / epsilon, axis=0)
        with np.errstate(over="ignore", under="ignore"):
            P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
        rows = P.sum(axis=1)
        return g, P, rows, float(np.abs(rows - mu_w).sum())

    g, P, rows, residual = evaluate(f)
    nu_w = np.exp(log_nu / epsilon)
    steps = 0
    while residual >= tol and steps < max_steps:
        # Negative Hessian up to 1/eps; constant shifts of f are a null direction, so pin the last entry.
        H = np.diag(rows) - (P / nu_w[None, :]) @ P.T
        rhs = epsilon * (mu_w - rows)
        delta = np.zeros(m)
        try:
            delta[:-1] = np.linalg.solve(H[:-1, :-1], rhs[:-1])
        except np.linalg.LinAlgError:
            delta[:-1] = np.linalg.lstsq(H[:-1, :-1], rhs[:-1], rcond=None)[0]
        t = 1.0
        for _ in range(max_halvings):
            trial = f + t * delta
            g_t, P_t, rows_t, res_t = evaluate(trial)
            if np.isfinite(res_t) and res_t < residual:
                break
            t *= 0.5
        else:
            break
        f, g, P, rows, residual = trial, g_t, P_t, rows_t, res_t
        steps += 1
    return f, g, residual, steps


def sinkhorn_converged(
    C,
    mu_w,
    nu_w,
    epsilon: float,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    absorb_threshold: float = 1e30,
    newton_after: int = 1000,
) -> SinkhornState:
    """Iterate until the row-marginal L1 error drops below ``tol``.

    Potentials are kept in log form. Sweeps are multiplicative against the
    absorbed kernel ``exp((f_i + g_j - C_ij) / eps)``, which is rebuilt when
    a scaling exceeds ``absorb_threshold``; a denominator that underflows is
    handled by an exact log-sum-exp half-update instead. Evaluation only: the
    iteration count depends on the data.

    Sweeps contract slowly when ``eps`` is small against the point spacing.
    If ``newton_after`` sweeps have not reached ``tol``, the same dual is
    finished by damped Newton steps (each counted as one iteration); should
    those stall, sweeping resumes and Newton is retried every ``newton_after``
    sweeps. ``newton_after=0`` disables it.
    """
    C, mu_w, nu_w, epsilon = _check_inputs(C, mu_w, nu_w, epsilon)
    m, n = C.shape
    log_mu = epsilon * np.log(mu_w)
    log_nu = epsilon * np.log(nu_w)
    f = np.zeros(m)
    g = np.zeros(n)
    a = np.ones(m)
    b = np.ones(n)

    def kernel():
        return np.exp((f[:, None] + g[None, :] - C) / epsilon)

    residual = np.inf
    it = 0
    next_newton = newton_after
    with np.errstate(under="ignore", divide="ignore"):
        K = kernel()
        while True:
            Kb = K @ b
            if it > 0:
                residual = float(np.abs(a * Kb - mu_w).sum())
                if residual < tol or it >= max_iter:
                    break
            if newton_after > 0 and it >= next_newton:
                next_newton = it + newton_after
                f = f + epsilon * np.log(a)
                f, g, residual, steps = _newton_semidual(C, mu_w, log_nu, epsilon, f, tol, max_iter - it)
                it += steps
                a, b = np.ones(m), np.ones(n)
                K = kernel()
                if residual < tol or it >= max_iter:
                    break
                Kb = K @ b
            if Kb.min() < _TINY:
                f, g = f + epsilon * np.log(a), g + epsilon * np.log(b)
                f = log_mu - epsilon * logsumexp((g[None, :] - C) / epsilon, axis=1)
                a, b = np.ones(m), np.ones(n)
                K = kernel()
                Kb = K @ b
            a = mu_w / Kb
            KTa = K.T @ a
            if KTa.min() < _TINY:
                f, g = f + epsilon * np.log(a), g + epsilon * np.log(b)
                g = log_nu - epsilon * logsumexp((f[:, None] - C) / epsilon, axis=0)
                a, b = np.ones(m), np.ones(n)
                K = kernel()
            else:
                b = nu_w / KTa
            it += 1
            if a.max() > absorb_threshold or b.max() > absorb_threshold:
                f, g = f + epsilon * np.log(a), g + epsilon * np.log(b)
                a, b = np.ones(m), np.ones(n)
                K = kernel()
    f = f + epsilon * np.log(a)
    g = g + epsilon * np.log(b)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise NumericalError("non-finite potentials in converged Sinkhorn")
    return SinkhornState(
        epsilon, it, mu_w, nu_w, C, True, f=f, g=g,
        residual=residual, converged=bool(residual < tol),
    )


def marginal_residuals(P: np.ndarray, mu_w, nu_w):
    row = float(np.max(np.abs(P.sum(axis=1) - mu_w)))
    col = float(np.max(np.abs(P.sum(axis=0) - nu_w)))
    return row, col


def coupling(state: SinkhornState) -> Coupling:
    """``P = diag(a) K diag(b)`` with its row/column marginal deviations."""
    P = state.plan()
    row, col = marginal_residuals(P, state.mu_weights, state.nu_weights)
    return Coupling(P, row, col)


def regularized_cost(state: SinkhornState, C=None) -> float:
    """Transport cost ``<C, P>`` of the state's coupling.

    Plain mode evaluates ``<(K * C) b, a>``; log mode sums
    ``C_ij exp((f_i + g_j - C_ij) / eps)``.
    """
    C = state.cost if C is None else _entries(C)
    if C.shape != state.cost.shape:
        raise InputError("cost matrix does not match the Sinkhorn state")
    if state.log_domain:
        with np.errstate(under="ignore"):
            P = np.exp((state.f[:, None] + state.g[None, :] - C) / state.epsilon)
        value = float(np.sum(C * P))
    else:
        value = float(state.a @ ((state.kernel * C) @ state.b))
    if not np.isfinite(value):
        raise NumericalError("non-finite regularized cost")
    return value

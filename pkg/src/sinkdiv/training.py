"""Minibatch training on the Sinkhorn divergence.

Each generator step samples a data minibatch and ``m`` latent codes, pushes
the codes through the generator, and descends the three-term divergence
``2 W(x, y) - W(x, x) - W(y, y)`` differentiated through ``L`` Sinkhorn
sweeps. With a :class:`~sinkdiv.models.CostNetwork`, every generator step is
preceded by ``n_c`` RMSProp ascent steps on the cost parameters, each
followed by weight clipping.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import cost_vjp, loss_and_grad_cost
from .errors import InputError, NumericalError
from .measures import SQEUCLIDEAN, DiscreteMeasure, GroundCost, cost_matrix, sample_minibatch
from .models import CostNetwork, clip_params, model_to_json, sample_latent
from .sinkhorn import regularized_cost, sinkhorn

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TraceRecord",
    "TrainTrace",
    "TrainingAborted",
    "rmsprop_update",
    "adam_update",
    "batch_divergence",
    "draw_batch",
    "minibatch_loss",
    "fit",
]


@dataclass(frozen=True)
class TrainConfig:
    epsilon: float = 1.0
    L: int = 10
    m: int = 200
    learning_rate: float = 1e-2
    steps: int = 1000
    seed: int = 0
    optimizer: str = "adam"
    rho: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    n_c: int | None = None
    critic_learning_rate: float | None = None
    clip: float = 0.01
    mode: str = "auto"
    stratified: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (self.epsilon > 0 and self.learning_rate > 0 and self.clip > 0):
            raise InputError("epsilon, learning rate and clip bound must be positive")
        if self.L < 1 or self.m < 1 or self.steps < 0:
            raise InputError("L and m must be positive and steps non-negative")
        if self.n_c is not None and self.n_c < 0:
            raise InputError("n_c must be non-negative")
        if self.optimizer not in ("adam", "rmsprop"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")

    def critic_steps(self, has_cost_network: bool) -> int:
        if self.n_c is not None:
            return self.n_c if has_cost_network else 0
        return 5 if has_cost_network else 0


@dataclass
class OptimizerState:
    """Moment accumulators; ``s`` for RMSProp, ``m``/``v``/``t`` for Adam."""

    s: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(s=np.zeros(n), m=np.zeros(n), v=np.zeros(n), t=0)


def rmsprop_update(params, grad, state: OptimizerState, lr, rho=0.9, delta=1e-8, ascent=False):
    """``s <- rho s + (1 - rho) g^2``; step ``-(+) lr g / (sqrt(s) + delta)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    s = state.s if state.s is not None else np.zeros_like(params)
    if grad.shape != params.shape or s.shape != params.shape:
        raise InputError("parameter, gradient and state shapes differ")
    s = rho * s + (1.0 - rho) * grad * grad
    step = lr * grad / (np.sqrt(s) + delta)
    new = params + step if ascent else params - step
    return new, replace(state, s=s, t=state.t + 1)


def adam_update(params, grad, state: OptimizerState, lr, beta1=0.9, beta2=0.999, delta=1e-8):
    """Bias-corrected Adam step."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    m = state.m if state.m is not None else np.zeros_like(params)
    v = state.v if state.v is not None else np.zeros_like(params)
    if grad.shape != params.shape or m.shape != params.shape:
        raise InputError("parameter, gradient and state shapes differ")
    t = state.t + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + delta)
    return new, replace(state, m=m, v=v, t=t)


@dataclass
class TraceRecord:
    step: int
    loss: float
    grad_norm_theta: float
    grad_norm_phi: float
    seconds: float
    phi_abs_max: float | None = None


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def window_means(self, window: int = 100):
        """Mean loss over the first and the last ``window`` steps."""
        losses = self.losses
        w = min(window, len(losses))
        return float(losses[:w].mean()), float(losses[-w:].mean())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "loss", "grad_norm_theta", "grad_norm_phi", "seconds"])
            for r in self.records:
                writer.writerow([r.step, f"{r.loss:.17g}", f"{r.grad_norm_theta:.17g}",
                                 f"{r.grad_norm_phi:.17g}", f"{r.seconds:.6f}"])


class TrainingAborted(NumericalError):
    """Raised on a numeric failure; carries the trace and models up to that point."""

    def __init__(self, message, trace, model, cost_network):
        super().__init__(message)
        self.trace = trace
        self.model = model
        self.cost_network = cost_network


def _self_value(C, w, config):
    state = sinkhorn(C, w, w, config.epsilon, config.L, mode=config.mode)
    return regularized_cost(state, C)


def batch_divergence(model, cost, Z, ks, Y, config: TrainConfig, need_theta=True, need_phi=False):
    """Divergence between ``g(Z)`` and the data batch ``Y`` with gradients.

    ``cost`` is a :class:`GroundCost` or a :class:`CostNetwork`. Returns
    ``(value, grad_theta, grad_phi)``; gradients not requested are ``None``.
    """
    X, cache = model.forward(Z, ks)
    mx = np.full(len(X), 1.0 / len(X))
    my = np.full(len(Y), 1.0 / len(Y))
    eps, L, mode = config.epsilon, config.L, config.mode
    grad_theta = grad_phi = None
    if isinstance(cost, CostNetwork):
        C_xy, c_xy = cost.forward(X, Y)
        C_xx, c_xx = cost.forward(X)
        C_yy, c_yy = cost.forward(Y)
        cross = loss_and_grad_cost(C_xy, mx, my, eps, L, mode)
        sx = loss_and_grad_cost(C_xx, mx, mx, eps, L, mode)
        if need_phi:
            sy = loss_and_grad_cost(C_yy, my, my, eps, L, mode)
            sy_value = sy.value
        else:
            sy_value = _self_value(C_yy, my, config)
        value = 2.0 * cross.value - sx.value - sy_value
        phi_xy, dX_xy, _ = cost.backward(c_xy, cross.d_cost)
        phi_xx, dX_xx, _ = cost.backward(c_xx, sx.d_cost)
        if need_phi:
            phi_yy, _, _ = cost.backward(c_yy, sy.d_cost)
            grad_phi = 2.0 * phi_xy - phi_xx - phi_yy
        if need_theta:
            grad_theta = model.backward(cache, 2.0 * dX_xy - dX_xx)
        return value, grad_theta, grad_phi
    C_xy = cost_matrix(X, Y, cost).entries
    C_xx = cost_matrix(X, X, cost).entries
    C_yy = cost_matrix(Y, Y, cost).entries
    cross = loss_and_grad_cost(C_xy, mx, my, eps, L, mode)
    sx = loss_and_grad_cost(C_xx, mx, mx, eps, L, mode)
    value = 2.0 * cross.value - sx.value - _self_value(C_yy, my, config)
    if need_theta:
        dX_xy, _ = cost_vjp(X, Y, cross.d_cost, cost)
        row, col = cost_vjp(X, X, sx.d_cost, cost, self_pair=True)
        grad_theta = model.backward(cache, 2.0 * dX_xy - (row + col))
    return value, grad_theta, grad_phi


def draw_batch(model, data: DiscreteMeasure, config: TrainConfig, rng):
    """Draw the data minibatch first, then the latent codes."""
    Y = sample_minibatch(data, config.m, rng).points
    sampler = replace(model.latent, stratified=config.stratified)
    Z, ks = sample_latent(sampler, config.m, rng)
    return Z, ks, Y


def minibatch_loss(model, cost, data: DiscreteMeasure, config: TrainConfig, rng,
                   need_theta=True, need_phi=None):
    """Sample one minibatch pair and evaluate :func:`batch_divergence` on it."""
    if need_phi is None:
        need_phi = isinstance(cost, CostNetwork)
    Z, ks, Y = draw_batch(model, data, config, rng)
    return batch_divergence(model, cost, Z, ks, Y, config, need_theta, need_phi)


def _norm(v):
    return float(np.sqrt(np.dot(v, v))) if v is not None else 0.0


def fit(model, data: DiscreteMeasure, config: TrainConfig, cost=None, cost_network: CostNetwork | None = None,
        trace_path=None, checkpoint_path=None):
    """Run ``config.steps`` generator updates; returns ``(model, cost_network, trace)``.

    ``cost`` is the fixed ground cost (default squared Euclidean); passing a
    ``cost_network`` switches to the learned cost with ``n_c`` ascent steps
    per generator step. Fully determined by ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    fixed_cost = SQEUCLIDEAN if cost is None else cost
    if not isinstance(fixed_cost, GroundCost):
        raise InputError("cost must be a GroundCost; pass learned costs as cost_network")
    n_c = config.critic_steps(cost_network is not None)
    critic_lr = config.critic_learning_rate or config.learning_rate
    theta = model.params
    theta_state = OptimizerState.zeros(theta.size)
    phi_state = OptimizerState.zeros(cost_network.params.size) if cost_network is not None else None
    trace = TrainTrace()
    start = time.perf_counter()
    for step in range(config.steps):
        grad_phi_norm = 0.0
        try:
            for _ in range(n_c):
                _, _, grad_phi = minibatch_loss(model, cost_network, data, config, rng,
                                                need_theta=False, need_phi=True)
                if not np.all(np.isfinite(grad_phi)):
                    raise NumericalError(f"non-finite cost-network gradient at step {step}")
                phi, phi_state = rmsprop_update(cost_network.params, grad_phi, phi_state, critic_lr,
                                                config.rho, config.delta, ascent=True)
                cost_network = clip_params(cost_network.with_params(phi))
                if np.max(np.abs(cost_network.params)) > cost_network.clip:
                    raise NumericalError("clipping invariant violated")
                grad_phi_norm = _norm(grad_phi)
            active_cost = cost_network if cost_network is not None else fixed_cost
            value, grad_theta, _ = minibatch_loss(model, active_cost, data, config, rng,
                                                  need_theta=True, need_phi=False)
            if not (np.isfinite(value) and np.all(np.isfinite(grad_theta))):
                raise NumericalError(f"non-finite loss or generator gradient at step {step}")
        except NumericalError as exc:
            raise TrainingAborted(str(exc), trace, model, cost_network) from exc
        if config.optimizer == "adam":
            theta, theta_state = adam_update(theta, grad_theta, theta_state, config.learning_rate,
                                             config.beta1, config.beta2, config.delta)
        else:
            theta, theta_state = rmsprop_update(theta, grad_theta, theta_state, config.learning_rate,
                                                config.rho, config.delta)
        model = model.with_params(theta)
        trace.records.append(TraceRecord(
            step, float(value), _norm(grad_theta), grad_phi_norm, time.perf_counter() - start,
            float(np.max(np.abs(cost_network.params))) if cost_network is not None else None,
        ))
        if checkpoint_path and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            with open(checkpoint_path, "w", encoding="utf-8") as fh:
                fh.write(model_to_json(model))
    if trace_path:
        trace.to_csv(trace_path)
    return model, cost_network, trace

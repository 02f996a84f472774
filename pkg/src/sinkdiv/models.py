"""Differentiable generators, the learnable cost network and latent samplers.

Every model is an immutable value object with a flat parameter vector
(``params``) and ``with_params`` returning an updated copy. ``forward``
returns the outputs plus a cache; ``backward`` maps an output gradient to a
flat parameter gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NonDifferentiableError
from .measures import CostMatrix, GroundCost, squared_distances

__all__ = [
    "LatentSampler",
    "sample_latent",
    "EllipseModel",
    "AtomsModel",
    "MlpGenerator",
    "CostNetwork",
    "ellipse_forward",
    "mlp_forward",
    "cost_network_matrix",
    "clip_params",
    "kmeans_centers",
    "model_to_json",
    "model_from_json",
]

_FEATURE_COST = GroundCost("precomputed-feature")
_ACTIVATIONS = ("relu", "sigmoid", "none")


@dataclass(frozen=True)
class LatentSampler:
    """Reference measure for latent codes.

    kind is ``uniform-unit-square`` (``[0, 1]^dim``), ``uniform-unit-ball-mixture``
    (pick one of ``components`` balls uniformly, then a uniform point of the
    unit ball) or ``gaussian``.
    """

    kind: str = "uniform-unit-square"
    dim: int = 2
    components: int = 1
    stratified: bool = True

    def __post_init__(self):
        if self.kind not in ("uniform-unit-square", "uniform-unit-ball-mixture", "gaussian"):
            raise InputError(f"unknown latent kind {self.kind!r}")
        if self.dim < 1 or self.components < 1:
            raise InputError("latent dimension and component count must be positive")


def _ball_points(m, d, rng):
    direction = rng.standard_normal((m, d))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    radius = rng.random((m, 1)) ** (1.0 / d)
    return direction / norms * radius


def sample_latent(sampler: LatentSampler, m: int, rng: np.random.Generator):
    """Draw ``m`` latent codes; returns ``(Z, component_indices)``.

    Indices are ``None`` except for the ball mixture. A stratified mixture
    assigns ``m // K`` codes to every component and spreads the remainder
    over randomly chosen components; otherwise indices are i.i.d. uniform.
    """
    if m < 1:
        raise InputError("latent sample size must be at least 1")
    if sampler.kind == "uniform-unit-square":
        return rng.random((m, sampler.dim)), None
    if sampler.kind == "gaussian":
        return rng.standard_normal((m, sampler.dim)), None
    K = sampler.components
    if sampler.stratified:
        ks = np.repeat(np.arange(K), m // K)
        extra = rng.choice(K, size=m - ks.size, replace=False) if m % K else np.empty(0, int)
        ks = np.sort(np.concatenate([ks, extra])).astype(int)
    else:
        ks = rng.integers(0, K, size=m)
    return _ball_points(m, sampler.dim, rng), ks


@dataclass(frozen=True, eq=False)
class EllipseModel:
    """``K`` uniform ellipsoids of equal mass: ``x = A_k z + alpha_k`` for ``z`` in ball ``k``."""

    A: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        alpha = np.array(self.alpha, dtype=np.float64)
        if A.ndim != 3 or A.shape[1] != A.shape[2] or alpha.shape != A.shape[:2]:
            raise InputError("EllipseModel needs A of shape (K, d, d) and alpha of shape (K, d)")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(alpha))):
            raise InputError("EllipseModel parameters must be finite")
        A.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "alpha", alpha)

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def latent(self) -> LatentSampler:
        return LatentSampler("uniform-unit-ball-mixture", self.dim, self.K)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.alpha.ravel()])

    def with_params(self, theta) -> "EllipseModel":
        theta = np.asarray(theta, dtype=np.float64)
        n_a = self.A.size
        return EllipseModel(theta[:n_a].reshape(self.A.shape), theta[n_a:].reshape(self.alpha.shape))

    @classmethod
    def init(cls, centers) -> "EllipseModel":
        centers = np.asarray(centers, dtype=np.float64)
        K, d = centers.shape
        return cls(np.tile(np.eye(d), (K, 1, 1)), centers)

    def forward(self, Z, ks):
        Z = np.asarray(Z, dtype=np.float64)
        X = np.einsum("nij,nj->ni", self.A[ks], Z) + self.alpha[ks]
        return X, (Z, ks)

    def backward(self, cache, dX) -> np.ndarray:
        Z, ks = cache
        dA = np.zeros_like(self.A)
        dalpha = np.zeros_like(self.alpha)
        np.add.at(dA, ks, dX[:, :, None] * Z[:, None, :])
        np.add.at(dalpha, ks, dX)
        return np.concatenate([dA.ravel(), dalpha.ravel()])

    def contains(self, X, k: int, tol: float = 1e-12) -> np.ndarray:
        """Membership mask ``||A_k^{-1}(x - alpha_k)|| <= 1``; raises LinAlgError if singular."""
        X = np.asarray(X, dtype=np.float64)
        A = self.A[k]
        if np.linalg.cond(A) > 1e12:
            raise np.linalg.LinAlgError(f"ellipse {k} has a singular matrix")
        U = np.linalg.solve(A, (X - self.alpha[k]).T).T
        return np.linalg.norm(U, axis=1) <= 1.0 + tol


def ellipse_forward(model: EllipseModel, z, k: int) -> np.ndarray:
    """Push one latent point of ball ``k`` forward: ``A_k z + alpha_k``."""
    if not 0 <= k < model.K:
        raise InputError(f"component index {k} out of range for {model.K} ellipses")
    z = np.asarray(z, dtype=np.float64)
    return model.A[k] @ z + model.alpha[k]


@dataclass(frozen=True, eq=False)
class AtomsModel:
    """``K`` equal-mass Dirac atoms at learnable locations (the quantization model)."""

    locations: np.ndarray

    def __post_init__(self):
        loc = np.array(self.locations, dtype=np.float64)
        if loc.ndim == 1:
            loc = loc[None, :]
        loc.setflags(write=False)
        object.__setattr__(self, "locations", loc)

    @property
    def latent(self) -> LatentSampler:
        return LatentSampler("uniform-unit-ball-mixture", self.locations.shape[1], self.locations.shape[0])

    @property
    def params(self) -> np.ndarray:
        return self.locations.ravel().copy()

    def with_params(self, theta) -> "AtomsModel":
        return AtomsModel(np.asarray(theta, dtype=np.float64).reshape(self.locations.shape))

    def forward(self, Z, ks):
        return self.locations[ks], ks

    def backward(self, cache, dX) -> np.ndarray:
        grad = np.zeros_like(self.locations)
        np.add.at(grad, cache, dX)
        return grad.ravel()


def _xavier(fan_in, fan_out, rng):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class MlpGenerator:
    """Fully connected network ``h_{k+1} = act_k(h_k W_k + b_k)``.

    ``weights[k]`` has shape (fan_in, fan_out); ``activations[k]`` is one of
    ``relu``, ``sigmoid`` or ``none``.
    """

    weights: tuple
    biases: tuple
    activations: tuple
    latent_kind: str = "uniform-unit-square"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        weights = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        biases = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        acts = tuple(self.activations)
        if not (len(weights) == len(biases) == len(acts)) or not weights:
            raise InputError("MLP needs matching weights, biases and activations")
        for k, (w, b, act) in enumerate(zip(weights, biases, acts)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InputError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k and w.shape[0] != weights[k - 1].shape[1]:
                raise InputError(f"layer {k}: input width {w.shape[0]} does not chain")
            if act not in _ACTIVATIONS:
                raise InputError(f"unknown activation {act!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InputError("MLP parameters must be finite")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "activations", acts)

    @classmethod
    def xavier(cls, widths, rng, activations=None, latent_kind="uniform-unit-square", seed=None):
        """Xavier-uniform weights, zero biases; ReLU hidden layers and linear output by default."""
        widths = list(widths)
        if activations is None:
            activations = ["relu"] * (len(widths) - 2) + ["none"]
        weights = [_xavier(widths[k], widths[k + 1], rng) for k in range(len(widths) - 1)]
        biases = [np.zeros(widths[k + 1]) for k in range(len(widths) - 1)]
        return cls(tuple(weights), tuple(biases), tuple(activations), latent_kind,
                   {"init": "xavier-uniform", "seed": seed})

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def latent(self) -> LatentSampler:
        return LatentSampler(self.latent_kind, self.input_dim)

    @property
    def shapes(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([list(w.shape), list(b.shape)])
        return out

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([t.ravel() for w, b in zip(self.weights, self.biases) for t in (w, b)])

    def with_params(self, theta) -> "MlpGenerator":
        theta = np.asarray(theta, dtype=np.float64)
        expected = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
        if theta.shape != (expected,):
            raise InputError(f"expected {expected} parameters, got shape {theta.shape}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(theta[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            biases.append(theta[pos:pos + b.size].reshape(b.shape))
            pos += b.size
        return MlpGenerator(tuple(weights), tuple(biases), self.activations, self.latent_kind, self.meta)

    def forward(self, Z, ks=None):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.input_dim:
            raise InputError(f"expected inputs with {self.input_dim} columns, got shape {Z.shape}")
        h = Z
        inputs, outputs = [], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            pre = h @ w + b
            if act == "relu":
                h = np.maximum(pre, 0.0)
            elif act == "sigmoid":
                h = _sigmoid(pre)
            else:
                h = pre
            outputs.append(h)
        return h, (inputs, outputs)

    def backward_full(self, cache, dY):
        """Return ``(flat parameter gradient, input gradient)``."""
        inputs, outputs = cache
        grads = []
        delta = np.asarray(dY, dtype=np.float64)
        for k in range(len(self.weights) - 1, -1, -1):
            act = self.activations[k]
            if act == "relu":
                delta = delta * (outputs[k] > 0)
            elif act == "sigmoid":
                delta = delta * outputs[k] * (1.0 - outputs[k])
            grads.append((inputs[k].T @ delta, delta.sum(axis=0)))
            delta = delta @ self.weights[k].T
        flat = np.concatenate([t.ravel() for gw, gb in reversed(grads) for t in (gw, gb)])
        return flat, delta

    def backward(self, cache, dY) -> np.ndarray:
        return self.backward_full(cache, dY)[0]


def mlp_forward(model: MlpGenerator, Z) -> np.ndarray:
    """Apply the network to every row of ``Z``."""
    return model.forward(Z)[0]


@dataclass(frozen=True, eq=False)
class CostNetwork:
    """Learned ground cost ``c(x, y) = ||f(x) - f(y)||`` with a feature MLP ``f``.

    ``clip`` bounds every parameter after each ascent step.
    """

    features: MlpGenerator
    clip: float = 0.01

    def __post_init__(self):
        if not self.clip > 0:
            raise InputError("clip bound must be positive")

    @classmethod
    def init(cls, input_dim, rng, feature_dim=16, hidden=32, clip=0.01, seed=None):
        net = MlpGenerator.xavier([input_dim, hidden, feature_dim], rng,
                                  activations=["sigmoid", "none"], seed=seed)
        return clip_params(cls(net, clip))

    @property
    def params(self) -> np.ndarray:
        return self.features.params

    def with_params(self, phi) -> "CostNetwork":
        return CostNetwork(self.features.with_params(phi), self.clip)

    def forward(self, X, Y=None):
        """Cost matrix between ``X`` and ``Y`` (``Y=None`` means the self pair ``X, X``)."""
        self_pair = Y is None
        X = np.asarray(X, dtype=np.float64)
        Fx, cx = self.features.forward(X)
        if self_pair:
            Y, Fy, cy = X, Fx, cx
        else:
            Y = np.asarray(Y, dtype=np.float64)
            Fy, cy = self.features.forward(Y)
        r = np.sqrt(squared_distances(Fx, Fy))
        return r, (X, Y, Fx, Fy, cx, cy, r, self_pair)

    def backward(self, cache, G):
        """Map ``dL/dC`` to ``(d_phi, d_X, d_Y)``.

        Entries whose inputs coincide exactly are the constant 0 and carry no
        gradient. Distinct inputs with coincident features are a hard error.
        """
        X, Y, Fx, Fy, cx, cy, r, self_pair = cache
        zero = r == 0.0
        if np.any(zero):
            same_input = squared_distances(X, Y) == 0.0
            if np.any(zero & ~same_input):
                i, j = np.argwhere(zero & ~same_input)[0]
                raise NonDifferentiableError(
                    f"learned cost is not differentiable: features of distinct inputs ({i}, {j}) coincide"
                )
        with np.errstate(divide="ignore", invalid="ignore"):
            W = np.where(zero, 0.0, G / r)
        dFx = W.sum(axis=1)[:, None] * Fx - W @ Fy
        dFy = W.sum(axis=0)[:, None] * Fy - W.T @ Fx
        if self_pair:
            d_phi, dX = self.features.backward_full(cx, dFx + dFy)
            return d_phi, dX, None
        gx, dX = self.features.backward_full(cx, dFx)
        gy, dY = self.features.backward_full(cy, dFy)
        return gx + gy, dX, dY


def cost_network_matrix(net: CostNetwork, X, Y) -> CostMatrix:
    """Learned-cost matrix ``||f(x_i) - f(y_j)||``."""
    r, _ = net.forward(X, Y)
    return CostMatrix(r, _FEATURE_COST)


def clip_params(net: CostNetwork) -> CostNetwork:
    """Project every parameter onto ``[-clip, clip]``."""
    return net.with_params(np.clip(net.params, -net.clip, net.clip))


def _kmeans_once(X, K, rng, lloyd_steps):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, K):
        d2 = squared_distances(X, np.array(centers)).min(axis=1)
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(X[rng.choice(n, p=probs)])
    centers = np.array(centers)
    for _ in range(lloyd_steps):
        labels = squared_distances(X, centers).argmin(axis=1)
        for k in range(K):
            members = X[labels == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    inertia = squared_distances(X, centers).min(axis=1).sum()
    return centers, inertia


def kmeans_centers(X, K: int, rng: np.random.Generator, lloyd_steps: int = 10, restarts: int = 10) -> np.ndarray:
    """k-means++ seeding plus a fixed number of Lloyd iterations, best of ``restarts`` by inertia."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= K <= n:
        raise InputError(f"need 1 <= K <= {n}, got {K}")
    best, best_inertia = None, np.inf
    for _ in range(max(1, restarts)):
        centers, inertia = _kmeans_once(X, K, rng, lloyd_steps)
        if inertia < best_inertia:
            best, best_inertia = centers, inertia
    return best


def model_to_json(model) -> str:
    """Serialise a model as ``{"kind", "shapes", "params", "meta"}``."""
    if isinstance(model, EllipseModel):
        doc = {"kind": "ellipse", "shapes": [list(model.A.shape), list(model.alpha.shape)], "meta": {}}
    elif isinstance(model, AtomsModel):
        doc = {"kind": "atoms", "shapes": [list(model.locations.shape)], "meta": {}}
    elif isinstance(model, MlpGenerator):
        doc = {"kind": "mlp", "shapes": model.shapes,
               "meta": {**model.meta, "activations": list(model.activations), "latent": model.latent_kind}}
    elif isinstance(model, CostNetwork):
        f = model.features
        doc = {"kind": "cost-network", "shapes": f.shapes,
               "meta": {**f.meta, "activations": list(f.activations), "clip": model.clip}}
    else:
        raise InputError(f"cannot serialise {type(model).__name__}")
    doc["params"] = [float(v) for v in model.params]
    return json.dumps(doc)


def model_from_json(text: str):
    doc = json.loads(text)
    params = np.asarray(doc["params"], dtype=np.float64)
    kind, shapes, meta = doc["kind"], doc["shapes"], doc.get("meta", {})
    if kind == "ellipse":
        (K, d, _), _ = shapes
        return EllipseModel(params[:K * d * d].reshape(K, d, d), params[K * d * d:].reshape(K, d))
    if kind == "atoms":
        return AtomsModel(params.reshape(shapes[0]))
    if kind in ("mlp", "cost-network"):
        weights, biases = [], []
        for k in range(0, len(shapes), 2):
            weights.append(np.zeros(shapes[k]))
            biases.append(np.zeros(shapes[k + 1]))
        rest = {k: v for k, v in meta.items() if k not in ("activations", "latent", "clip")}
        net = MlpGenerator(tuple(weights), tuple(biases), tuple(meta["activations"]),
                           meta.get("latent", "uniform-unit-square"), rest).with_params(params)
        if kind == "cost-network":
            return CostNetwork(net, meta["clip"])
        return net
    raise InputError(f"unknown model kind {kind!r}")

"""Experiment harness: sample complexity, rate fits, positivity scans, ellipse fits.

Every random quantity is drawn from a generator seeded by
``np.random.SeedSequence([master, *indices])`` so a replicate's data depends
only on the master seed and its own indices, never on evaluation order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .divergence import DivergenceSpec, sinkhorn_divergence
from .errors import InputError
from .measures import SQEUCLIDEAN, GroundCost, make_empirical, pca_project
from .models import EllipseModel, kmeans_centers
from .training import TrainConfig, fit

__all__ = [
    "N_GRID",
    "ComplexityRecord",
    "RateFit",
    "PerturbationScan",
    "derived_rng",
    "converged_divergence",
    "sample_complexity_run",
    "estimate_rate",
    "default_t_grid",
    "positivity_scan",
    "positivity_experiment",
    "EllipseResult",
    "occupancy_table",
    "ellipse_experiment",
    "fmt",
    "write_complexity_csv",
    "write_positivity_csv",
    "write_occupancy_csv",
]

N_GRID = (10, 18, 32, 56, 100, 178, 316, 562, 1000)

# Stream tags for derived seeds.
_MU, _NU, _PERTURB, _INIT = 0, 1, 3, 4


def derived_rng(master: int, *indices: int) -> np.random.Generator:
    """Generator for one (replicate, stream) cell, independent of every other cell."""
    return np.random.default_rng(np.random.SeedSequence([int(master), *map(int, indices)]))


def _master_seed(seed) -> int:
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(0, 2 ** 63))
    return int(seed)


def converged_divergence(mu, nu, epsilon: float, cost: GroundCost, tol: float = 1e-9, max_iter: int = 100_000,
                         L: int | None = None, mode: str = "auto"):
    """Divergence with every term solved to marginal error ``tol`` (or ``L`` fixed sweeps if given)."""
    spec = DivergenceSpec(cost=cost, epsilon=epsilon, L=L, mode=mode, tol=tol, max_iter=max_iter)
    return sinkhorn_divergence(mu, nu, spec)


@dataclass(frozen=True)
class ComplexityRecord:
    d: int
    epsilon: float
    p: float
    N: int
    R: float
    S: float
    replicates: int


def _draw(dist, N, d, rng):
    if dist == "uniform":
        return rng.random((N, d))
    if dist == "gaussian":
        return rng.standard_normal((N, d))
    raise InputError(f"unknown base distribution {dist!r}")


def sample_complexity_run(d: int, epsilon: float, p: float, N_list=N_GRID, replicates: int = 100, seed=0,
                          dist: str = "uniform", shared_streams: bool = False, tol: float = 1e-9,
                          max_iter: int = 100_000, L: int | None = None, mode: str = "auto"):
    """Mean ``R`` and standard deviation ``S`` of the divergence between two ``N``-samples.

    ``seed`` is a master integer (or a generator, from which one is drawn).
    ``shared_streams=True`` draws both samples from the same stream, so every
    value is exactly zero.
    """
    if replicates < 2:
        raise InputError("need at least two replicates")
    N_list = [int(N) for N in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])) or N_list[0] < 1:
        raise InputError("N_list must be positive and strictly increasing")
    master = _master_seed(seed)
    cost = GroundCost.power(p)
    records = []
    for N in N_list:
        values = np.empty(replicates)
        for i in range(replicates):
            X = _draw(dist, N, d, derived_rng(master, N, i, _MU))
            Y = _draw(dist, N, d, derived_rng(master, N, i, _MU if shared_streams else _NU))
            values[i] = converged_divergence(make_empirical(X), make_empirical(Y), epsilon, cost, tol, max_iter,
                                             L, mode)
        records.append(ComplexityRecord(d, float(epsilon), float(p), N, float(values.mean()),
                                        float(values.std(ddof=1)), replicates))
    return records


@dataclass(frozen=True)
class RateFit:
    kappa: float
    intercept: float
    residual: float
    N_range: tuple
    points: int


def estimate_rate(records, min_N: int = 10) -> RateFit:
    """Least-squares fit ``log10 R = intercept - kappa log10 N`` over records with ``N >= min_N``."""
    used = [r for r in records if r.N >= min_N]
    if len(used) < 3:
        raise InputError(f"rate fit needs at least 3 points with N >= {min_N}, got {len(used)}")
    for r in used:
        if not r.R > 0:
            raise InputError(f"cannot fit a rate: R = {r.R!r} at N = {r.N} is not positive")
    x = np.log10([r.N for r in used])
    y = np.log10([r.R for r in used])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ np.array([slope, intercept]) - y) ** 2)))
    return RateFit(float(-slope), float(intercept), resid, (used[0].N, used[-1].N), len(used))


@dataclass
class PerturbationScan:
    """Base measure ``(a, x)``, perturbation ``(b, z)`` and divergences along ``t``."""

    a: np.ndarray
    x: np.ndarray
    b: np.ndarray
    z: np.ndarray
    t_grid: np.ndarray
    values: np.ndarray = field(default=None)

    def measure_at(self, t: float):
        return make_empirical(self.x + t * self.z, self.a + t * self.b)


def default_t_grid(t_max: float = 0.2, points: int = 41) -> np.ndarray:
    """``points`` (odd) evenly spaced values on ``[-t_max, t_max]`` with ``t = 0`` exactly at the centre."""
    if points < 1 or points % 2 == 0 or not t_max > 0:
        raise InputError("the t-grid needs an odd number of points and a positive half-width")
    half = (points - 1) // 2
    if half == 0:
        return np.zeros(1)
    return t_max * (np.arange(-half, half + 1) / half)


def _check_grid(t_grid):
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size == 0 or not np.any(t_grid == 0.0):
        raise InputError("t-grid must be a non-empty vector containing 0")
    return t_grid


def positivity_scan(n: int, t_grid=None, epsilon: float = 1.0, p: float = 1.0, rng=None,
                    max_resample: int = 10_000, tol: float = 1e-9, L: int | None = None,
                    mode: str = "auto") -> PerturbationScan:
    """Divergence ``W(mu, mu_t)`` along ``a + t b``, ``x + t z`` for every ``t`` in the grid.

    ``x`` is uniform in the unit square, ``a`` uniform in ``[1/2, 1]`` and
    ``b``, ``z`` standard Gaussian. ``b`` is redrawn until every weight stays
    positive on the grid.
    """
    t_grid = _check_grid(default_t_grid() if t_grid is None else t_grid)
    rng = np.random.default_rng() if rng is None else rng
    x = rng.random((n, 2))
    a = rng.uniform(0.5, 1.0, size=n)
    z = rng.standard_normal((n, 2))
    t_max = float(np.max(np.abs(t_grid)))
    for _ in range(max_resample):
        b = rng.standard_normal(n)
        if t_max * np.max(np.abs(b)) < np.min(a):
            break
    else:
        raise InputError(f"t-grid up to |t| = {t_max} cannot keep the weights positive")
    scan = PerturbationScan(a, x, b, z, t_grid)
    cost = GroundCost.power(p)
    mu = scan.measure_at(0.0)
    scan.values = np.array([converged_divergence(mu, scan.measure_at(t), epsilon, cost, tol, L=L, mode=mode)
                            for t in t_grid])
    return scan


def positivity_experiment(n: int, p: float, epsilon: float = 1.0, realizations: int = 100, seed=0, t_grid=None,
                          L: int | None = None, mode: str = "auto"):
    """Independent scans, realization ``i`` seeded by ``(seed, n, i)``."""
    master = _master_seed(seed)
    return [positivity_scan(n, t_grid, epsilon, p, derived_rng(master, n, i, _PERTURB), L=L, mode=mode)
            for i in range(realizations)]


@dataclass
class EllipseResult:
    model: EllipseModel
    table: list
    trace: object
    projected: np.ndarray
    singular: list


def occupancy_table(model: EllipseModel, points, labels):
    """Rows ``(ellipse, class, count)`` of labelled points inside each ellipse.

    Returns ``(rows, singular)``; a singular ellipse counts as empty.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    rows, singular = [], []
    for k in range(model.K):
        try:
            inside = model.contains(points, k)
        except np.linalg.LinAlgError:
            inside = np.zeros(len(points), dtype=bool)
            singular.append(k)
        for c in classes:
            rows.append((k, int(c), int(np.sum(inside & (labels == c)))))
    return rows, singular


def ellipse_experiment(points, labels, K: int = 3, config: TrainConfig | None = None, dim: int = 3,
                       trace_path=None) -> EllipseResult:
    """PCA-project to ``dim``, fit ``K`` ellipses with squared-Euclidean cost, count class occupancy."""
    if labels is None:
        raise InputError("ellipse experiment needs labelled data")
    if K < 1:
        raise InputError("K must be at least 1")
    config = config or TrainConfig(epsilon=0.1, L=20, m=150, steps=2000, learning_rate=1e-3)
    points = np.asarray(points, dtype=np.float64)
    P = pca_project(points, dim) if points.shape[1] > dim else points
    centers = kmeans_centers(P, K, derived_rng(config.seed, _INIT))
    model, _, trace = fit(EllipseModel.init(centers), make_empirical(P), config, cost=SQEUCLIDEAN,
                          trace_path=trace_path)
    table, singular = occupancy_table(model, P, labels)
    return EllipseResult(model, table, trace, P, singular)


def fmt(value) -> str:
    """17 significant digits; integral values keep a trailing ``.0``."""
    text = f"{float(value):.17g}"
    if all(ch not in text for ch in ".en"):
        text += ".0"
    return text


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_complexity_csv(path, records) -> None:
    _write(path, ["N", "R", "S", "replicates", "d", "epsilon", "p"],
           [[r.N, fmt(r.R), fmt(r.S), r.replicates, r.d, fmt(r.epsilon), fmt(r.p)] for r in records])


def write_positivity_csv(path, scans) -> None:
    _write(path, ["t", "value", "realization"],
           [[fmt(t), fmt(v), i] for i, s in enumerate(scans) for t, v in zip(s.t_grid, s.values)])


def write_occupancy_csv(path, table) -> None:
    _write(path, ["ellipse", "class", "count"], [list(row) for row in table])

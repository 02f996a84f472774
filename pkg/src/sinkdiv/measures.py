"""Discrete measures, ground costs and pairwise cost matrices.

A :class:`DiscreteMeasure` is a weighted point cloud ``sum_i w_i delta_{x_i}``.
Costs are evaluated in float64 throughout.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

__all__ = [
    "DiscreteMeasure",
    "GroundCost",
    "CostMatrix",
    "SQEUCLIDEAN",
    "make_empirical",
    "sample_minibatch",
    "cost_matrix",
    "pca_project",
    "parse_cost",
    "read_point_csv",
    "write_point_csv",
]

_COST_KINDS = ("euclidean-power", "squared-euclidean", "precomputed-feature")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud. Build with :func:`make_empirical`.

    ``points`` has shape (n, d) and ``weights`` shape (n,); weights are
    strictly positive and sum to one.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise InputError(f"points must be a non-empty (n, d) matrix, got shape {points.shape}")
        if weights.shape != (points.shape[0],):
            raise InputError("weights must have one entry per point")
        if not np.all(np.isfinite(points)):
            raise InputError("points contain non-finite coordinates")
        if not np.all(weights > 0):
            raise InputError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise InputError("weights must sum to one")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


@dataclass(frozen=True)
class GroundCost:
    """Ground cost specification.

    ``euclidean-power`` is ``||x - y||**p``, ``squared-euclidean`` is
    ``||x - y||**2`` and ``precomputed-feature`` is the plain Euclidean
    distance between already-extracted feature vectors.
    """

    kind: str = "squared-euclidean"
    p: float = 2.0

    def __post_init__(self):
        if self.kind not in _COST_KINDS:
            raise InputError(f"unknown cost kind {self.kind!r}; expected one of {_COST_KINDS}")
        if self.kind == "squared-euclidean":
            object.__setattr__(self, "p", 2.0)
        elif self.kind == "precomputed-feature":
            object.__setattr__(self, "p", 1.0)
        if not (np.isfinite(self.p) and self.p > 0):
            raise InputError(f"cost exponent must be positive, got {self.p}")

    @classmethod
    def power(cls, p: float) -> "GroundCost":
        return cls("euclidean-power", float(p))

    @property
    def exponent(self) -> float:
        return float(self.p)

    def __str__(self) -> str:
        if self.kind == "squared-euclidean":
            return "sqeuclidean"
        if self.kind == "precomputed-feature":
            return "feature"
        return f"power:{self.p:g}"


SQEUCLIDEAN = GroundCost("squared-euclidean")


def parse_cost(text: str) -> GroundCost:
    """Parse a CLI cost string: ``sqeuclidean`` or ``power:<p>``."""
    text = text.strip().lower()
    if text in ("sqeuclidean", "squared-euclidean", "l2sq"):
        return SQEUCLIDEAN
    if text in ("euclidean", "l2"):
        return GroundCost.power(1.0)
    if text.startswith("power:"):
        try:
            p = float(text.split(":", 1)[1])
        except ValueError:
            raise InputError(f"malformed cost exponent in {text!r}") from None
        return GroundCost.power(p)
    raise InputError(f"unknown cost {text!r}; use sqeuclidean, power:<p> or learned")


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Pairwise costs ``entries[i, j] = c(x_i, y_j)`` plus the cost that made them."""

    entries: np.ndarray
    cost: GroundCost = field(default=SQEUCLIDEAN)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise InputError("cost matrix must be two-dimensional")
        if not np.all(np.isfinite(entries)):
            raise InputError("cost matrix contains non-finite entries")
        if np.any(entries < 0):
            raise InputError("cost matrix entries must be non-negative")
        object.__setattr__(self, "entries", _frozen(entries))

    @property
    def shape(self):
        return self.entries.shape

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def make_empirical(points, weights=None) -> DiscreteMeasure:
    """Build a measure on ``points``; uniform weights unless ``weights`` is given.

    Weights are normalised to sum to one and zero-weight atoms are dropped.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[0] == 0:
        raise InputError("cannot build a measure on an empty point set")
    if not np.all(np.isfinite(points)):
        raise InputError("points contain non-finite coordinates")
    n = points.shape[0]
    if weights is None:
        return DiscreteMeasure(points, np.full(n, 1.0 / n))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise InputError(f"expected {n} weights, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InputError("weights must be finite and non-negative")
    keep = weights > 0
    if not np.any(keep):
        raise InputError("all weights are zero")
    points, w = points[keep], weights[keep]
    w = w / w.sum()
    # atoms tiny enough to vanish under normalisation are dropped too
    keep = w > 0
    points, w = points[keep], w[keep]
    return DiscreteMeasure(points, w / w.sum())


def sample_minibatch(nu: DiscreteMeasure, m: int, rng: np.random.Generator) -> DiscreteMeasure:
    """Draw ``m`` atoms i.i.d. (with replacement) from ``nu``; uniform output weights."""
    if m < 1:
        raise InputError("minibatch size must be at least 1")
    idx = rng.choice(nu.n, size=m, replace=True, p=nu.weights)
    return DiscreteMeasure(nu.points[idx], np.full(m, 1.0 / m))


def _as_points(X, name: str) -> np.ndarray:
    if isinstance(X, DiscreteMeasure):
        return X.points
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputError(f"{name} must be a (n, d) matrix")
    if not np.all(np.isfinite(X)):
        raise InputError(f"{name} contains non-finite coordinates")
    return X


def squared_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    # Explicit differences (not the |x|^2 + |y|^2 - 2xy expansion) keep the
    # diagonal exactly zero and the matrix exactly symmetric when X is Y.
    diff = X[:, None, :] - Y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def cost_matrix(X, Y, cost: GroundCost = SQEUCLIDEAN) -> CostMatrix:
    """Evaluate ``c(x_i, y_j)`` for every pair of rows of ``X`` and ``Y``."""
    X = _as_points(X, "X")
    Y = _as_points(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise InputError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    sq = squared_distances(X, Y)
    if cost.kind == "squared-euclidean":
        entries = sq
    elif cost.p == 1.0:
        entries = np.sqrt(sq)
    else:
        entries = sq ** (0.5 * cost.p)
    return CostMatrix(entries, cost)


def pca_project(X, k: int) -> np.ndarray:
    """Project centred rows of ``X`` on the ``k`` leading principal directions.

    Components come out in order of decreasing variance. Each direction is
    signed so that its largest-magnitude coordinate is positive.
    """
    X = _as_points(X, "X")
    n, d = X.shape
    if n < 2:
        raise InputError("PCA needs at least two points")
    if not 1 <= k <= d:
        raise InputError(f"target dimension must be in [1, {d}], got {k}")
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=True)
    directions = vt[:k]
    pivot = np.argmax(np.abs(directions), axis=1)
    signs = np.sign(directions[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    directions = directions * signs[:, None]
    return Xc @ directions.T


_INT_RE = re.compile(r"^[+-]?\d+$")


def _parse_row(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise InputError(f"line {lineno}: non-numeric value in {','.join(tokens)!r}") from None


def read_point_csv(source, labeled: bool | None = None):
    """Read a point-cloud CSV.

    Returns ``(points, labels)``; ``labels`` is an int array or ``None``.
    A non-numeric first row is treated as a header. With ``labeled=None`` the
    last column is a label only when the header names it ``label`` or
    ``class``; integral coordinates alone never make a column a label.
    """
    if isinstance(source, (str, Path)):
        raw = Path(source).read_text(encoding="utf-8")
    else:
        raw = source.read()
    rows = []
    for lineno, tokens in enumerate(csv.reader(io.StringIO(raw, newline="")), start=1):
        tokens = [t.strip() for t in tokens]
        if not tokens or all(t == "" for t in tokens):
            continue
        rows.append((lineno, tokens))
    if not rows:
        raise InputError("CSV contains no data rows")
    first = rows[0][1]
    header = None
    try:
        [float(t) for t in first]
    except ValueError:
        header = first
        rows = rows[1:]
        if not rows:
            raise InputError("CSV contains a header but no data rows")
    width = len(rows[0][1])
    for lineno, tokens in rows:
        if len(tokens) != width:
            raise InputError(f"line {lineno}: expected {width} columns, got {len(tokens)}")
    if labeled is None:
        labeled = width >= 2 and header is not None and header[-1].lower() in ("label", "class")
    values = np.array([_parse_row(tokens, lineno) for lineno, tokens in rows], dtype=np.float64)
    if labeled:
        if width < 2:
            raise InputError("labeled CSV needs at least one coordinate column")
        for lineno, tokens in rows:
            if not _INT_RE.match(tokens[-1]):
                raise InputError(f"line {lineno}: label {tokens[-1]!r} is not an integer")
        points, labels = values[:, :-1], values[:, -1].astype(int)
    else:
        points, labels = values, None
    if not np.all(np.isfinite(points)):
        bad = int(np.argwhere(~np.isfinite(points))[0, 0])
        raise InputError(f"line {rows[bad][0]}: non-finite coordinate")
    return points, labels


def write_point_csv(path, points, labels=None) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        d = points.shape[1]
        header = [f"x{i}" for i in range(d)] + (["label"] if labels is not None else [])
        writer.writerow(header)
        for i, row in enumerate(points):
            cells = [f"{v:.17g}" for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            writer.writerow(cells)

"""Bundled toy datasets: an eight-Gaussian ring and a synthetic Iris-shaped table."""

from __future__ import annotations

import io
from importlib import resources

import numpy as np

from .measures import read_point_csv

__all__ = ["ring_points", "iris_like", "load_bundled_iris_like", "IRIS_LIKE_SEED"]

IRIS_LIKE_SEED = 20170525

# Per-class feature means and covariances shaped like the classic 4-feature
# flower table (sepal length/width, petal length/width), rounded to 3 places.
_CLASS_MEANS = np.array([
    [5.006, 3.428, 1.462, 0.246],
    [5.936, 2.770, 4.260, 1.326],
    [6.588, 2.974, 5.552, 2.026],
])
_CLASS_COVS = np.array([
    [[0.124, 0.099, 0.016, 0.010],
     [0.099, 0.144, 0.012, 0.009],
     [0.016, 0.012, 0.030, 0.006],
     [0.010, 0.009, 0.006, 0.011]],
    [[0.266, 0.085, 0.183, 0.056],
     [0.085, 0.098, 0.083, 0.041],
     [0.183, 0.083, 0.221, 0.073],
     [0.056, 0.041, 0.073, 0.039]],
    [[0.404, 0.094, 0.303, 0.049],
     [0.094, 0.104, 0.071, 0.048],
     [0.303, 0.071, 0.305, 0.049],
     [0.049, 0.048, 0.049, 0.075]],
])


def ring_points(n: int, rng: np.random.Generator, modes: int = 8, radius: float = 2.0, std: float = 0.05):
    """``n`` draws from an equal mixture of ``modes`` Gaussians evenly spaced on a circle."""
    angles = 2.0 * np.pi * rng.integers(0, modes, size=n) / modes
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    return centers + std * rng.standard_normal((n, 2))


def iris_like(rng: np.random.Generator, per_class: int = 50):
    """Three Gaussian classes of ``per_class`` 4-d points; returns ``(points, labels)`` with labels 1..3."""
    points = np.concatenate([
        _CLASS_MEANS[k] + rng.standard_normal((per_class, 4)) @ np.linalg.cholesky(_CLASS_COVS[k]).T
        for k in range(3)
    ])
    labels = np.repeat(np.arange(1, 4), per_class)
    return points, labels


def load_bundled_iris_like():
    """The shipped ``iris_like.csv`` (generated by :func:`iris_like` with :data:`IRIS_LIKE_SEED`)."""
    text = resources.files("sinkdiv").joinpath("data/iris_like.csv").read_text(encoding="utf-8")
    return read_point_csv(io.StringIO(text), labeled=True)

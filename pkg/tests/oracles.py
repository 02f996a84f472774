"""Independent reference implementations used only by the tests.

The high-precision pipeline re-implements cost matrices, the L-sweep
Sinkhorn recursion and the model forwards on gmpy2 ``mpfr`` numbers with a
113-bit mantissa. Central differences of these functions are free of the
float64 cancellation that would otherwise swamp tiny gradient entries.
"""

from __future__ import annotations

import itertools

import gmpy2
import numpy as np
from gmpy2 import mpfr

PRECISION = 113
_CTX = gmpy2.context(precision=PRECISION)


_MPFR = type(mpfr(0))


def _mp(v):
    return v if isinstance(v, _MPFR) else mpfr(float(v))


def hp_cost_matrix(X, Y, kind="squared-euclidean", p=2.0):
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    with gmpy2.context(_CTX):
        out = []
        expo = mpfr(p) / 2
        for x in X:
            row = []
            for y in Y:
                sq = gmpy2.fsum([(_mp(a) - _mp(b)) ** 2 for a, b in zip(x, y)])
                if kind == "squared-euclidean":
                    row.append(sq)
                elif sq == 0:
                    row.append(mpfr(0))
                else:
                    row.append(sq ** expo)
            out.append(row)
        return out


def hp_sinkhorn_value(C, mu, nu, eps, L):
    """``<C, diag(a) K diag(b)>`` after exactly ``L`` sweeps from ``b = 1``."""
    with gmpy2.context(_CTX):
        m, n = len(C), len(C[0])
        C = [[_mp(c) for c in row] for row in C]
        e = _mp(eps)
        K = [[gmpy2.exp(-c / e) for c in row] for row in C]
        mu = [_mp(w) for w in mu]
        nu = [_mp(w) for w in nu]
        b = [mpfr(1)] * n
        a = [mpfr(1)] * m
        for _ in range(L):
            a = [mu[i] / gmpy2.fsum([K[i][j] * b[j] for j in range(n)]) for i in range(m)]
            b = [nu[j] / gmpy2.fsum([K[i][j] * a[i] for i in range(m)]) for j in range(n)]
        return gmpy2.fsum([C[i][j] * K[i][j] * a[i] * b[j] for i in range(m) for j in range(n)])


def _cost_args(cost):
    return (cost.kind, cost.p)


def hp_divergence(X, Y, cost, eps, L, mu=None, nu=None, include_yy=True):
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    mu = np.full(len(X), 1.0 / len(X)) if mu is None else mu
    nu = np.full(len(Y), 1.0 / len(Y)) if nu is None else nu
    kind, p = _cost_args(cost)
    with gmpy2.context(_CTX):
        xy = hp_sinkhorn_value(hp_cost_matrix(X, Y, kind, p), mu, nu, eps, L)
        xx = hp_sinkhorn_value(hp_cost_matrix(X, X, kind, p), mu, mu, eps, L)
        yy = hp_sinkhorn_value(hp_cost_matrix(Y, Y, kind, p), nu, nu, eps, L) if include_yy else mpfr(0)
        return 2 * xy - xx - yy


def hp_points_cost(Xmp, Y, kind, p):
    """Cost matrix with mpfr rows ``Xmp`` (lists) against float ``Y``."""
    with gmpy2.context(_CTX):
        expo = mpfr(p) / 2
        out = []
        for x in Xmp:
            row = []
            for y in Y:
                sq = gmpy2.fsum([(a - _mp(b)) ** 2 for a, b in zip(x, y)])
                row.append(sq if kind == "squared-euclidean" else (mpfr(0) if sq == 0 else sq ** expo))
            out.append(row)
        return out


def hp_self_cost(Xmp, kind, p):
    with gmpy2.context(_CTX):
        expo = mpfr(p) / 2
        n = len(Xmp)
        out = [[mpfr(0)] * n for _ in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                sq = gmpy2.fsum([(a - b) ** 2 for a, b in zip(Xmp[i], Xmp[j])])
                c = sq if kind == "squared-euclidean" else sq ** expo
                out[i][j] = out[j][i] = c
        return out


def hp_generated_divergence(Xmp, Y, cost, eps, L):
    """``2 W(x, y) - W(x, x)`` for generated mpfr points; the data self-term is constant and omitted."""
    m, n = len(Xmp), len(Y)
    mu = np.full(m, 1.0 / m)
    nu = np.full(n, 1.0 / n)
    kind, p = _cost_args(cost)
    with gmpy2.context(_CTX):
        xy = hp_sinkhorn_value(hp_points_cost(Xmp, Y, kind, p), mu, nu, eps, L)
        xx = hp_sinkhorn_value(hp_self_cost(Xmp, kind, p), mu, mu, eps, L)
        return 2 * xy - xx


def hp_ellipse_forward(theta, K, d, Z, ks):
    with gmpy2.context(_CTX):
        t = [_mp(v) for v in theta]
        A = [[[t[k * d * d + i * d + j] for j in range(d)] for i in range(d)] for k in range(K)]
        alpha = [[t[K * d * d + k * d + i] for i in range(d)] for k in range(K)]
        out = []
        for z, k in zip(Z, ks):
            out.append([gmpy2.fsum([A[k][i][j] * _mp(z[j]) for j in range(d)]) + alpha[k][i] for i in range(d)])
        return out


def hp_mlp_forward(theta, shapes, activations, Z):
    """Dense layers ``h @ W + b`` with weights stored row-major as ``(fan_in, fan_out)``."""
    with gmpy2.context(_CTX):
        t = [_mp(v) for v in theta]
        pos = 0
        layers = []
        for k in range(0, len(shapes), 2):
            fi, fo = shapes[k]
            W = [[t[pos + i * fo + j] for j in range(fo)] for i in range(fi)]
            pos += fi * fo
            b = t[pos:pos + fo]
            pos += fo
            layers.append((W, b))
        out = []
        for z in Z:
            h = [_mp(v) for v in z]
            for (W, b), act in zip(layers, activations):
                pre = [gmpy2.fsum([h[i] * W[i][j] for i in range(len(h))]) + b[j] for j in range(len(b))]
                if act == "relu":
                    h = [v if v > 0 else mpfr(0) for v in pre]
                elif act == "sigmoid":
                    h = [1 / (1 + gmpy2.exp(-v)) for v in pre]
                else:
                    h = pre
            out.append(h)
        return out


def brute_force_ot(C) -> float:
    """``(1/n) min_sigma sum_i C[i, sigma(i)]`` by enumerating every permutation."""
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    best = min(sum(C[i, s[i]] for i in range(n)) for s in itertools.permutations(range(n)))
    return best / n


def reference_adam(theta, grads, lr, beta1=0.9, beta2=0.999, delta=1e-8):
    """Textbook bias-corrected Adam on a scalar, one plain loop."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        theta = theta - lr * mh / (vh ** 0.5 + delta)
        out.append(theta)
    return out

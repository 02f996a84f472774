import gmpy2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_ot

from sinkdiv.errors import InputError, StabilizationRequired, StabilizationWarning
from sinkdiv.measures import GroundCost, cost_matrix
from sinkdiv.sinkhorn import (
    coupling,
    gibbs_kernel,
    log_sinkhorn_scaling,
    marginal_residuals,
    needs_log_domain,
    regularized_cost,
    resolve_mode,
    sinkhorn,
    sinkhorn_converged,
    sinkhorn_scaling,
)


def uniform(n):
    return np.full(n, 1.0 / n)


def random_instance(seed, m=5, n=5, d=2, p=2.0):
    rng = np.random.default_rng(seed)
    X, Y = rng.random((m, d)), rng.random((n, d))
    cost = GroundCost.power(p)
    return cost_matrix(X, Y, cost).entries, uniform(m), uniform(n)


class TestGibbsKernel:
    def test_zero_cost(self):
        np.testing.assert_array_equal(gibbs_kernel(np.zeros((2, 3)), 0.7), np.ones((2, 3)))

    def test_unit_ratio(self):
        K = gibbs_kernel(np.full((1, 1), 0.25), 0.25)
        assert K[0, 0] == pytest.approx(0.3678794, abs=1e-7)

    def test_underflow_warns(self):
        with pytest.warns(StabilizationWarning):
            K = gibbs_kernel(np.array([[800.0, 0.0]]), 1.0)
        assert K[0, 0] == 0.0
        assert needs_log_domain(np.array([[800.0]]), 1.0)

    def test_rejects_epsilon(self):
        with pytest.raises(InputError):
            gibbs_kernel(np.zeros((1, 1)), 0.0)

    @given(st.floats(0.01, 100), st.floats(0.1, 10))
    def test_scale_covariance(self, t, eps):
        C = random_instance(0)[0]
        np.testing.assert_allclose(gibbs_kernel(t * C, t * eps), gibbs_kernel(C, eps), rtol=1e-12)


class TestSinkhornScaling:
    def test_single_atom(self):
        state = sinkhorn_scaling(np.array([[3.0]]), [1.0], [1.0], 0.5, 4)
        assert state.iterations_run == 4
        np.testing.assert_allclose(coupling(state).matrix, [[1.0]], rtol=1e-15)

    def test_symmetric_instance(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        P = coupling(sinkhorn_scaling(C, uniform(2), uniform(2), 0.5, 20)).matrix
        np.testing.assert_allclose(P, P.T, atol=1e-15)
        np.testing.assert_allclose(P.sum(axis=0), [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(P.sum(axis=1), [0.5, 0.5], atol=1e-12)

    def test_matches_high_precision_fixed_point(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        L = 5000
        P = coupling(sinkhorn_scaling(C, uniform(2), uniform(2), 1.0, L)).matrix
        with gmpy2.context(precision=200):
            K = [[gmpy2.exp(-gmpy2.mpfr(c)) for c in row] for row in C]
            half = gmpy2.mpfr(1) / 2
            a, b = [gmpy2.mpfr(1)] * 2, [gmpy2.mpfr(1)] * 2
            for _ in range(L):
                a = [half / (K[i][0] * b[0] + K[i][1] * b[1]) for i in range(2)]
                b = [half / (K[0][j] * a[0] + K[1][j] * a[1]) for j in range(2)]
            ref = np.array([[float(a[i] * K[i][j] * b[j]) for j in range(2)] for i in range(2)])
        np.testing.assert_allclose(P, ref, atol=1e-10)

    def test_general_marginals(self):
        C, _, _ = random_instance(1, 4, 3)
        mu = np.array([0.1, 0.2, 0.3, 0.4])
        nu = np.array([0.5, 0.25, 0.25])
        c = coupling(sinkhorn_scaling(C, mu, nu, 0.5, 500))
        assert c.col_residual <= 1e-15
        assert c.row_residual <= 1e-12

    def test_stabilization_required(self):
        C = np.array([[1000.0, 1000.0], [0.0, 0.0]])
        with pytest.raises(StabilizationRequired):
            sinkhorn_scaling(C, uniform(2), uniform(2), 1.0, 5)

    @pytest.mark.parametrize(
        "mu, nu, eps, L",
        [([0.5, 0.6], [0.5, 0.5], 1.0, 1), ([0.5, 0.5], [1.0], 1.0, 1), ([0.5, 0.5], [0.5, 0.5], -1.0, 1),
         ([0.5, 0.5], [0.5, 0.5], 1.0, 0), ([1.0, 0.0], [0.5, 0.5], 1.0, 1)],
    )
    def test_input_errors(self, mu, nu, eps, L):
        with pytest.raises(InputError):
            sinkhorn_scaling(np.ones((2, 2)), mu, nu, eps, L)

    def test_columns_exact_after_one_sweep(self):
        C, mu, nu = random_instance(2, 6, 4)
        state = sinkhorn_scaling(C, mu, nu, 0.3, 1)
        np.testing.assert_allclose(coupling(state).matrix.sum(axis=0), nu, rtol=1e-14)
        assert abs(coupling(state).matrix.sum() - 1.0) < 1e-8

    def test_product_coupling_at_large_epsilon(self):
        C, mu, nu = random_instance(3, 5, 6)
        P = coupling(sinkhorn_scaling(C, mu, nu, 100 * C.max(), 10)).matrix
        np.testing.assert_allclose(P, np.outer(mu, nu), atol=1e-3)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_monotone_residual(self, seed):
        C, mu, nu = random_instance(seed, 5, 4)
        mu = np.random.default_rng(seed).uniform(0.5, 1, 5)
        mu /= mu.sum()
        residuals = []
        for L in range(1, 101):
            P = coupling(sinkhorn_scaling(C, mu, nu, 0.2, L)).matrix
            residuals.append(np.abs(P.sum(axis=1) - mu).sum())
        assert np.all(np.diff(residuals) <= 1e-15)

    @given(st.floats(0.1, 10), st.floats(0.1, 1000))
    @settings(max_examples=25)
    def test_joint_scaling_same_coupling(self, eps, t):
        C, mu, nu = random_instance(4)
        P1 = coupling(sinkhorn_scaling(C, mu, nu, eps, 30)).matrix
        P2 = coupling(sinkhorn_scaling(t * C, mu, nu, t * eps, 30)).matrix
        np.testing.assert_allclose(P1, P2, rtol=1e-10, atol=1e-300)


class TestLogDomain:
    def test_agrees_with_plain(self):
        C, mu, nu = random_instance(5)
        plain = regularized_cost(sinkhorn_scaling(C, mu, nu, 1.0, 50))
        log = regularized_cost(log_sinkhorn_scaling(C, mu, nu, 1.0, 50))
        assert log == pytest.approx(plain, rel=1e-9)

    @given(st.integers(0, 10_000), st.floats(0.1, 10), st.integers(1, 60))
    @settings(max_examples=40, deadline=None)
    def test_agreement_property(self, seed, eps, L):
        rng = np.random.default_rng(seed)
        C = rng.uniform(0, 10, (4, 6))
        mu, nu = uniform(4), uniform(6)
        a = sinkhorn_scaling(C, mu, nu, eps, L)
        b = log_sinkhorn_scaling(C, mu, nu, eps, L)
        assert regularized_cost(b) == pytest.approx(regularized_cost(a), rel=1e-9)
        np.testing.assert_allclose(b.plan(), a.plan(), rtol=1e-9, atol=1e-300)

    def test_small_epsilon_is_finite(self):
        C, mu, nu = random_instance(6)
        C = 2.0 * C / C.max()
        with pytest.raises(StabilizationRequired):
            sinkhorn_scaling(C, mu, nu, 1e-3, 50)
        state = log_sinkhorn_scaling(C, mu, nu, 1e-3, 50)
        assert np.all(np.isfinite(state.f)) and np.all(np.isfinite(state.g))

    def test_single_atom_potentials(self):
        state = log_sinkhorn_scaling(np.array([[0.0]]), [1.0], [1.0], 0.3, 3)
        assert state.f[0] + state.g[0] == pytest.approx(0.0, abs=1e-15)
        state = log_sinkhorn_scaling(np.array([[2.0]]), [1.0], [1.0], 0.3, 3)
        assert state.f[0] + state.g[0] == pytest.approx(2.0, abs=1e-15)

    def test_mode_resolution(self):
        C = np.array([[0.0, 10.0]])
        assert resolve_mode(C, 0.01) is True
        assert resolve_mode(C, 1.0) is False
        assert resolve_mode(C, 1.0, "on") is True
        assert resolve_mode(C, 0.01, "off") is False
        with pytest.raises(InputError):
            resolve_mode(C, 1.0, "sometimes")

    def test_auto_mode_dispatch(self):
        C, mu, nu = random_instance(7)
        assert sinkhorn(C, mu, nu, 1e-3, 5).log_domain
        assert not sinkhorn(C, mu, nu, 1.0, 5).log_domain


class TestRegularizedCost:
    @pytest.mark.parametrize("eps, L", [(0.01, 1), (1.0, 3), (50.0, 7)])
    def test_diracs(self, eps, L):
        C = cost_matrix([[0.0, 0.0]], [[1.0, 2.0]], GroundCost.power(1.5)).entries
        assert regularized_cost(sinkhorn(C, [1.0], [1.0], eps, L)) == pytest.approx(C[0, 0], rel=1e-15)

    def test_same_dirac(self):
        assert regularized_cost(sinkhorn(np.zeros((1, 1)), [1.0], [1.0], 1.0, 1)) == 0.0

    def test_small_epsilon_near_exact(self):
        C, mu, nu = random_instance(8, 5, 5, p=2.0)
        value = regularized_cost(sinkhorn(C, mu, nu, 1e-3, 10_000))
        exact = brute_force_ot(C)
        assert abs(value - exact) <= 0.01 * exact

    def test_non_negative(self):
        C, mu, nu = random_instance(9)
        assert regularized_cost(sinkhorn(C, mu, nu, 0.5, 10)) >= 0

    def test_mismatched_cost(self):
        C, mu, nu = random_instance(9)
        with pytest.raises(InputError):
            regularized_cost(sinkhorn(C, mu, nu, 0.5, 10), np.zeros((2, 2)))


class TestConverged:
    @pytest.mark.parametrize("eps", [1e-2, 0.1, 1.0, 10.0])
    def test_reaches_tolerance(self, eps):
        C, mu, nu = random_instance(10, 8, 8, p=1.5)
        state = sinkhorn_converged(C, mu, nu, eps, tol=1e-9)
        assert state.converged
        row, col = marginal_residuals(state.plan(), mu, nu)
        assert np.abs(state.plan().sum(axis=1) - mu).sum() < 1e-9
        assert col < 1e-12

    def test_tiny_epsilon_hits_cap_gracefully(self):
        # Near-degenerate instances converge very slowly at eps = 1e-3; the
        # capped state is still a near-feasible plan with a near-optimal cost.
        C, mu, nu = random_instance(10, 8, 8, p=1.5)
        state = sinkhorn_converged(C, mu, nu, 1e-3, tol=1e-9)
        assert state.converged or state.iterations_run == 100_000
        assert state.residual < 1e-4
        exact = brute_force_ot(C)
        assert exact - 1e-6 <= regularized_cost(state) <= 1.01 * exact

    def test_matches_long_fixed_run(self):
        C, mu, nu = random_instance(11, 6, 6)
        state = sinkhorn_converged(C, mu, nu, 0.05, tol=1e-12)
        fixed = log_sinkhorn_scaling(C, mu, nu, 0.05, 5000)
        assert regularized_cost(state) == pytest.approx(regularized_cost(fixed), rel=1e-9)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_feasibility_lower_bound(self, seed):
        C, mu, nu = random_instance(seed, 6, 6, p=1.5)
        state = sinkhorn_converged(C, mu, nu, 0.01)
        assert regularized_cost(state) >= brute_force_ot(C) - 1e-6

    def test_newton_finish_matches_slow_sweeps(self):
        # Pure sweeps need about 9e4 iterations on this instance.
        C, mu, nu = random_instance(13, 10, 10, p=1.5)
        sweeps = sinkhorn_converged(C, mu, nu, 0.01, newton_after=0)
        fast = sinkhorn_converged(C, mu, nu, 0.01)
        assert sweeps.converged and fast.converged
        assert sweeps.iterations_run > 10_000 and fast.iterations_run < 1100
        assert regularized_cost(fast) == pytest.approx(regularized_cost(sweeps), abs=1e-9)
        assert np.abs(fast.plan().sum(axis=0) - nu).sum() < 1e-12

    def test_newton_finish_converges_at_tiny_epsilon(self):
        C, mu, nu = random_instance(0, 10, 10, p=1.5)
        assert not sinkhorn_converged(C, mu, nu, 1e-3, newton_after=0, max_iter=20_000).converged
        state = sinkhorn_converged(C, mu, nu, 1e-3)
        assert state.converged
        assert np.abs(state.plan().sum(axis=1) - mu).sum() < 1e-9
        assert regularized_cost(state) >= brute_force_ot(C) - 1e-6

    def test_iteration_cap(self):
        C, mu, nu = random_instance(12)
        state = sinkhorn_converged(C, mu, nu, 1e-3, tol=1e-30, max_iter=7)
        assert state.iterations_run == 7
        assert not state.converged

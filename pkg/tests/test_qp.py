"""Dual active-set mode solver against analytic cases and a projected-gradient oracle."""

import numpy as np
import pytest
import scipy.sparse as sp

from addcgp.basis import Subdivision
from addcgp.constraints import NONDECREASING, LinearSystem, check, encode
from addcgp.kernels import Kernel1D
from addcgp.posterior import Dataset
from addcgp.qp import InfeasibleError, QpProblem, QpSolution, fit_model, mode_function, solve_mode


# ---------------------------------------------------------------------------
# independent oracle: projected gradient with pool-adjacent-violators projection
# ---------------------------------------------------------------------------
def pava_nondecreasing(y):
    """Euclidean projection onto the nondecreasing cone."""
    blocks = []  # (value, count)
    for v in y:
        blocks.append([float(v), 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            v2, w2 = blocks.pop()
            v1, w1 = blocks.pop()
            blocks.append([(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2])
    return np.concatenate([np.full(w, v) for v, w in blocks])


def projected_gradient_mode(cov, mu, iters=4000):
    """Minimize (c-mu)' cov^{-1} (c-mu) over nondecreasing c by projected gradient."""
    Q = np.linalg.inv(cov)
    step = 1.0 / np.linalg.eigvalsh(Q).max()
    c = pava_nondecreasing(mu)
    for _ in range(iters):
        c = pava_nondecreasing(c - step * (Q @ (c - mu)))
    return c


def objective(cov, mu, c):
    d = c - mu
    return float(d @ np.linalg.solve(cov, d))


def monotone_problem(rng, m, cond_floor=0.5):
    W = rng.normal(size=(m, m))
    cov = W @ W.T
    cov += cond_floor * np.mean(np.diag(cov)) * np.eye(m)
    mu = rng.uniform(-2.0, 2.0, m)
    system = encode(NONDECREASING, Subdivision.equispaced(m))
    return QpProblem(np.linalg.cholesky(cov), mu, system)


class TestSolveMode:
    def test_feasible_mean_returned_unchanged(self):
        rng = np.random.default_rng(0)
        prob = monotone_problem(rng, 5)
        feasible = QpProblem(prob.cov_chol, np.sort(prob.mean), prob.system)
        sol = solve_mode(feasible)
        np.testing.assert_array_equal(sol.x, np.sort(prob.mean))
        assert sol.active == []
        assert sol.objective == 0.0

    def test_halfspace_projection_analytic(self):
        system = LinearSystem(
            sp.csr_matrix(np.array([[-1.0, 1.0]])), np.zeros(1), np.full(1, np.inf)
        )
        prob = QpProblem(np.eye(2), np.array([1.0, 0.0]), system)
        sol = solve_mode(prob)
        np.testing.assert_allclose(sol.x, [0.5, 0.5], atol=1e-12)
        assert [r for r, _ in sol.active] == [0]

    def test_matches_projected_gradient_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            prob = monotone_problem(rng, 8)
            sol = solve_mode(prob)
            cov = prob.cov_chol @ prob.cov_chol.T
            oracle = projected_gradient_mode(cov, prob.mean)
            f_sol = objective(cov, prob.mean, sol.x)
            f_orc = objective(cov, prob.mean, oracle)
            assert f_sol <= f_orc + 1e-6 * max(1.0, abs(f_orc))
            assert abs(f_sol - f_orc) <= 1e-6 * max(1.0, abs(f_orc))
            assert check(prob.system, sol.x, tol=1e-9)

    def test_kkt_residuals(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            prob = monotone_problem(rng, 10)
            sol = solve_mode(prob)
            assert sol.stationarity <= 1e-7 * (1.0 + np.max(np.abs(prob.mean)))
            assert sol.complementarity <= 1e-7
            assert sol.max_violation <= 1e-9
            # lower-bound rows must carry nonnegative multipliers
            for (row, side), lam in zip(sol.active, sol.multipliers):
                assert side == 1
                assert lam >= -1e-12

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(3)
        prob = monotone_problem(rng, 9)
        sol = solve_mode(prob)
        perm = rng.permutation(prob.system.n_rows)
        shuffled = LinearSystem(
            sp.csr_matrix(prob.system.matrix.toarray()[perm]),
            prob.system.lower[perm],
            prob.system.upper[perm],
        )
        sol2 = solve_mode(QpProblem(prob.cov_chol, prob.mean, shuffled))
        np.testing.assert_allclose(sol.x, sol2.x, atol=1e-8)

    def test_constant_vector_always_feasible_for_monotone(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            prob = monotone_problem(rng, int(rng.integers(2, 14)))
            sol = solve_mode(prob)  # must not raise InfeasibleError
            assert check(prob.system, sol.x, tol=1e-9)

    def test_infeasible_system_certificate(self):
        # c_1 >= 1 and c_1 <= 0 cannot hold together
        system = LinearSystem(
            sp.csr_matrix(np.array([[1.0, 0.0], [1.0, 0.0]])),
            np.array([1.0, -np.inf]),
            np.array([np.inf, 0.0]),
        )
        prob = QpProblem(np.eye(2), np.array([0.5, 0.5]), system)
        with pytest.raises(InfeasibleError) as err:
            solve_mode(prob)
        assert "row" in err.value.certificate

    def test_warm_start_agrees_with_cold(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            prob = monotone_problem(rng, 8)
            cold = solve_mode(prob)
            warm = solve_mode(prob, warm_start=cold.x)
            np.testing.assert_allclose(warm.x, cold.x, atol=1e-8)
            warm_perturbed = solve_mode(prob, warm_start=cold.x + 1e-3 * rng.normal(size=8))
            np.testing.assert_allclose(warm_perturbed.x, cold.x, atol=1e-8)

    def test_two_sided_bounds(self):
        system = LinearSystem(
            sp.identity(3, format="csr"), np.zeros(3), np.full(3, 1.0)
        )
        prob = QpProblem(np.eye(3), np.array([-0.5, 0.4, 2.0]), system)
        sol = solve_mode(prob)
        np.testing.assert_allclose(sol.x, [0.0, 0.4, 1.0], atol=1e-12)
        sides = dict(sol.active)
        assert sides[0] == 1 and sides[2] == -1
        signed = {row: lam * side for (row, side), lam in zip(sol.active, sol.multipliers)}
        assert signed[0] >= 0.0 and signed[2] <= 0.0


class TestModeFunction:
    def fit_monotone_state(self, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.uniform(0, 1, (25, 1))
        y = np.tanh(3 * X[:, 0]) + 0.01 * rng.normal(size=25)
        subs = {0: Subdivision.equispaced(8)}
        return fit_model(
            Dataset(X, y), subs, {0: NONDECREASING},
            kernels={0: Kernel1D.matern52(1.0, 0.5)}, tau2=1e-4, estimate=False,
        )

    def test_zero_mode_zero_everywhere(self):
        s = Subdivision.base()
        from addcgp.posterior import ModelState

        state = ModelState(
            active=[0], subdivisions={0: s}, kinds={0: NONDECREASING},
            kernels={0: Kernel1D.matern52()}, tau2=1e-4, mode={0: np.zeros(2)},
        )
        x = np.linspace(0, 1, 11).reshape(-1, 1)
        np.testing.assert_array_equal(mode_function(state, x), np.zeros(11))

    def test_linear_interpolant(self):
        from addcgp.posterior import ModelState

        state = ModelState(
            active=[0], subdivisions={0: Subdivision.base()}, kinds={0: NONDECREASING},
            kernels={0: Kernel1D.matern52()}, tau2=1e-4, mode={0: np.array([0.0, 1.0])},
        )
        assert abs(mode_function(state, np.array([[0.3]]))[0] - 0.3) < 1e-15

    def test_fitted_monotone_grid_check(self):
        result = self.fit_monotone_state()
        grid = np.linspace(0, 1, 101).reshape(-1, 1)
        vals = mode_function(result.state, grid)
        assert np.all(np.diff(vals) >= -1e-9)

    def test_rejects_out_of_range(self):
        result = self.fit_monotone_state()
        with pytest.raises(ValueError):
            mode_function(result.state, np.array([[1.2]]))

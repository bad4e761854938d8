"""Constrained posterior mode via a dual active-set quadratic program.

The mode minimizes the Mahalanobis distance to the posterior mean subject to
the stacked linear inequalities.  Working in whitened coordinates
``z = R^{-1}(c - mu)`` (with ``sigma_c = R R'``) turns the objective into
``||z||^2`` and each inequality into a half-space, so the dual active-set
iteration of Goldfarb and Idnani reduces to projections onto the complement
of the active normals.  The active-set QR factorization is updated
incrementally on adds and drops.

The unconstrained optimum is the posterior mean itself, so the solver starts
there and never needs a feasible point; infeasible systems (possible only
with user-supplied bound constraints) are detected and reported with a
certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from addcgp.constraints import ConstraintKind, LinearSystem, check, encode
from addcgp.posterior import (
    Dataset,
    ModelState,
    TruncatedPosterior,
    build_posterior,
    estimate_hyperparameters,
)

__all__ = [
    "ConvergenceError",
    "FitResult",
    "InfeasibleError",
    "QpProblem",
    "QpSolution",
    "fit_model",
    "mode_function",
    "solve_mode",
]

_FEAS_TOL = 1e-11
_DEP_TOL = 1e-11


class InfeasibleError(RuntimeError):
    """The constraint system has empty interior; carries a Farkas certificate."""

    def __init__(self, message: str, certificate: dict):
        super().__init__(message)
        self.certificate = certificate


class ConvergenceError(RuntimeError):
    """Active-set iteration cap exceeded; carries the residual diagnostics."""

    def __init__(self, message: str, residuals: dict):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class QpProblem:
    """Minimize (c - mean)' sigma_c^{-1} (c - mean) subject to ``system``."""

    cov_chol: np.ndarray
    mean: np.ndarray
    system: LinearSystem

    @classmethod
    def from_posterior(cls, post: TruncatedPosterior) -> "QpProblem":
        return cls(post.cov_cholesky(), post.mean, post.stacked_system())


@dataclass
class QpSolution:
    x: np.ndarray
    active: list
    multipliers: np.ndarray
    iterations: int
    objective: float
    stationarity: float
    max_violation: float
    complementarity: float

    def diagnostics(self) -> dict:
        return {
            "iterations": self.iterations,
            "objective": self.objective,
            "n_active": len(self.active),
            "active_rows": [int(r) for r, _ in self.active],
            "stationarity": self.stationarity,
            "max_violation": self.max_violation,
            "complementarity": self.complementarity,
        }


class _ActiveSetQR:
    """QR factorization of the active normals, updated on add/drop."""

    def __init__(self, m: int):
        self.m = m
        self.Q = np.eye(m)
        self.R = np.zeros((m, 0))

    @property
    def size(self) -> int:
        return self.R.shape[1]

    def project_out(self, v: np.ndarray) -> np.ndarray:
        """Component of ``v`` orthogonal to the active normals."""
        a = self.size
        if a == 0:
            return v.copy()
        q1 = self.Q[:, :a]
        return v - q1 @ (q1.T @ v)

    def least_squares(self, v: np.ndarray) -> np.ndarray:
        """Solve N r = v in the least-squares sense (N has full column rank)."""
        a = self.size
        return sla.solve_triangular(self.R[:a, :a], self.Q[:, :a].T @ v, lower=False)

    def add(self, v: np.ndarray) -> None:
        if self.size == 0:
            self.Q, self.R = sla.qr(v.reshape(self.m, 1), mode="full")
        else:
            self.Q, self.R = sla.qr_insert(self.Q, self.R, v, self.size, which="col")

    def drop(self, k: int) -> None:
        self.Q, self.R = sla.qr_delete(self.Q, self.R, k, which="col")
        if self.R.ndim == 1:
            self.R = self.R.reshape(self.m, 0)


def solve_mode(problem: QpProblem, warm_start: np.ndarray | None = None) -> QpSolution:
    """Dual active-set solve of the mode program.

    ``warm_start`` is a coefficient vector (typically the refined previous
    mode) whose nearly-active rows seed the working set.
    """
    R = problem.cov_chol
    mu = problem.mean
    m = mu.shape[0]
    A_os, b_os = problem.system.one_sided()
    p_rows = A_os.shape[0]

    if p_rows == 0:
        return QpSolution(
            x=mu.copy(), active=[], multipliers=np.zeros(0), iterations=0,
            objective=0.0, stationarity=0.0, max_violation=0.0, complementarity=0.0,
        )

    # whiten and normalize each half-space row
    F = np.asarray(A_os @ R)
    offset = b_os - A_os @ mu
    norms = np.linalg.norm(F, axis=1)
    norms[norms == 0.0] = 1.0
    F = F / norms[:, None]
    offset = offset / norms
    feas_tol = _FEAS_TOL * max(1.0, float(np.max(np.abs(offset[np.isfinite(offset)]), initial=0.0)))

    z = np.zeros(m)
    qr = _ActiveSetQR(m)
    work: list[int] = []  # one-sided row indices, aligned with qr columns
    lam: list[float] = []
    max_iter = 10 * (m + p_rows)
    iterations = 0

    if warm_start is not None:
        z = _seed_active_set(F, offset, warm_start - mu, R, qr, work, lam, feas_tol)

    while True:
        slacks = F @ z - offset
        worst = int(np.argmin(slacks))
        if slacks[worst] >= -feas_tol:
            break
        n_plus = F[worst]
        lam_plus = 0.0
        while True:
            iterations += 1
            if iterations > max_iter:
                raise ConvergenceError(
                    f"active-set iteration cap {max_iter} exceeded",
                    {"max_violation": float(-slacks.min()), "n_active": len(work)},
                )
            d = qr.project_out(n_plus)
            d_norm = float(np.linalg.norm(d))
            r = qr.least_squares(n_plus) if qr.size else np.zeros(0)

            slack_p = float(n_plus @ z - offset[worst])
            t2 = -slack_p / (d_norm * d_norm) if d_norm > _DEP_TOL else np.inf
            t1, drop_k = np.inf, -1
            for k, (lk, rk) in enumerate(zip(lam, r)):
                if rk > _DEP_TOL:
                    ratio = lk / rk
                    if ratio < t1 - 1e-15 or (abs(ratio - t1) <= 1e-15 and (drop_k < 0 or work[k] < work[drop_k])):
                        t1, drop_k = ratio, k
            t = min(t1, t2)
            if not np.isfinite(t):
                raise InfeasibleError(
                    f"constraint row {worst} cannot be satisfied",
                    {"row": int(worst), "farkas": r.tolist(), "active_rows": list(work)},
                )
            if d_norm > _DEP_TOL:
                z = z + t * d
            if qr.size:
                lam = [lk - t * rk for lk, rk in zip(lam, r)]
            lam_plus += t
            if t == t2 and np.isfinite(t2):
                qr.add(n_plus)
                work.append(worst)
                lam.append(lam_plus)
                break
            qr.drop(drop_k)
            work.pop(drop_k)
            lam.pop(drop_k)

    x = mu + R @ z
    return _package_solution(problem, x, z, F, offset, norms, work, lam, iterations, A_os, b_os)


def _seed_active_set(F, offset, delta_c, R, qr, work, lam, feas_tol):
    """Warm start: seed rows active at the previous solution, keep the dual
    feasible subset, and move to the minimum-norm point of that face."""
    z0 = sla.solve_triangular(R, delta_c, lower=True)
    slacks = F @ z0 - offset
    candidates = [int(k) for k in np.where(np.abs(slacks) <= 1e3 * feas_tol)[0]]
    for k in candidates:
        d = qr.project_out(F[k])
        if np.linalg.norm(d) > 1e-8:
            qr.add(F[k])
            work.append(k)
    # drop constraints with negative multipliers until dual feasible
    while work:
        a = qr.size
        z = qr.Q[:, :a] @ sla.solve_triangular(qr.R[:a, :a].T, offset[work], lower=True)
        lam_vec = qr.least_squares(z)
        if np.all(lam_vec >= 0.0):
            lam[:] = list(lam_vec)
            return z
        worst = int(np.argmin(lam_vec))
        qr.drop(worst)
        work.pop(worst)
    lam[:] = []
    return np.zeros(R.shape[0])


def _package_solution(problem, x, z, F, offset, norms, work, lam, iterations, A_os, b_os):
    m = x.shape[0]
    lam_arr = np.asarray(lam, dtype=float)
    # gradient of the Mahalanobis objective, via triangular solves
    grad = sla.solve_triangular(problem.cov_chol.T, z, lower=False)
    if work:
        normals = A_os[work].toarray() if sp.issparse(A_os) else np.asarray(A_os[work])
        lam_orig = lam_arr / norms[work]
        stationarity = float(np.max(np.abs(grad - normals.T @ lam_orig)))
        residual = np.asarray(A_os[work] @ x).ravel() - b_os[work]
        complementarity = float(np.max(np.abs(lam_orig * residual)))
    else:
        lam_orig = lam_arr
        stationarity = float(np.max(np.abs(grad))) if m else 0.0
        complementarity = 0.0
    slacks = F @ z - offset
    half_sides = _sides_of_rows(problem.system, A_os.shape[0])
    active = [(int(_orig_row(problem.system, k)), half_sides[k]) for k in work]
    return QpSolution(
        x=x,
        active=active,
        multipliers=lam_orig,
        iterations=iterations,
        objective=float(z @ z),
        stationarity=stationarity,
        max_violation=float(max(0.0, -slacks.min()) if slacks.size else 0.0),
        complementarity=complementarity,
    )


def _sides_of_rows(system: LinearSystem, total: int) -> list:
    n_lower = int(np.isfinite(system.lower).sum())
    return [1 if k < n_lower else -1 for k in range(total)]


def _orig_row(system: LinearSystem, k: int) -> int:
    lo_rows = np.where(np.isfinite(system.lower))[0]
    up_rows = np.where(np.isfinite(system.upper))[0]
    if k < lo_rows.shape[0]:
        return int(lo_rows[k])
    return int(up_rows[k - lo_rows.shape[0]])


def mode_function(state: ModelState, x) -> np.ndarray:
    """Evaluate the fitted mode at points (additive piecewise-linear form)."""
    return state.predict(x)


@dataclass
class FitResult:
    state: ModelState
    posterior: TruncatedPosterior
    solution: QpSolution


def fit_model(
    ds: Dataset,
    subdivisions: dict,
    kinds: dict,
    kernels: dict | None = None,
    tau2: float | None = None,
    estimate: bool = True,
    restarts: int = 5,
    seed: int = 0,
    warm_start: np.ndarray | None = None,
) -> FitResult:
    """Condition the additive model and solve for its constrained mode.

    When ``estimate`` is true, kernel and noise parameters are first fit by
    maximum likelihood; otherwise ``kernels`` and ``tau2`` must be supplied.
    """
    active = sorted(subdivisions)
    if estimate:
        est = estimate_hyperparameters(ds, subdivisions, active, restarts=restarts, seed=seed)
        kernels, tau2 = est.kernels, est.tau2
    if kernels is None or tau2 is None:
        raise ValueError("kernels and tau2 are required when estimate=False")
    post = build_posterior(ds, subdivisions, active, kernels, tau2, kinds)
    solution = solve_mode(QpProblem.from_posterior(post), warm_start=warm_start)
    mode = {i: solution.x[post.blocks[k]] for k, i in enumerate(active)}
    state = ModelState(
        active=active,
        subdivisions=dict(subdivisions),
        kinds={i: kinds.get(i, ConstraintKind("none")) for i in active},
        kernels=dict(kernels),
        tau2=float(tau2),
        mode=mode,
        dataset=ds,
        ambient_dim=ds.d,
    )
    return FitResult(state=state, posterior=post, solution=solution)

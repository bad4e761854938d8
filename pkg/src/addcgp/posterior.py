"""Conditioning of the finite-dimensional additive GP on regression data.

The process values at the knots of all active dimensions form a Gaussian
vector with block-diagonal prior covariance.  Given noisy observations, the
knot values are again Gaussian with mean ``mu_c`` and covariance ``sigma_c``;
the constraint systems then truncate that law.  Two linear-algebra routes are
provided: a direct n x n factorization, and a low-rank route through the
m x m matrix ``A = tau^2 I + (Psi L)' (Psi L)`` that is cheaper when the
total knot count m is small relative to n.  The same two routes back the
Gaussian marginal likelihood used for hyperparameter estimation.
"""

from __future__ import annotations

import csv as _csv
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from addcgp.basis import Subdivision
from addcgp.constraints import ConstraintKind, LinearSystem, check, encode, stack_systems
from addcgp.kernels import Kernel1D, NumericalError, cholesky_with_jitter, knot_covariance

__all__ = [
    "Dataset",
    "DesignMatrices",
    "HyperparameterEstimate",
    "ModelState",
    "TruncatedPosterior",
    "build_posterior",
    "condition",
    "design",
    "estimate_hyperparameters",
    "fast_inverse_apply",
    "fast_logdet",
    "load_csv",
    "log_marginal_likelihood",
]

#: Noise variances below this fraction of var(y) are clipped up; a zero noise
#: variance would make the observation covariance singular.
TAU2_FLOOR_REL = 1e-10

#: The low-rank route is used when the knot count is at most this fraction of n.
FAST_PATH_RATIO = 0.5

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Dataset:
    """Regression data with inputs in the unit hypercube."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if y.shape[0] < 1:
            raise ValueError("dataset needs at least one observation")
        _validate_unit_range(X)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _validate_unit_range(X: np.ndarray) -> None:
    bad = np.argwhere((X < 0.0) | (X > 1.0))
    if bad.size:
        r, c = bad[0]
        raise ValueError(
            f"input outside [0, 1]: X[{r}, {c}] = {X[r, c]!r}; transform inputs first"
        )


def load_csv(path, response: str) -> Dataset:
    """Load a dataset from a headed CSV file; ``response`` names the y column."""
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if response not in header:
        raise ValueError(f"response column {response!r} not found in {header}")
    data = np.asarray(rows, dtype=float)
    y_col = header.index(response)
    x_cols = [j for j in range(len(header)) if j != y_col]
    return Dataset(data[:, x_cols], data[:, y_col])


@dataclass(frozen=True)
class DesignMatrices:
    """Per-dimension hat-basis evaluations at the data points.

    ``phi[k]`` is the n x m_i matrix for the k-th active dimension; ``psi``
    stacks them column-wise.  Every row of each block has at most two
    nonzeros and sums to one.
    """

    phi: list
    psi: sp.csr_matrix
    blocks: list
    dims: list

    @property
    def n(self) -> int:
        return self.psi.shape[0]

    @property
    def m(self) -> int:
        return self.psi.shape[1]


def design(X: np.ndarray, subdivisions: dict, active: list) -> DesignMatrices:
    """Hat-basis design matrices for the active dimensions.

    ``X`` holds points either in the ambient space (one column per input) or
    already restricted to the active dimensions in their listed order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _validate_unit_range(X)
    cols = _active_columns(X, active)
    phi, blocks, start = [], [], 0
    for k, i in enumerate(active):
        s = subdivisions[i]
        phi_i = sp.csr_matrix(s.basis_matrix(cols[:, k]))
        phi.append(phi_i)
        blocks.append(slice(start, start + s.size))
        start += s.size
    if phi:
        psi = sp.hstack(phi, format="csr")
    else:
        psi = sp.csr_matrix((X.shape[0], 0))
    return DesignMatrices(phi=phi, psi=psi, blocks=blocks, dims=list(active))


def _active_columns(X: np.ndarray, active: list) -> np.ndarray:
    if not active:
        return np.zeros((X.shape[0], 0))
    if X.shape[1] == len(active):
        return X
    if X.shape[1] > max(active):
        return X[:, list(active)]
    raise ValueError(
        f"points have {X.shape[1]} columns; expected {len(active)} (active order) "
        f"or at least {max(active) + 1} (ambient)"
    )


@dataclass(frozen=True)
class TruncatedPosterior:
    """Gaussian law of the knot values given the data, plus its truncation."""

    mean: np.ndarray
    cov: np.ndarray
    systems: list
    blocks: list
    dims: list

    def __post_init__(self) -> None:
        m = self.mean.shape[0]
        if self.cov.shape != (m, m):
            raise ValueError("covariance shape does not match the mean")

    @property
    def m(self) -> int:
        return self.mean.shape[0]

    def stacked_system(self) -> LinearSystem:
        return stack_systems(list(self.systems))

    def cov_cholesky(self) -> np.ndarray:
        return cholesky_with_jitter(self.cov)


class _FastFactor:
    """Shared factorization for the low-rank observation-covariance route."""

    def __init__(self, phi: list, sigma_blocks: list, tau2: float, n: int):
        self.tau2 = float(tau2)
        self.n = n
        self.L_blocks = [
            cholesky_with_jitter(S, scale=float(np.mean(np.diag(S))) if S.size else 1.0)
            for S in sigma_blocks
        ]
        if phi:
            self.P = np.hstack([phi_i @ L_i for phi_i, L_i in zip(phi, self.L_blocks)])
        else:
            self.P = np.zeros((n, 0))
        m = self.P.shape[1]
        A = self.tau2 * np.eye(m) + self.P.T @ self.P
        self.L_tilde = np.linalg.cholesky(A)

    @property
    def m(self) -> int:
        return self.P.shape[1]

    def apply_inverse(self, rhs: np.ndarray) -> np.ndarray:
        """C^{-1} rhs with C = Psi Sigma Psi' + tau^2 I, via the inversion lemma."""
        pt_rhs = self.P.T @ rhs
        inner = cho_solve((self.L_tilde, True), pt_rhs)
        return (rhs - self.P @ inner) / self.tau2

    def logdet(self) -> float:
        """log |C| from the determinant identity |C| = tau^{2(n-m)} |L_tilde|^2."""
        return (self.n - self.m) * np.log(self.tau2) + 2.0 * float(
            np.sum(np.log(np.diag(self.L_tilde)))
        )

    def solve_A(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve((self.L_tilde, True), rhs)


def fast_inverse_apply(psi, sigma_blocks: list, tau2: float, rhs: np.ndarray) -> np.ndarray:
    """Apply the inverse observation covariance to ``rhs`` in O(n m^2 + m^3)."""
    phi, n = _split_psi(psi, sigma_blocks)
    return _FastFactor(phi, sigma_blocks, tau2, n).apply_inverse(np.asarray(rhs, dtype=float))


def fast_logdet(psi, sigma_blocks: list, tau2: float) -> float:
    """log-determinant of the observation covariance in O(n m^2 + m^3)."""
    phi, n = _split_psi(psi, sigma_blocks)
    return _FastFactor(phi, sigma_blocks, tau2, n).logdet()


def _split_psi(psi, sigma_blocks: list):
    """Split a stacked design matrix into per-block slices."""
    n = psi.shape[0]
    sizes = [S.shape[0] for S in sigma_blocks]
    if sum(sizes) != psi.shape[1]:
        raise ValueError("sigma block sizes do not match the design matrix width")
    phi, start = [], 0
    psi = sp.csr_matrix(psi)
    for sz in sizes:
        phi.append(psi[:, start : start + sz])
        start += sz
    return phi, n


def _noise_floor(tau2: float, y: np.ndarray) -> float:
    scale = float(np.var(y))
    if scale == 0.0:
        scale = 1.0
    return max(float(tau2), TAU2_FLOOR_REL * scale)


def condition(
    y: np.ndarray,
    dm: DesignMatrices,
    sigma_blocks: list,
    tau2: float,
    systems: list | None = None,
) -> TruncatedPosterior:
    """Mean and covariance of the knot values given the observations.

    Uses the low-rank route when ``m <= n/2`` and the direct n x n
    factorization otherwise; the two agree to numerical precision.
    """
    y = np.asarray(y, dtype=float).ravel()
    n, m = dm.n, dm.m
    if y.shape[0] != n:
        raise ValueError(f"response length {y.shape[0]} does not match design rows {n}")
    tau2 = _noise_floor(tau2, y)
    if systems is None:
        systems = [
            LinearSystem(sp.csr_matrix((0, b.stop - b.start)), np.zeros(0), np.zeros(0))
            for b in dm.blocks
        ]

    if m == 0:
        return TruncatedPosterior(np.zeros(0), np.zeros((0, 0)), list(systems), [], [])

    if m <= FAST_PATH_RATIO * n:
        factor = _FastFactor(dm.phi, sigma_blocks, tau2, n)
        # push-through identities: mu_c = L A^{-1} P' y, sigma_c = tau^2 L A^{-1} L'
        L_bd = _block_diag_dense(factor.L_blocks, m)
        mean = L_bd @ factor.solve_A(factor.P.T @ y)
        cov = tau2 * (L_bd @ factor.solve_A(L_bd.T))
    else:
        B = np.hstack([phi_i @ S for phi_i, S in zip(dm.phi, sigma_blocks)])
        C = np.asarray(dm.psi @ B.T)
        C[np.diag_indices(n)] += tau2
        Lc = cholesky_with_jitter(C)
        mean = B.T @ cho_solve((Lc, True), y)
        cov = _block_diag_dense(sigma_blocks, m) - B.T @ cho_solve((Lc, True), B)
    cov = 0.5 * (cov + cov.T)
    return TruncatedPosterior(mean, cov, list(systems), list(dm.blocks), list(dm.dims))


def _block_diag_dense(blocks: list, m: int) -> np.ndarray:
    out = np.zeros((m, m))
    start = 0
    for b in blocks:
        sz = b.shape[0]
        out[start : start + sz, start : start + sz] = b
        start += sz
    return out


def log_marginal_likelihood(y: np.ndarray, dm: DesignMatrices, sigma_blocks: list, tau2: float) -> float:
    """Log density of ``y`` under the zero-mean Gaussian observation model."""
    y = np.asarray(y, dtype=float).ravel()
    n, m = dm.n, dm.m
    tau2 = _noise_floor(tau2, y)
    if m <= FAST_PATH_RATIO * n and m > 0:
        factor = _FastFactor(dm.phi, sigma_blocks, tau2, n)
        quad = float(y @ factor.apply_inverse(y))
        ld = factor.logdet()
    elif m == 0:
        quad = float(y @ y) / tau2
        ld = n * np.log(tau2)
    else:
        B = np.hstack([phi_i @ S for phi_i, S in zip(dm.phi, sigma_blocks)])
        C = np.asarray(dm.psi @ B.T)
        C[np.diag_indices(n)] += tau2
        Lc = cholesky_with_jitter(C)
        alpha = cho_solve((Lc, True), y)
        quad = float(y @ alpha)
        ld = 2.0 * float(np.sum(np.log(np.diag(Lc))))
    return -0.5 * quad - 0.5 * ld - 0.5 * n * LOG2PI


@dataclass
class HyperparameterEstimate:
    """Outcome of maximum-likelihood hyperparameter search."""

    kernels: dict
    tau2: float
    log_likelihood: float
    converged: bool


def estimate_hyperparameters(
    ds: Dataset,
    subdivisions: dict,
    active: list,
    family: str = "matern52",
    restarts: int = 5,
    seed: int = 0,
    maxiter: int | None = None,
) -> HyperparameterEstimate:
    """Maximize the marginal likelihood over per-dimension (variance,
    lengthscale) pairs and the noise variance.

    The search is gradient-free (Nelder-Mead on log parameters) with
    ``restarts`` starts: one heuristic start and the rest drawn log-uniformly
    inside the box bounds.
    """
    if not active:
        raise ValueError("cannot estimate hyperparameters with no active dimensions")
    dm = design(ds.X, subdivisions, active)
    var_y = float(np.var(ds.y)) or 1.0
    p = len(active)

    lo = np.concatenate([np.tile([np.log(1e-6 * var_y), np.log(1e-2)], p), [np.log(1e-8 * var_y)]])
    hi = np.concatenate([np.tile([np.log(1e3 * var_y), np.log(1e2)], p), [np.log(var_y)]])

    def unpack(theta: np.ndarray):
        kernels = {
            dim: Kernel1D(family, float(np.exp(theta[2 * k])), float(np.exp(theta[2 * k + 1])))
            for k, dim in enumerate(active)
        }
        return kernels, float(np.exp(theta[-1]))

    def objective(theta: np.ndarray) -> float:
        kernels, tau2 = unpack(np.clip(theta, lo, hi))
        blocks = [knot_covariance(kernels[i], subdivisions[i]) for i in active]
        try:
            return -log_marginal_likelihood(ds.y, dm, blocks, tau2)
        except NumericalError:
            return np.inf

    rng = np.random.default_rng(seed)
    start0 = np.concatenate([np.tile([np.log(var_y / p), 0.0], p), [np.log(1e-2 * var_y)]])
    starts = [np.clip(start0, lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(max(0, restarts - 1))]

    best_x, best_val, any_ok = starts[0], np.inf, False
    for x0 in starts:
        res = minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options={"maxiter": maxiter, "fatol": 1e-7, "xatol": 1e-4},
        )
        any_ok = any_ok or bool(np.isfinite(res.fun))
        # deterministic tie-break: strictly better value, else lexicographically
        # smaller parameter vector
        if res.fun < best_val or (
            res.fun == best_val and tuple(res.x) < tuple(best_x)
        ):
            best_val, best_x = float(res.fun), res.x
    kernels, tau2 = unpack(np.clip(best_x, lo, hi))
    return HyperparameterEstimate(kernels, tau2, -best_val, any_ok)


def build_posterior(
    ds: Dataset,
    subdivisions: dict,
    active: list,
    kernels: dict,
    tau2: float,
    kinds: dict,
) -> TruncatedPosterior:
    """design + prior blocks + condition in one call."""
    dm = design(ds.X, subdivisions, active)
    sigma_blocks = [knot_covariance(kernels[i], subdivisions[i]) for i in active]
    systems = [encode(kinds.get(i, ConstraintKind("none")), subdivisions[i]) for i in active]
    return condition(ds.y, dm, sigma_blocks, tau2, systems)


@dataclass
class ModelState:
    """A fitted additive constrained-GP model.

    ``mode`` holds the constrained posterior mode of the knot values, stored
    per active dimension.  Dimension indices are 0-based throughout.
    """

    active: list
    subdivisions: dict
    kinds: dict
    kernels: dict
    tau2: float
    mode: dict
    dataset: Dataset | None = None
    ambient_dim: int | None = None

    MODE_FEASIBILITY_TOL = 1e-9

    def __post_init__(self) -> None:
        for i in self.active:
            m_i = self.subdivisions[i].size
            if self.mode[i].shape != (m_i,):
                raise ValueError(f"mode block for dimension {i} has wrong length")
            system = encode(self.kinds.get(i, ConstraintKind("none")), self.subdivisions[i])
            if not check(system, self.mode[i], tol=self.MODE_FEASIBILITY_TOL):
                raise ValueError(f"mode block for dimension {i} violates its constraints")

    @property
    def m(self) -> int:
        return sum(self.subdivisions[i].size for i in self.active)

    def mode_vector(self) -> np.ndarray:
        if not self.active:
            return np.zeros(0)
        return np.concatenate([self.mode[i] for i in self.active])

    def predict(self, X) -> np.ndarray:
        """Evaluate the mode function at points in ambient or active layout."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        _validate_unit_range(X)
        cols = _active_columns(X, self.active)
        out = np.zeros(X.shape[0])
        for k, i in enumerate(self.active):
            out += self.subdivisions[i].interpolate(self.mode[i], cols[:, k])
        return out

    def to_json(self) -> str:
        doc = {
            "active": list(self.active),
            "subdivisions": {str(i): self.subdivisions[i].knots.tolist() for i in self.active},
            "constraints": {str(i): self.kinds.get(i, ConstraintKind("none")).to_config() for i in self.active},
            "kernels": {str(i): self.kernels[i].to_dict() for i in self.active},
            "tau2": self.tau2,
            "mode": {str(i): self.mode[i].tolist() for i in self.active},
            "ambient_dim": self.ambient_dim,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelState":
        doc = json.loads(text)
        active = list(doc["active"])
        return cls(
            active=active,
            subdivisions={i: Subdivision(np.asarray(doc["subdivisions"][str(i)])) for i in active},
            kinds={i: ConstraintKind.from_config(doc["constraints"][str(i)]) for i in active},
            kernels={i: Kernel1D.from_dict(doc["kernels"][str(i)]) for i in active},
            tau2=float(doc["tau2"]),
            mode={i: np.asarray(doc["mode"][str(i)], dtype=float) for i in active},
            ambient_dim=doc.get("ambient_dim"),
        )

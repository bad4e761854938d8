"""Componentwise inequality constraints and their knot-level linear systems.

For piecewise-linear interpolants on a subdivision, requiring the functional
constraint (monotonicity, convexity, bounds) everywhere on [0, 1] is
equivalent to a finite set of linear inequalities on the knot values.  Each
constraint kind encodes to a banded system ``l <= Lam @ c <= u``; the
matrices are stored sparse since every row touches at most three knots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from addcgp.basis import Subdivision

__all__ = [
    "BOUNDED",
    "CONCAVE",
    "CONVEX",
    "NONDECREASING",
    "NONINCREASING",
    "UNCONSTRAINED",
    "ConstraintKind",
    "LinearSystem",
    "check",
    "encode",
    "stack_systems",
]

_TAGS = ("none", "nondecreasing", "nonincreasing", "convex", "concave", "bounded")


@dataclass(frozen=True)
class ConstraintKind:
    """One-dimensional shape constraint; ``bounded`` carries its two bounds."""

    tag: str
    lower: float = -np.inf
    upper: float = np.inf

    def __post_init__(self) -> None:
        if self.tag not in _TAGS:
            raise ValueError(f"unknown constraint tag {self.tag!r}; use one of {_TAGS}")
        if self.tag == "bounded" and not self.lower < self.upper:
            raise ValueError(f"bounded constraint needs lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def is_monotone(self) -> bool:
        return self.tag in ("nondecreasing", "nonincreasing")

    def to_config(self):
        if self.tag == "bounded":
            return {"kind": "bounded", "lower": self.lower, "upper": self.upper}
        return self.tag

    @classmethod
    def from_config(cls, spec) -> "ConstraintKind":
        """Parse a per-dimension config entry: a tag string or a bounded record."""
        if isinstance(spec, str):
            return cls(spec)
        return cls("bounded", float(spec["lower"]), float(spec["upper"]))


UNCONSTRAINED = ConstraintKind("none")
NONDECREASING = ConstraintKind("nondecreasing")
NONINCREASING = ConstraintKind("nonincreasing")
CONVEX = ConstraintKind("convex")
CONCAVE = ConstraintKind("concave")


def BOUNDED(lower: float, upper: float) -> ConstraintKind:
    return ConstraintKind("bounded", lower, upper)


@dataclass(frozen=True)
class LinearSystem:
    """Linear inequalities ``lower <= matrix @ c <= upper`` on knot values."""

    matrix: sp.csr_matrix
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        q, _ = self.matrix.shape
        if self.lower.shape != (q,) or self.upper.shape != (q,):
            raise ValueError("bound vectors must match the number of rows")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds must not exceed upper bounds")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    def residuals(self, c: np.ndarray) -> np.ndarray:
        if c.shape != (self.n_cols,):
            raise ValueError(f"expected coefficient vector of length {self.n_cols}, got {c.shape}")
        return self.matrix @ c

    def one_sided(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """Rewrite as ``A @ c >= b`` rows, dropping infinite bounds.

        Lower bounds contribute rows (+Lam_k, l_k); upper bounds contribute
        (-Lam_k, -u_k).
        """
        rows, offsets = [], []
        lo_mask = np.isfinite(self.lower)
        up_mask = np.isfinite(self.upper)
        if lo_mask.any():
            rows.append(self.matrix[lo_mask])
            offsets.append(self.lower[lo_mask])
        if up_mask.any():
            rows.append(-self.matrix[up_mask])
            offsets.append(-self.upper[up_mask])
        if not rows:
            return sp.csr_matrix((0, self.n_cols)), np.zeros(0)
        return sp.vstack(rows, format="csr"), np.concatenate(offsets)


def _difference_matrix(m: int) -> sp.csr_matrix:
    data = np.tile([-1.0, 1.0], m - 1)
    rows = np.repeat(np.arange(m - 1), 2)
    cols = np.concatenate([[j, j + 1] for j in range(m - 1)])
    return sp.csr_matrix((data, (rows, cols)), shape=(m - 1, m))


def _second_difference_matrix(s: Subdivision) -> sp.csr_matrix:
    # slope(j-1, j) >= slope(j-2, j-1), scaled by the right interval width so
    # that equispaced knots give the familiar (1, -2, 1) pattern
    m = s.size
    gaps = np.diff(s.knots)
    data, rows, cols = [], [], []
    for r, j in enumerate(range(2, m)):
        rho = gaps[j - 1] / gaps[j - 2]
        data.extend([rho, -1.0 - rho, 1.0])
        rows.extend([r, r, r])
        cols.extend([j - 2, j - 1, j])
    return sp.csr_matrix((data, (rows, cols)), shape=(m - 2, m))


def encode(kind: ConstraintKind, s: Subdivision) -> LinearSystem:
    """Linear system on the knot values of ``s`` equivalent to ``kind``.

    Satisfying the system is equivalent to the interpolant satisfying the
    functional constraint at every point of [0, 1], not just at the knots.
    """
    m = s.size
    inf = np.inf
    if kind.tag == "none":
        return LinearSystem(sp.csr_matrix((0, m)), np.zeros(0), np.zeros(0))
    if kind.tag == "nondecreasing":
        return LinearSystem(_difference_matrix(m), np.zeros(m - 1), np.full(m - 1, inf))
    if kind.tag == "nonincreasing":
        return LinearSystem(_difference_matrix(m), np.full(m - 1, -inf), np.zeros(m - 1))
    if kind.tag in ("convex", "concave"):
        if m < 3:
            raise ValueError(f"{kind.tag} constraint needs at least 3 knots, got {m}")
        mat = _second_difference_matrix(s)
        if kind.tag == "convex":
            return LinearSystem(mat, np.zeros(m - 2), np.full(m - 2, inf))
        return LinearSystem(mat, np.full(m - 2, -inf), np.zeros(m - 2))
    # bounded: the interpolant attains its extrema at knots, so bounding the
    # knot values bounds the function
    return LinearSystem(sp.identity(m, format="csr"), np.full(m, kind.lower), np.full(m, kind.upper))


def check(system: LinearSystem, c: np.ndarray, tol: float = 0.0) -> bool:
    """True iff ``lower - tol <= Lam @ c <= upper + tol`` componentwise."""
    c = np.asarray(c, dtype=float)
    if system.n_rows == 0:
        if c.shape != (system.n_cols,):
            raise ValueError(f"expected coefficient vector of length {system.n_cols}, got {c.shape}")
        return True
    vals = system.residuals(c)
    return bool(np.all(vals >= system.lower - tol) and np.all(vals <= system.upper + tol))


def stack_systems(systems: list[LinearSystem]) -> LinearSystem:
    """Block-diagonal system over the concatenated coefficient vector."""
    if not systems:
        return LinearSystem(sp.csr_matrix((0, 0)), np.zeros(0), np.zeros(0))
    mat = sp.block_diag([s.matrix for s in systems], format="csr")
    lower = np.concatenate([s.lower for s in systems])
    upper = np.concatenate([s.upper for s in systems])
    return LinearSystem(mat, lower, upper)

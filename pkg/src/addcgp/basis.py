"""One-dimensional knot subdivisions and the piecewise-linear hat basis.

A subdivision is an ordered set of knots in [0, 1] that always contains both
endpoints.  The hat function centered at knot j is 1 there, 0 at the
neighboring knots and piecewise linear in between, so the functions form a
partition of unity on [0, 1] and any vector of knot values defines a unique
piecewise-linear interpolant.  First and second moments of the basis
(integrals of phi_j and phi_j * phi_j' over [0, 1]) have closed forms and the
second-moment matrix is 1-banded; both are precomputed here because they turn
integrated squared differences of interpolants into banded quadratic forms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFAULT_MIN_GAP",
    "HatFunction",
    "MomentTable",
    "Subdivision",
    "hat_eval",
    "moments",
    "refine_coefficients",
]

#: Minimum distance allowed between two knots.  Closer knots produce nearly
#: collinear basis columns and badly conditioned covariance matrices.
DEFAULT_MIN_GAP = 1e-6


@dataclass(frozen=True)
class HatFunction:
    """Piecewise-linear bump with support [u, w] and peak at v."""

    u: float
    v: float
    w: float

    def __post_init__(self) -> None:
        if not (self.u < self.v < self.w):
            raise ValueError(
                f"hat function requires u < v < w, got ({self.u}, {self.v}, {self.w})"
            )

    def __call__(self, t):
        return hat_eval(self, t)


def hat_eval(h: HatFunction, t):
    """Evaluate a hat function at scalar or array argument ``t``.

    Rises linearly from 0 at ``h.u`` to 1 at ``h.v``, falls back to 0 at
    ``h.w``, and is exactly 0 outside [u, w].
    """
    t = np.asarray(t, dtype=float)
    up = (t - h.u) / (h.v - h.u)
    down = (h.w - t) / (h.w - h.v)
    out = np.where(t <= h.v, up, down)
    out = np.where((t < h.u) | (t > h.w), 0.0, out)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class MomentTable:
    """Closed-form basis moments for one subdivision.

    ``first[j]`` is the integral of phi_j over [0, 1].  The second moments
    are 1-banded, so only the diagonal (``second_diag[j]`` = integral of
    phi_j**2) and the superdiagonal (``second_off[j]`` = integral of
    phi_j * phi_{j+1}) are stored.
    """

    first: np.ndarray
    second_diag: np.ndarray
    second_off: np.ndarray

    @property
    def size(self) -> int:
        return self.first.shape[0]

    def dot_first(self, coeffs: np.ndarray) -> float:
        """Integral over [0, 1] of the interpolant with the given knot values."""
        return float(np.dot(self.first, coeffs))

    def quadratic_form(self, coeffs: np.ndarray) -> float:
        """Integral over [0, 1] of the squared interpolant, via the band."""
        c = np.asarray(coeffs, dtype=float)
        val = np.dot(self.second_diag, c * c)
        if c.shape[0] > 1:
            val += 2.0 * np.dot(self.second_off, c[:-1] * c[1:])
        return float(val)

    def dense_second(self) -> np.ndarray:
        """Second-moment band expanded to a dense symmetric matrix (tests)."""
        mat = np.diag(self.second_diag)
        idx = np.arange(self.size - 1)
        mat[idx, idx + 1] = self.second_off
        mat[idx + 1, idx] = self.second_off
        return mat


@dataclass(frozen=True)
class Subdivision:
    """Strictly increasing knots in [0, 1], first knot 0 and last knot 1."""

    knots: np.ndarray
    min_gap: float = DEFAULT_MIN_GAP
    _moments: MomentTable = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if knots.ndim != 1 or knots.shape[0] < 2:
            raise ValueError("subdivision needs at least the two endpoint knots")
        if knots[0] != 0.0 or knots[-1] != 1.0:
            raise ValueError("subdivision must start at 0 and end at 1")
        gaps = np.diff(knots)
        if np.any(gaps <= 0):
            raise ValueError("knots must be strictly increasing")
        if np.any(gaps < self.min_gap):
            raise ValueError(f"knot gap below minimum {self.min_gap}")
        knots.setflags(write=False)
        object.__setattr__(self, "_moments", _compute_moments(knots))

    @property
    def size(self) -> int:
        return self.knots.shape[0]

    def hat(self, j: int) -> HatFunction:
        """Hat function centered at knot ``j`` (0-based).

        Virtual outer knots at -1 and 2 give the endpoint hats full
        triangular shape; only their restriction to [0, 1] is ever used.
        """
        m = self.size
        if not 0 <= j < m:
            raise IndexError(f"knot index {j} out of range for size {m}")
        left = -1.0 if j == 0 else float(self.knots[j - 1])
        right = 2.0 if j == m - 1 else float(self.knots[j + 1])
        return HatFunction(left, float(self.knots[j]), right)

    def basis_matrix(self, x) -> np.ndarray:
        """Evaluate all hats at points ``x``; rows sum to 1 on [0, 1]."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, self.size - 2)
        left = self.knots[idx]
        width = self.knots[idx + 1] - left
        frac = np.clip((x - left) / width, 0.0, 1.0)
        out = np.zeros((x.shape[0], self.size))
        rows = np.arange(x.shape[0])
        out[rows, idx] = 1.0 - frac
        out[rows, idx + 1] += frac
        return out

    def interpolate(self, coeffs: np.ndarray, x):
        """Piecewise-linear interpolant of knot values ``coeffs`` at ``x``."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.size,):
            raise ValueError(f"expected {self.size} coefficients, got {coeffs.shape}")
        return np.interp(x, self.knots, coeffs)

    def moments(self) -> MomentTable:
        return self._moments

    def locate(self, t: float) -> int:
        """Index nu with knots[nu] < t < knots[nu + 1]; rejects near-knot t."""
        t = float(t)
        if not 0.0 < t < 1.0:
            raise ValueError(f"new knot {t} must lie strictly inside (0, 1)")
        if np.min(np.abs(self.knots - t)) < self.min_gap:
            raise ValueError(f"new knot {t} too close to an existing knot")
        return int(np.searchsorted(self.knots, t) - 1)

    def insert(self, t: float) -> "Subdivision":
        """New subdivision with knot ``t`` added."""
        self.locate(t)
        return Subdivision(np.sort(np.append(self.knots, t)), min_gap=self.min_gap)

    def to_json(self) -> str:
        return json.dumps(self.knots.tolist())

    @classmethod
    def from_json(cls, text: str) -> "Subdivision":
        return cls(np.asarray(sorted(json.loads(text)), dtype=float))

    @classmethod
    def base(cls) -> "Subdivision":
        """The minimal subdivision {0, 1}."""
        return cls(np.array([0.0, 1.0]))

    @classmethod
    def equispaced(cls, m: int) -> "Subdivision":
        if m < 2:
            raise ValueError("equispaced subdivision needs m >= 2")
        return cls(np.linspace(0.0, 1.0, m))


def _compute_moments(knots: np.ndarray) -> MomentTable:
    m = knots.shape[0]
    gaps = np.diff(knots)

    first = np.empty(m)
    first[0] = knots[1] / 2.0
    first[-1] = (1.0 - knots[-2]) / 2.0
    if m > 2:
        first[1:-1] = (knots[2:] - knots[:-2]) / 2.0

    diag = np.empty(m)
    diag[0] = gaps[0] / 3.0
    diag[-1] = gaps[-1] / 3.0
    if m > 2:
        diag[1:-1] = (knots[2:] - knots[:-2]) / 3.0

    off = gaps / 6.0
    return MomentTable(first=first, second_diag=diag, second_off=off)


def moments(s: Subdivision) -> MomentTable:
    """First and second moments of the hat basis of ``s`` (closed form)."""
    return s.moments()


def refine_coefficients(s: Subdivision, xi: np.ndarray, t: float) -> np.ndarray:
    """Re-express knot values on ``s`` over the refined subdivision ``s + {t}``.

    The returned vector has one more entry; the inserted value is the linear
    interpolation of its two neighbors, so the piecewise-linear interpolant is
    pointwise unchanged.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (s.size,):
        raise ValueError(f"expected {s.size} coefficients, got {xi.shape}")
    nu = s.locate(t)
    left, right = s.knots[nu], s.knots[nu + 1]
    inserted = xi[nu] * (right - t) / (right - left) + xi[nu + 1] * (t - left) / (right - left)
    return np.concatenate([xi[: nu + 1], [inserted], xi[nu + 1 :]])

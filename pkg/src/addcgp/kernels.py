"""Stationary one-dimensional kernels and their additive composition.

The model covariance is a sum of one-dimensional kernels, one per input
dimension, each with its own variance and lengthscale.  Matern 5/2 is the
default family; the squared exponential is also provided.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from addcgp.basis import Subdivision

__all__ = [
    "AdditiveKernel",
    "Kernel1D",
    "NumericalError",
    "cholesky_with_jitter",
    "kernel_eval",
    "knot_covariance",
]

_FAMILIES = ("matern52", "sqexp")

#: Relative diagonal jitter: base value and escalation ceiling.
JITTER_BASE = 1e-8
JITTER_MAX = 1e-4


class NumericalError(RuntimeError):
    """Linear-algebra failure that survived jitter escalation."""


@dataclass(frozen=True)
class Kernel1D:
    """Stationary kernel on [0, 1] with variance and lengthscale parameters."""

    family: str
    variance: float
    lengthscale: float

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; use one of {_FAMILIES}")
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")

    def __call__(self, x, y):
        return kernel_eval(self, x, y)

    def with_params(self, variance: float, lengthscale: float) -> "Kernel1D":
        return Kernel1D(self.family, variance, lengthscale)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "variance": self.variance,
            "lengthscale": self.lengthscale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Kernel1D":
        return cls(d["family"], float(d["variance"]), float(d["lengthscale"]))

    @classmethod
    def matern52(cls, variance: float = 1.0, lengthscale: float = 1.0) -> "Kernel1D":
        return cls("matern52", variance, lengthscale)

    @classmethod
    def sqexp(cls, variance: float = 1.0, lengthscale: float = 1.0) -> "Kernel1D":
        return cls("sqexp", variance, lengthscale)


def kernel_eval(k: Kernel1D, x, y):
    """Evaluate ``k`` at (broadcastable) scalar or array arguments."""
    r = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    if k.family == "matern52":
        z = math.sqrt(5.0) * r / k.lengthscale
        out = k.variance * (1.0 + z + z * z / 3.0) * np.exp(-z)
    else:
        out = k.variance * np.exp(-(r * r) / (2.0 * k.lengthscale**2))
    if out.ndim == 0:
        return float(out)
    return out


def cross_covariance(k: Kernel1D, x, y) -> np.ndarray:
    """Matrix k(x_a, y_b) for 1-D coordinate arrays ``x`` and ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return kernel_eval(k, x[:, None], y[None, :])


def knot_covariance(k: Kernel1D, s: Subdivision) -> np.ndarray:
    """Covariance matrix of the process values at the knots of ``s``."""
    return cross_covariance(k, s.knots, s.knots)


def cholesky_with_jitter(mat: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Lower Cholesky factor of ``mat``, adding diagonal jitter only on failure.

    The factorization is first attempted exactly so that well-conditioned
    matrices are untouched; on failure a jitter of ``JITTER_BASE * scale``
    (scale defaults to the mean diagonal) is escalated geometrically up to
    ``JITTER_MAX * scale`` before giving up.
    """
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    if scale is None:
        scale = float(np.mean(np.diag(mat))) or 1.0
    jitter = 0.0
    while jitter <= JITTER_MAX * scale * (1.0 + 1e-12):
        try:
            if jitter == 0.0:
                return np.linalg.cholesky(mat)
            return np.linalg.cholesky(mat + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = JITTER_BASE * scale if jitter == 0.0 else jitter * 10.0
    eigvals = np.linalg.eigvalsh(mat)
    raise NumericalError(
        "Cholesky failed after jitter escalation to "
        f"{JITTER_MAX * scale:.3e}; eigenvalue range [{eigvals[0]:.3e}, {eigvals[-1]:.3e}], "
        f"condition {abs(eigvals[-1] / eigvals[0]):.3e}"
    )


@dataclass(frozen=True)
class AdditiveKernel:
    """Sum of one-dimensional kernels, one per input dimension."""

    components: tuple[Kernel1D, ...]

    @property
    def d(self) -> int:
        return len(self.components)

    def __call__(self, x, y):
        """k(x, y) summed over dimensions; inputs are points or point arrays."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if x.shape[1] != self.d or y.shape[1] != self.d:
            raise ValueError(f"expected {self.d}-dimensional points")
        out = np.zeros(np.broadcast_shapes(x.shape[:1], y.shape[:1]))
        for i, ki in enumerate(self.components):
            out = out + kernel_eval(ki, x[:, i], y[:, i])
        return out

    def gram(self, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        """Full cross-covariance matrix between point sets ``x`` and ``y``."""
        x = np.asarray(x, dtype=float)
        y = x if y is None else np.asarray(y, dtype=float)
        out = np.zeros((x.shape[0], y.shape[0]))
        for i, ki in enumerate(self.components):
            out += cross_covariance(ki, x[:, i], y[:, i])
        return out

    def to_json(self) -> str:
        return json.dumps([k.to_dict() for k in self.components])

    @classmethod
    def from_json(cls, text: str) -> "AdditiveKernel":
        return cls(tuple(Kernel1D.from_dict(d) for d in json.loads(text)))

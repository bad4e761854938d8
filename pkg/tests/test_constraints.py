"""Constraint encodings and the knots-to-everywhere equivalence."""

import numpy as np
import pytest

from addcgp.basis import Subdivision, refine_coefficients
from addcgp.constraints import (
    BOUNDED,
    CONCAVE,
    CONVEX,
    NONDECREASING,
    NONINCREASING,
    UNCONSTRAINED,
    ConstraintKind,
    check,
    encode,
    stack_systems,
)


def feasible_vector(rng, kind, s):
    """Draw a coefficient vector satisfying ``kind`` by construction."""
    m = s.size
    if kind.tag == "nondecreasing":
        return np.cumsum(rng.uniform(0.0, 1.0, m)) + rng.normal()
    if kind.tag == "nonincreasing":
        return -np.cumsum(rng.uniform(0.0, 1.0, m)) + rng.normal()
    if kind.tag in ("convex", "concave"):
        slopes = np.sort(rng.uniform(-2.0, 2.0, m - 1))
        if kind.tag == "concave":
            slopes = slopes[::-1]
        return rng.normal() + np.concatenate([[0.0], np.cumsum(slopes * np.diff(s.knots))])
    if kind.tag == "bounded":
        return rng.uniform(kind.lower, kind.upper, m)
    return rng.normal(size=m)


class TestEncode:
    def test_nondecreasing_three_knots(self):
        sys = encode(NONDECREASING, Subdivision(np.array([0.0, 0.5, 1.0])))
        np.testing.assert_array_equal(
            sys.matrix.toarray(), [[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0]]
        )
        np.testing.assert_array_equal(sys.lower, [0.0, 0.0])
        assert np.all(np.isinf(sys.upper))

    def test_convex_equispaced_row(self):
        sys = encode(CONVEX, Subdivision(np.array([0.0, 0.5, 1.0])))
        np.testing.assert_allclose(sys.matrix.toarray(), [[1.0, -2.0, 1.0]])
        np.testing.assert_array_equal(sys.lower, [0.0])
        assert np.isinf(sys.upper[0])

    def test_unconstrained_empty(self):
        sys = encode(UNCONSTRAINED, Subdivision.base())
        assert sys.n_rows == 0
        assert check(sys, np.array([5.0, -3.0]))

    def test_bounded_identity_rows(self):
        sys = encode(BOUNDED(-1.0, 2.0), Subdivision(np.array([0.0, 0.3, 1.0])))
        np.testing.assert_array_equal(sys.matrix.toarray(), np.eye(3))
        np.testing.assert_array_equal(sys.lower, [-1.0, -1.0, -1.0])
        np.testing.assert_array_equal(sys.upper, [2.0, 2.0, 2.0])

    def test_convex_needs_three_knots(self):
        with pytest.raises(ValueError):
            encode(CONVEX, Subdivision.base())

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            ConstraintKind("bounded", 1.0, 1.0)

    def test_config_roundtrip(self):
        for kind in (NONDECREASING, CONVEX, BOUNDED(0.0, 1.0), UNCONSTRAINED):
            assert ConstraintKind.from_config(kind.to_config()) == kind


class TestCheck:
    def test_monotone_pass(self):
        sys = encode(NONDECREASING, Subdivision(np.array([0.0, 0.5, 1.0])))
        assert check(sys, np.array([0.0, 1.0, 2.0]), tol=0.0)

    def test_monotone_fail(self):
        sys = encode(NONDECREASING, Subdivision(np.array([0.0, 0.5, 1.0])))
        assert not check(sys, np.array([0.0, 1.0, 0.5]), tol=0.0)

    def test_convex_pass(self):
        sys = encode(CONVEX, Subdivision(np.array([0.0, 0.5, 1.0])))
        assert check(sys, np.array([1.0, 0.0, 1.0]), tol=0.0)

    def test_dimension_mismatch(self):
        sys = encode(NONDECREASING, Subdivision(np.array([0.0, 0.5, 1.0])))
        with pytest.raises(ValueError):
            check(sys, np.zeros(4))


class TestEverywhereEquivalence:
    KINDS = (NONDECREASING, NONINCREASING, CONVEX, CONCAVE, BOUNDED(-0.5, 3.0))

    def test_feasible_knots_imply_feasible_function(self):
        rng = np.random.default_rng(7)
        grid = np.linspace(0.0, 1.0, 10_001)
        for trial in range(100):
            kind = self.KINDS[trial % len(self.KINDS)]
            m = int(rng.integers(3, 10))
            interior = np.sort(rng.uniform(0.05, 0.95, m - 2))
            s = Subdivision(np.concatenate([[0.0], interior, [1.0]]))
            c = feasible_vector(rng, kind, s)
            sys = encode(kind, s)
            assert check(sys, c, tol=0.0)
            f = s.interpolate(c, grid)
            if kind.tag == "nondecreasing":
                assert np.all(np.diff(f) >= -1e-10)
            elif kind.tag == "nonincreasing":
                assert np.all(np.diff(f) <= 1e-10)
            elif kind.tag in ("convex", "concave"):
                slopes = np.diff(f) / np.diff(grid)
                sign = 1.0 if kind.tag == "convex" else -1.0
                assert np.all(sign * np.diff(slopes) >= -1e-10 * max(1.0, np.abs(slopes).max()))
            else:
                assert np.all(f >= kind.lower - 1e-10) and np.all(f <= kind.upper + 1e-10)

    def test_feasibility_survives_knot_insertion(self):
        rng = np.random.default_rng(8)
        for trial in range(60):
            kind = self.KINDS[trial % len(self.KINDS)]
            s = Subdivision(np.array([0.0, 0.2, 0.55, 1.0]))
            c = feasible_vector(rng, kind, s)
            t = rng.uniform(0.01, 0.99)
            while np.min(np.abs(s.knots - t)) < 1e-3:
                t = rng.uniform(0.01, 0.99)
            refined = s.insert(t)
            c_ref = refine_coefficients(s, c, t)
            assert check(encode(kind, refined), c_ref, tol=1e-12)


class TestStack:
    def test_block_diagonal(self):
        s = Subdivision(np.array([0.0, 0.5, 1.0]))
        stacked = stack_systems([encode(NONDECREASING, s), encode(BOUNDED(0.0, 1.0), s)])
        assert stacked.matrix.shape == (5, 6)
        c = np.array([0.0, 0.5, 1.0, 0.2, 0.2, 0.9])
        assert check(stacked, c, tol=0.0)
        c[5] = 1.5
        assert not check(stacked, c, tol=0.0)

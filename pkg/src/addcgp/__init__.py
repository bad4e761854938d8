"""Additive Gaussian process regression under componentwise inequality constraints."""

from addcgp.basis import HatFunction, MomentTable, Subdivision, hat_eval, moments, refine_coefficients

__version__ = "0.1.0"

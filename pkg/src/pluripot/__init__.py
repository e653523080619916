"""Finite-difference complex Monge-Ampere equations on balls and ellipsoids in C and C^2.

The equation is (omega + dd^c u)^n = mu with a smooth, possibly
sign-indefinite background form omega, measures with point atoms, and
Dirichlet data given by a maximal function.  Solutions are built as
envelopes of subsolutions under an obstacle.
"""
from .envelope import Obstacle, envelope, glue, local_dirichlet
from .expr import Expression
from .fields import GridFunction, HermitianField, MeasureField
from .geometry import BackgroundForm, build_domain, build_rho
from .operators import atom_extract, complex_hessian, ma_density, np_ma, truncate
from .report import DiagnosticsReport
from .solver import HSpec, MeasureSpec, build_H, solve_main

__version__ = "0.1.0"

__all__ = [
    "BackgroundForm", "DiagnosticsReport", "Expression", "GridFunction", "HSpec", "HermitianField",
    "MeasureField", "MeasureSpec", "Obstacle", "atom_extract", "build_H", "build_domain", "build_rho",
    "complex_hessian", "envelope", "glue", "local_dirichlet", "ma_density", "np_ma", "solve_main",
    "truncate",
]

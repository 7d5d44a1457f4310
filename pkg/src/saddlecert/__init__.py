"""Pointwise coderivative calculus, a parameter-identification saddle-point solver and
metric-regularity certificates on uniform grids."""

from .certificates import (CertificateReport, CertifyOptions, certify, empirical_aubin,
                           estimate_bbar, estimate_cG, gamma_sweep, projection_certificate)
from .elliptic import EllipticOperator, solve_state
from .grid import Grid, GridFunction, read_grid_function, write_grid_function
from .pointwise import (AffineCone, ConeField, ConeKind, Empty, FullLine, IndicatorInterval,
                        MoreauYosida, SinglePoint, SquaredTwoNorm, WeightedAbs, cone_field,
                        coderivative, graph_derivative, graph_derivative_convexified,
                        oracle_graph_derivative)
from .projection import ProjectionSpec
from .saddle import SaddlePoint, SaddleProblem, SolverOptions, residual, solve_saddle

__all__ = [
    "AffineCone", "CertificateReport", "CertifyOptions", "ConeField", "ConeKind",
    "EllipticOperator", "Empty", "FullLine", "Grid", "GridFunction", "IndicatorInterval",
    "MoreauYosida", "ProjectionSpec", "SaddlePoint", "SaddleProblem", "SinglePoint",
    "SolverOptions", "SquaredTwoNorm", "WeightedAbs", "certify", "coderivative", "cone_field",
    "empirical_aubin", "estimate_bbar", "estimate_cG", "gamma_sweep", "graph_derivative",
    "graph_derivative_convexified", "oracle_graph_derivative", "projection_certificate",
    "read_grid_function", "residual", "solve_saddle", "solve_state", "write_grid_function",
]

"""Guaranteed a posteriori error bounds for the three-field Biot problem.

Taylor-Hood discretisation (P2 displacement, P1 total pressure, P2 fluid
pressure), vertex-patch equilibration of stress and flux in Raviart-Thomas
spaces, the resulting estimator and an adaptive loop.

>>> from biot_estimate import ManufacturedCase, solve_biot, equilibrate_stress
"""
from .mesh import MeshError, TriangleMesh, build_mesh, lshape_mesh, refine, refine_uniform, \
    unit_square_mesh
from .biot import BiotParameters, BiotSolution, SolverError, SourceData, assemble, solve, \
    solve_biot
from .equilibrate import EquilibrationError, equilibrate_flux, equilibrate_stress
from .estimate import EstimatorBreakdown, ReliabilityConstants, compute_estimators, \
    energy_norm_error, total_bound
from .adapt import AdaptConfig, ConvergenceHistory, mark_dorfler, run_loop
from .bench import IncompressibleCase, LShapedCase, ManufacturedCase, build_overkill

__version__ = "0.1.0"

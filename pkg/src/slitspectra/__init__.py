"""Neumann eigenvalues of a planar domain with a thin slit of width O(eps).

Modules: ``geometry`` (domain and slit profiles), ``meshgen`` (triangle
meshes of the cut and perturbed domains), ``fem`` (P1/P2 assembly and the
eigensolver), ``outer`` (outer expansion coefficients), ``inner`` (tip
harmonic basis and matching), ``composite`` (uniform approximant residuals)
and ``study`` / ``cli`` (the convergence study).
"""

from .geometry import DomainSpec, GeometryError, SlitGeometry
from .inner import InnerBasisFunction, build_Y, check_basis
from .kernels import BACKEND
from .meshgen import Mesh, MeshError, SizeField, mesh_limiting, mesh_perturbed
from .outer import OuterExpansion, outer_expansion, solve_limiting
from .study import StudyConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DomainSpec",
    "GeometryError",
    "InnerBasisFunction",
    "Mesh",
    "MeshError",
    "OuterExpansion",
    "SizeField",
    "SlitGeometry",
    "StudyConfig",
    "build_Y",
    "check_basis",
    "load_config",
    "mesh_limiting",
    "mesh_perturbed",
    "outer_expansion",
    "solve_limiting",
]

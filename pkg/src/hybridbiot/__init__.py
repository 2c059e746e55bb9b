"""Three-field MFE / MHFE poroelasticity with macro-element pressure-jump stabilization.

Modules
-------
grid      structured meshes, macro-elements and boundary tagging
element   Q1 / RT0 / P0 elemental matrices and static condensation
system    global block assembly, stabilization and time stepping
solver    block-triangular preconditioners and right-preconditioned GMRES
spectral  dense eigenvalue diagnostics of the preconditioned operator
bench     benchmark cases and metrics
cli       command-line studies
"""

from .element import CellMaterial, elem_condense, elem_matrices
from .grid import (
    BoundarySets,
    MacroElementSet,
    SideBC,
    StructuredMesh,
    build_macro_elements,
    build_structured_mesh,
    tag_boundary,
)
from .solver import (
    MFEPreconditioner,
    MHFEPreconditioner,
    SolverReport,
    build_preconditioner,
    factor_spd,
    gmres,
    solve_gmres,
)
from .system import MFE, MHFE, BlockSystem, State, advance_timestep, assemble, zero_state

__version__ = "0.1.0"

__all__ = [
    "CellMaterial",
    "elem_matrices",
    "elem_condense",
    "StructuredMesh",
    "MacroElementSet",
    "BoundarySets",
    "SideBC",
    "build_structured_mesh",
    "build_macro_elements",
    "tag_boundary",
    "BlockSystem",
    "State",
    "assemble",
    "advance_timestep",
    "zero_state",
    "MFE",
    "MHFE",
    "factor_spd",
    "gmres",
    "solve_gmres",
    "build_preconditioner",
    "MHFEPreconditioner",
    "MFEPreconditioner",
    "SolverReport",
]

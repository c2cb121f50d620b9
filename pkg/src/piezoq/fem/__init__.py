"""Piezoelectric unit-cell finite elements."""

from .mesh import METAL, PIEZO, Mesh, MeshError, UnitCellSpec, build_mesh
from .model import (
    AssembledSystem,
    ConstrainedSystem,
    ModeSolution,
    SolverError,
    apply_bcs,
    assemble,
    compute_eta,
    dump_mode_csv,
    energy_split,
    select_mode,
    solve_modes,
    solve_unit_cell,
)

__all__ = [
    "METAL", "PIEZO", "Mesh", "MeshError", "UnitCellSpec", "build_mesh",
    "AssembledSystem", "ConstrainedSystem", "ModeSolution", "SolverError",
    "apply_bcs", "assemble", "compute_eta", "dump_mode_csv", "energy_split",
    "select_mode", "solve_modes", "solve_unit_cell",
]

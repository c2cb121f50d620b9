"""Unit-cell geometry and structured quadrilateral meshing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..materials import Material

PIEZO, METAL = 0, 1


class MeshError(ValueError):
    """Unit cell cannot be meshed as requested."""


@dataclass(frozen=True, eq=False)
class UnitCellSpec:
    """Half-wavelength periodic cell: a film of thickness h with two edge electrodes.

    The electrodes are half-strips of width ``coverage * wavelength / 4`` abutting
    the left and right edges, on top of the film, ``metal_thickness`` thick.
    """

    wavelength: float
    film_thickness: float
    metal_thickness: float
    coverage: float
    piezo: Material
    metal: Material
    mesh_nx: int = 32
    mesh_nz_film: int = 8
    mesh_nz_metal: int = 2
    lateral_bc: str = "antiperiodic"

    def __post_init__(self):
        if not (self.wavelength > 0 and self.film_thickness > 0):
            raise ValueError("wavelength and film thickness must be positive")
        if not self.metal_thickness >= 0:
            raise ValueError("metal thickness must be non-negative")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("electrode coverage must lie in [0, 1]")
        if min(self.mesh_nx, self.mesh_nz_film, self.mesh_nz_metal) < 2:
            raise ValueError("mesh counts must be >= 2")
        if self.lateral_bc != "antiperiodic":
            raise ValueError(f"unsupported lateral boundary condition {self.lateral_bc!r}")

    @property
    def width(self) -> float:
        return 0.5 * self.wavelength

    @property
    def has_electrodes(self) -> bool:
        return self.coverage > 0.0

    @property
    def has_metal(self) -> bool:
        return self.has_electrodes and self.metal_thickness > 0.0

    def replace(self, **changes) -> "UnitCellSpec":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return UnitCellSpec(**fields)


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray        # (n, 2) x, z in metres
    elements: np.ndarray     # (ne, 4) counter-clockwise node ids
    region: np.ndarray       # (ne,) PIEZO or METAL
    left: np.ndarray         # node ids at x = 0, paired index-wise with ``right``
    right: np.ndarray
    top: np.ndarray
    bottom: np.ndarray
    electrode: np.ndarray    # film-surface nodes under an electrode
    width: float
    n_metal_columns: int     # per electrode strip

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def piezo_nodes(self) -> np.ndarray:
        return np.unique(self.elements[self.region == PIEZO])

    def element_coords(self) -> np.ndarray:
        return self.nodes[self.elements]


def electrode_columns(spec: UnitCellSpec) -> int:
    """Element columns under each electrode strip."""
    if not spec.has_electrodes:
        return 0
    nx = spec.mesh_nx
    exact = spec.coverage * nx / 2
    if exact < 1.0 - 1e-12:
        raise MeshError(
            f"electrode strip (coverage*lambda/4 = {spec.coverage * spec.wavelength / 4:.3e} m) "
            f"is narrower than one element ({spec.width / nx:.3e} m); "
            f"increase mesh_nx to at least {int(np.ceil(2 / spec.coverage))}")
    m = int(round(exact))
    if spec.coverage < 1.0:
        m = min(m, (nx - 1) // 2)
    elif nx % 2:
        raise MeshError("full electrode coverage needs an even mesh_nx")
    return m


def _x_grid(spec: UnitCellSpec, m: int) -> np.ndarray:
    nx = spec.mesh_nx
    if m == 0:
        return np.linspace(0.0, spec.width, nx + 1)
    strip = spec.coverage * spec.wavelength / 4
    gap_cols = nx - 2 * m
    left = np.linspace(0.0, strip, m + 1)
    if gap_cols == 0:
        return np.concatenate([left, spec.width - left[-2::-1]])
    mid = np.linspace(strip, spec.width - strip, gap_cols + 1)
    return np.concatenate([left[:-1], mid, spec.width - left[-2::-1]])


def build_mesh(spec: UnitCellSpec) -> Mesh:
    nx, nzf, nzm = spec.mesh_nx, spec.mesh_nz_film, spec.mesh_nz_metal
    m = electrode_columns(spec)
    xs = _x_grid(spec, m)
    h = spec.film_thickness
    zf = np.linspace(0.0, h, nzf + 1)

    ids = -np.ones((nzf + 1 + (nzm if spec.has_metal else 0), nx + 1), dtype=np.int64)
    coords = []

    def add(row, col, z):
        ids[row, col] = len(coords)
        coords.append((xs[col], z))

    for j in range(nzf + 1):
        for i in range(nx + 1):
            add(j, i, zf[j])

    metal_node_cols = []
    metal_elem_cols = []
    if m:
        metal_node_cols = sorted(set(range(m + 1)) | set(range(nx - m, nx + 1)))
        metal_elem_cols = list(range(m)) + list(range(nx - m, nx))
    if spec.has_metal:
        zm = np.linspace(h, h + spec.metal_thickness, nzm + 1)
        for j in range(1, nzm + 1):
            for i in metal_node_cols:
                add(nzf + j, i, zm[j])

    elements, region = [], []
    for j in range(nzf):
        for i in range(nx):
            elements.append((ids[j, i], ids[j, i + 1], ids[j + 1, i + 1], ids[j + 1, i]))
            region.append(PIEZO)
    if spec.has_metal:
        for j in range(nzf, nzf + nzm):
            for i in metal_elem_cols:
                elements.append((ids[j, i], ids[j, i + 1], ids[j + 1, i + 1], ids[j + 1, i]))
                region.append(METAL)

    nodes = np.array(coords, dtype=float)
    left = ids[:, 0][ids[:, 0] >= 0]
    right = ids[:, nx][ids[:, nx] >= 0]
    top = np.array([ids[ids[:, i] >= 0, i][-1] for i in range(nx + 1)], dtype=np.int64)
    electrode = np.array([ids[nzf, i] for i in metal_node_cols], dtype=np.int64)
    for arr in (nodes, left, right, top, electrode):
        arr.setflags(write=False)
    return Mesh(
        nodes=nodes,
        elements=np.array(elements, dtype=np.int64),
        region=np.array(region, dtype=np.int64),
        left=left,
        right=right,
        top=top,
        bottom=ids[0].copy(),
        electrode=electrode,
        width=spec.width,
        n_metal_columns=m,
    )

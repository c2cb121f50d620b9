"""Assembly, periodic constraints, modal solve and energy partition."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import kernels
from .mesh import METAL, PIEZO, Mesh, UnitCellSpec, build_mesh


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    kuu: sp.csr_matrix      # (3n, 3n)
    kup: sp.csr_matrix      # (3n, np)
    kpp: sp.csr_matrix      # (np, np), negative definite
    mass: sp.csr_matrix     # (3n, 3n)
    pot_nodes: np.ndarray   # node id of each potential dof
    node_to_pot: np.ndarray  # (n,) potential dof of each node or -1


@dataclass(frozen=True, eq=False)
class ConstrainedSystem:
    mesh: Mesh
    spec: UnitCellSpec
    tu: sp.csr_matrix       # full mechanical dofs <- reduced
    tp: sp.csr_matrix       # full potential dofs <- reduced
    kuu: np.ndarray
    kup: np.ndarray
    kpp: np.ndarray
    mass: np.ndarray
    grounded: np.ndarray    # potential dofs held at 0 V (electrode contact)
    drive: np.ndarray       # +-1/2 V drive pattern on ``grounded``
    kup_e: np.ndarray       # reduced mech x grounded coupling
    kpp_fe: np.ndarray      # reduced pot x grounded
    kpp_ee: np.ndarray
    gauge_pinned: bool = False

    @property
    def n_dofs(self) -> int:
        return self.kuu.shape[0] + self.kpp.shape[0]


@dataclass(frozen=True, eq=False)
class ModeSolution:
    omega: float
    u: np.ndarray           # (n, 3) nodal displacement, M-normalised
    phi: np.ndarray         # (n,) nodal potential, NaN outside the film
    energy_piezo: float
    energy_metal: float
    eta: float
    modal_coupling: float
    polarization: tuple = field(default=(np.nan, np.nan, np.nan))

    @property
    def frequency(self) -> float:
        return self.omega / (2 * np.pi)


def region_tables(spec: UnitCellSpec):
    mats = (spec.piezo, spec.metal)
    stiff = np.stack([m.cE for m in mats])
    piezo = np.stack([m.e for m in mats])
    piezo[METAL] = 0.0
    perm = np.stack([m.epsS for m in mats])
    rho = np.array([m.density for m in mats])
    return stiff, piezo, perm, rho


def assemble(mesh: Mesh, spec: UnitCellSpec, use_numba=None) -> AssembledSystem:
    stiff, piezo, perm, rho = region_tables(spec)
    kuu_e, kup_e, kpp_e, m_e = kernels.element_matrices(
        mesh.element_coords(), mesh.region, stiff, piezo, perm, rho, use_numba=use_numba)

    n = mesh.n_nodes
    pot_nodes = mesh.piezo_nodes()
    node_to_pot = -np.ones(n, dtype=np.int64)
    node_to_pot[pot_nodes] = np.arange(pot_nodes.size)

    conn = mesh.elements
    udofs = (3 * conn[:, :, None] + np.arange(3)).reshape(-1, 12)
    rows = np.repeat(udofs, 12, axis=1).ravel()
    cols = np.tile(udofs, (1, 12)).ravel()
    ndof = 3 * n
    kuu = sp.csr_matrix((kuu_e.ravel(), (rows, cols)), shape=(ndof, ndof))
    mass = sp.csr_matrix((m_e.ravel(), (rows, cols)), shape=(ndof, ndof))

    piezo_el = np.flatnonzero(mesh.region == PIEZO)
    pdofs = node_to_pot[conn[piezo_el]]
    npot = pot_nodes.size
    kup = sp.csr_matrix(
        (kup_e[piezo_el].ravel(),
         (np.repeat(udofs[piezo_el], 4, axis=1).ravel(), np.tile(pdofs, (1, 12)).ravel())),
        shape=(ndof, npot))
    kpp = sp.csr_matrix(
        (kpp_e[piezo_el].ravel(),
         (np.repeat(pdofs, 4, axis=1).ravel(), np.tile(pdofs, (1, 4)).ravel())),
        shape=(npot, npot))
    return AssembledSystem(kuu, kup, kpp, mass, pot_nodes, node_to_pot)


def _tie_matrix(n_full: int, slaves: dict, removed: set) -> sp.csr_matrix:
    """Map reduced dofs to full dofs: masters copy, slaves = -master, removed = 0."""
    col_of = {}
    rows, cols, vals = [], [], []
    for d in range(n_full):
        if d in removed or d in slaves:
            continue
        col_of[d] = len(col_of)
        rows.append(d)
        cols.append(col_of[d])
        vals.append(1.0)
    for d, master in slaves.items():
        if master in removed:
            continue
        rows.append(d)
        cols.append(col_of[master])
        vals.append(-1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_full, len(col_of)))


def _spd_ok(mat: np.ndarray) -> bool:
    if mat.size == 0:
        return True
    try:
        np.linalg.cholesky(mat)
        return True
    except np.linalg.LinAlgError:
        return False


def apply_bcs(system: AssembledSystem, mesh: Mesh, spec: UnitCellSpec) -> ConstrainedSystem:
    """Antiperiodic lateral ties, shorted electrodes; top and bottom stay traction-free."""
    if mesh.left.size != mesh.right.size or not np.allclose(
            mesh.nodes[mesh.left, 1], mesh.nodes[mesh.right, 1]):
        raise SolverError("left and right boundaries do not pair up")

    n = mesh.n_nodes
    mech_slaves = {}
    for a, b in zip(mesh.left, mesh.right):
        for c in range(3):
            mech_slaves[3 * b + c] = 3 * a + c
    tu = _tie_matrix(3 * n, mech_slaves, set())

    p2 = system.node_to_pot
    grounded = np.array(sorted(int(p2[i]) for i in mesh.electrode), dtype=np.int64)
    pot_slaves = {int(p2[b]): int(p2[a]) for a, b in zip(mesh.left, mesh.right)
                  if p2[a] >= 0 and p2[b] >= 0}
    removed = set(grounded.tolist())
    pot_slaves = {s: m for s, m in pot_slaves.items() if s not in removed}
    npot = system.pot_nodes.size
    tp = _tie_matrix(npot, pot_slaves, removed)

    kuu = (tu.T @ system.kuu @ tu).toarray()
    mass = (tu.T @ system.mass @ tu).toarray()
    kup = (tu.T @ system.kup @ tp).toarray()
    kpp = (tp.T @ system.kpp @ tp).toarray()

    pinned = False
    if grounded.size == 0 and not _spd_ok(-kpp):
        # constant-potential null space: pin the first reduced potential dof
        keep = np.arange(1, kpp.shape[0])
        tp = tp[:, keep]
        kup, kpp = kup[:, keep], kpp[np.ix_(keep, keep)]
        pinned = True

    x_mid = 0.5 * mesh.width
    gx = mesh.nodes[system.pot_nodes[grounded], 0] if grounded.size else np.empty(0)
    drive = np.where(gx < x_mid - 1e-12 * mesh.width, 0.5,
                     np.where(gx > x_mid + 1e-12 * mesh.width, -0.5, 0.0))
    kup_e = (tu.T @ system.kup[:, grounded]).toarray() if grounded.size else np.zeros((kuu.shape[0], 0))
    kpp_fe = (tp.T @ system.kpp[:, grounded]).toarray() if grounded.size else np.zeros((kpp.shape[0], 0))
    kpp_ee = system.kpp[grounded][:, grounded].toarray() if grounded.size else np.zeros((0, 0))

    sym = lambda a: 0.5 * (a + a.T)
    return ConstrainedSystem(mesh, spec, tu, tp, sym(kuu), kup, sym(kpp), sym(mass),
                             grounded, drive, kup_e, kpp_fe, kpp_ee, pinned)


def condensed_stiffness(cs: ConstrainedSystem):
    """K* = Kuu - Kup Kpp^-1 Kpu and the Cholesky factor of -Kpp."""
    if cs.kpp.shape[0] == 0:
        return cs.kuu.copy(), None
    try:
        chol = sla.cho_factor(-cs.kpp)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"dielectric block is singular: {exc}") from None
    kstar = cs.kuu + cs.kup @ sla.cho_solve(chol, cs.kup.T)
    return 0.5 * (kstar + kstar.T), chol


def _coupling(cs: ConstrainedSystem, chol, kstar_u: np.ndarray, u: np.ndarray) -> float:
    if cs.grounded.size == 0 or not np.any(cs.drive):
        return 0.0
    v = cs.drive
    if chol is None:
        force = cs.kup_e @ v
        cap = -v @ cs.kpp_ee @ v
    else:
        force = cs.kup_e @ v + cs.kup @ sla.cho_solve(chol, cs.kpp_fe @ v)
        cap = -v @ cs.kpp_ee @ v - (cs.kpp_fe @ v) @ sla.cho_solve(chol, cs.kpp_fe @ v)
    stiff = u @ kstar_u
    if cap <= 0 or stiff <= 0:
        return 0.0
    return float((force @ u) ** 2 / (stiff * cap))


def element_energies(mesh: Mesh, spec: UnitCellSpec, u_nodes: np.ndarray, use_numba=None) -> np.ndarray:
    stiff, _, _, _ = region_tables(spec)
    ue = u_nodes[mesh.elements].reshape(mesh.n_elements, 12)
    return kernels.element_energies(mesh.element_coords(), mesh.region, stiff, ue,
                                    use_numba=use_numba)


def energy_split(mesh: Mesh, spec: UnitCellSpec, u_nodes: np.ndarray, use_numba=None):
    w = element_energies(mesh, spec, u_nodes, use_numba=use_numba)
    return float(w[mesh.region == PIEZO].sum()), float(w[mesh.region == METAL].sum())


def compute_eta(mode: ModeSolution, mesh: Mesh, spec: UnitCellSpec) -> float:
    """Fraction of modal strain energy stored in the piezoelectric film."""
    wp, wm = energy_split(mesh, spec, mode.u)
    return eta_from_energies(wp, wm)


def eta_from_energies(wp: float, wm: float) -> float:
    total = wp + wm
    if not total > 0:
        raise SolverError("mode carries no strain energy")
    return wp / total


def solve_modes(cs: ConstrainedSystem, n_modes: int = 10) -> list[ModeSolution]:
    mesh, spec = cs.mesh, cs.spec
    kstar, chol = condensed_stiffness(cs)
    n = kstar.shape[0]
    n_modes = min(n_modes, n)
    try:
        lam, vec = sla.eigh(kstar, cs.mass, subset_by_index=[0, n_modes - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"generalized eigensolve failed: {exc}") from None

    scale = float(np.max(np.diag(kstar) / np.diag(cs.mass)))
    if lam[0] < -1e-6 * scale:
        raise SolverError(f"negative eigenvalue {lam[0]:.3e} (scale {scale:.3e}); check assembly")

    out = []
    for k in range(n_modes):
        if lam[k] <= 0:
            continue
        u_red = vec[:, k]
        u_full = (cs.tu @ u_red).reshape(-1, 3)
        phi = np.full(mesh.n_nodes, np.nan)
        if chol is not None:
            phi_red = sla.cho_solve(chol, cs.kup.T @ u_red)
            pot_nodes = mesh.piezo_nodes()
            phi[pot_nodes] = cs.tp @ phi_red
        else:
            phi[mesh.piezo_nodes()] = 0.0
        wp, wm = energy_split(mesh, spec, u_full)
        out.append(ModeSolution(
            omega=float(np.sqrt(lam[k])),
            u=u_full,
            phi=phi,
            energy_piezo=wp,
            energy_metal=wm,
            eta=eta_from_energies(wp, wm),
            modal_coupling=_coupling(cs, chol, kstar @ u_red, u_red),
            polarization=_polarization(cs, u_red),
        ))
    return out


def _polarization(cs: ConstrainedSystem, u_red: np.ndarray) -> tuple:
    """Kinetic-energy share of each displacement component."""
    # reduced dofs keep the (x, y, z) interleave of their master nodes
    shares = []
    total = u_red @ cs.mass @ u_red
    for c in range(3):
        masked = np.zeros_like(u_red)
        masked[c::3] = u_red[c::3]
        shares.append(float(masked @ cs.mass @ masked / total))
    return tuple(shares)


def select_mode(modes, window=None, by: str = "coupling") -> ModeSolution:
    """Pick the driven mode inside an optional (f_lo, f_hi) window in Hz.

    ``by="coupling"`` takes the largest modal coupling; ``by`` in {"x", "y", "z"}
    takes modes whose dominant polarisation is that axis. Ties go to the
    lowest frequency.
    """
    modes = list(modes)
    if not modes:
        raise SolverError("no candidate modes")
    if window is not None:
        lo, hi = window
        modes = [m for m in modes if lo <= m.frequency <= hi]
        if not modes:
            raise SolverError(f"no mode inside window [{lo:.6g}, {hi:.6g}] Hz")
    if by == "coupling":
        best = max(m.modal_coupling for m in modes)
        tied = [m for m in modes if m.modal_coupling >= best * (1 - 1e-9)]
    elif by in ("x", "y", "z"):
        axis = "xyz".index(by)
        tied = [m for m in modes if int(np.argmax(m.polarization)) == axis]
        if not tied:
            raise SolverError(f"no {by}-polarised mode among candidates")
    else:
        raise ValueError(f"unknown mode selector {by!r}")
    return min(tied, key=lambda m: m.frequency)


def solve_unit_cell(spec: UnitCellSpec, n_modes: int = 10):
    mesh = build_mesh(spec)
    cs = apply_bcs(assemble(mesh, spec), mesh, spec)
    return mesh, cs, solve_modes(cs, n_modes)


def dump_mode_csv(path, mesh: Mesh, mode: ModeSolution) -> None:
    """Node table for external visualisation."""
    region = np.full(mesh.n_nodes, "metal", dtype=object)
    region[mesh.piezo_nodes()] = "piezo"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "x_m", "z_m", "region", "u_x", "u_y", "u_z", "phi_V"])
        for i, (x, z) in enumerate(mesh.nodes):
            phi = "" if np.isnan(mode.phi[i]) else repr(float(mode.phi[i]))
            w.writerow([i, repr(float(x)), repr(float(z)), region[i],
                        *(repr(float(v)) for v in mode.u[i]), phi])

"""Energy-confinement maps over normalised geometry (h/lambda, t_m/h)."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .fem import UnitCellSpec, select_mode, solve_unit_cell

logger = logging.getLogger(__name__)

DEFAULT_H_OVER_LAMBDA = tuple(np.round(np.linspace(0.01, 0.5, 50), 6))
DEFAULT_TM_OVER_H = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


class EtaMapError(ValueError):
    pass


class OutOfDomainError(EtaMapError):
    pass


@dataclass(frozen=True, eq=False)
class EtaMap:
    h_over_lambda: np.ndarray
    tm_over_h: np.ndarray
    values: np.ndarray          # (len(h_over_lambda), len(tm_over_h)); NaN marks a gap
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        g1 = np.array(self.h_over_lambda, dtype=float)
        g2 = np.array(self.tm_over_h, dtype=float)
        vals = np.array(self.values, dtype=float)
        for name, g in (("h/lambda", g1), ("t_m/h", g2)):
            if g.ndim != 1 or g.size == 0:
                raise EtaMapError(f"{name} grid must be a nonempty 1-D list")
            if not np.all(np.isfinite(g)):
                raise EtaMapError(f"{name} grid has non-finite entries")
            if np.any(np.diff(g) <= 0):
                raise EtaMapError(f"{name} grid must be strictly increasing")
        if vals.shape != (g1.size, g2.size):
            raise EtaMapError(f"values shape {vals.shape} does not match grids ({g1.size}, {g2.size})")
        finite = vals[np.isfinite(vals)]
        if np.any((finite < 0) | (finite > 1)):
            raise EtaMapError("eta values must lie in [0, 1]")
        if np.any(np.isinf(vals)):
            raise EtaMapError("eta values must be finite or NaN gaps")
        for arr in (g1, g2, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "h_over_lambda", g1)
        object.__setattr__(self, "tm_over_h", g2)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    @property
    def gaps(self) -> int:
        return int(np.isnan(self.values).sum())

    def contains(self, hl: float, tmh: float) -> bool:
        return (self.h_over_lambda[0] <= hl <= self.h_over_lambda[-1]
                and self.tm_over_h[0] <= tmh <= self.tm_over_h[-1])

    def equals(self, other: "EtaMap", tol: float = 0.0) -> bool:
        if self.values.shape != other.values.shape or self.metadata != other.metadata:
            return False
        same_gaps = np.array_equal(np.isnan(self.values), np.isnan(other.values))
        return bool(same_gaps
                    and np.allclose(self.h_over_lambda, other.h_over_lambda, rtol=0, atol=tol)
                    and np.allclose(self.tm_over_h, other.tm_over_h, rtol=0, atol=tol)
                    and np.allclose(np.nan_to_num(self.values), np.nan_to_num(other.values),
                                    rtol=0, atol=tol))


@dataclass(frozen=True)
class DeviceGeometry:
    wavelength: float
    film_thickness: float
    metal_thickness: float
    f_s: Optional[float] = None

    def __post_init__(self):
        if not (self.wavelength > 0 and self.film_thickness > 0):
            raise ValueError("wavelength and film thickness must be positive")
        if not self.metal_thickness >= 0:
            raise ValueError("metal thickness must be non-negative")
        if self.f_s is not None and not self.f_s > 0:
            raise ValueError("f_s must be positive")


def device_to_coords(dev: DeviceGeometry) -> tuple[float, float, float]:
    """(h/lambda, t_m/h, t_m/lambda)."""
    return (dev.film_thickness / dev.wavelength,
            dev.metal_thickness / dev.film_thickness,
            dev.metal_thickness / dev.wavelength)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepReport:
    failures: list = field(default_factory=list)   # (h/lambda, t_m/h, message)


def point_spec(base: UnitCellSpec, hl: float, tmh: float) -> UnitCellSpec:
    h = base.film_thickness
    return base.replace(wavelength=h / hl, metal_thickness=tmh * h)


def solve_point(base: UnitCellSpec, hl: float, tmh: float, n_modes: int = 10,
                velocity_window=None, selector: str = "coupling"):
    spec = point_spec(base, hl, tmh)
    _, _, modes = solve_unit_cell(spec, n_modes)
    window = None
    if velocity_window is not None:
        window = (velocity_window[0] / spec.wavelength, velocity_window[1] / spec.wavelength)
    return select_mode(modes, window, by=selector)


def sweep_eta(base: UnitCellSpec, grid1, grid2, *, n_modes: int = 10, velocity_window=None,
              selector: str = "coupling", threads: int = 1, report: SweepReport | None = None) -> EtaMap:
    """Solve every (h/lambda, t_m/h) grid point and collect the selected mode's eta.

    ``velocity_window`` is an optional (v_lo, v_hi) phase-velocity interval in m/s,
    turned into a frequency window per point. Failed points become NaN gaps;
    the sweep only raises when every point fails.
    """
    g1 = [float(v) for v in grid1]
    g2 = [float(v) for v in grid2]
    if not g1 or not g2:
        raise EtaMapError("sweep grids must be nonempty")
    points = [(i, j) for i in range(len(g1)) for j in range(len(g2))]

    def run(ij):
        i, j = ij
        try:
            mode = solve_point(base, g1[i], g2[j], n_modes, velocity_window, selector)
            return mode.eta, None
        except Exception as exc:  # recorded per point, see report
            return math.nan, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, points))
    else:
        results = [run(p) for p in points]

    values = np.full((len(g1), len(g2)), np.nan)
    failures = []
    for (i, j), (eta, err) in zip(points, results):
        values[i, j] = eta
        if err is not None:
            failures.append((g1[i], g2[j], err))
            logger.warning("eta sweep point h/lambda=%g t_m/h=%g failed: %s", g1[i], g2[j], err)
    if report is not None:
        report.failures.extend(failures)
    if len(failures) == len(points):
        raise EtaMapError(f"all {len(points)} sweep points failed; first: {failures[0][2]}")

    metadata = {
        "piezo": base.piezo.name,
        "metal": base.metal.name,
        "coverage": repr(float(base.coverage)),
        "film_thickness_m": repr(float(base.film_thickness)),
        "mesh": f"{base.mesh_nx}x{base.mesh_nz_film}+{base.mesh_nz_metal}",
        "mode_selector": selector,
        "velocity_window_m_s": "none" if velocity_window is None
        else f"{float(velocity_window[0])!r}..{float(velocity_window[1])!r}",
        "n_modes": str(n_modes),
    }
    return EtaMap(np.array(g1), np.array(g2), values, metadata)


# ---------------------------------------------------------------- interpolation

def _bracket(grid: np.ndarray, q: float):
    """Lower index and fractional weight of ``q`` inside ``grid``."""
    if grid.size == 1:
        return 0, 0.0
    k = int(np.searchsorted(grid, q, side="right")) - 1
    k = min(max(k, 0), grid.size - 2)
    t = (q - grid[k]) / (grid[k + 1] - grid[k])
    return k, float(t)


def interp_eta(emap: EtaMap, hl: float, tmh: float, clamp: bool = False) -> float:
    """Bilinear interpolation; outside the grid raises unless ``clamp``."""
    g1, g2 = emap.h_over_lambda, emap.tm_over_h
    if not emap.contains(hl, tmh):
        if not clamp:
            raise OutOfDomainError(
                f"(h/lambda={hl:.6g}, t_m/h={tmh:.6g}) outside map "
                f"[{g1[0]:.6g}, {g1[-1]:.6g}] x [{g2[0]:.6g}, {g2[-1]:.6g}]")
        hl = min(max(hl, g1[0]), g1[-1])
        tmh = min(max(tmh, g2[0]), g2[-1])
    i, s = _bracket(g1, hl)
    j, t = _bracket(g2, tmh)
    total = 0.0
    for di, wi in ((0, 1.0 - s), (1, s)):
        for dj, wj in ((0, 1.0 - t), (1, t)):
            w = wi * wj
            if w == 0.0:
                continue
            v = emap.values[i + di, j + dj]
            if math.isnan(v):
                raise EtaMapError(
                    f"interpolation at (h/lambda={hl:.6g}, t_m/h={tmh:.6g}) touches a missing grid point")
            total += w * v
    return float(min(max(total, 0.0), 1.0))


# ---------------------------------------------------------------- persistence

CSV_HEADER = "h_over_lambda,tm_over_h,eta"


def format_eta_map(emap: EtaMap) -> str:
    lines = [f"# {k}: {v}" for k, v in emap.metadata.items()]
    lines.append(CSV_HEADER)
    for i, hl in enumerate(emap.h_over_lambda):
        for j, tmh in enumerate(emap.tm_over_h):
            v = emap.values[i, j]
            lines.append(f"{float(hl)!r},{float(tmh)!r},{'' if math.isnan(v) else repr(float(v))}")
    return "\n".join(lines) + "\n"


def export_eta_map(emap: EtaMap, path) -> None:
    Path(path).write_text(format_eta_map(emap))


def parse_eta_map(text: str, source: str = "<string>") -> EtaMap:
    metadata = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition(":")
            if not sep:
                raise EtaMapError(f"{source}:{lineno}: metadata line needs 'key: value'")
            metadata[key.strip()] = value.strip()
            continue
        if line.replace(" ", "") == CSV_HEADER:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise EtaMapError(f"{source}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            hl, tmh = float(parts[0]), float(parts[1])
            eta = math.nan if parts[2] == "" else float(parts[2])
        except ValueError as exc:
            raise EtaMapError(f"{source}:{lineno}: {exc}") from None
        rows.append((hl, tmh, eta))
    if not rows:
        raise EtaMapError(f"{source}: no data rows")

    g1 = []
    for hl, _, _ in rows:
        if not g1 or g1[-1] != hl:
            g1.append(hl)
    n2 = len(rows) // len(g1)
    if n2 * len(g1) != len(rows):
        raise EtaMapError(f"{source}: rows do not form a complete grid")
    g2 = [r[1] for r in rows[:n2]]
    for k, (hl, tmh, _) in enumerate(rows):
        if hl != g1[k // n2] or tmh != g2[k % n2]:
            raise EtaMapError(f"{source}: row {k + 1} breaks row-major grid order")
    values = np.array([r[2] for r in rows]).reshape(len(g1), n2)
    try:
        return EtaMap(np.array(g1), np.array(g2), values, metadata)
    except EtaMapError as exc:
        raise EtaMapError(f"{source}: {exc}") from None


def import_eta_map(path) -> EtaMap:
    path = Path(path)
    return parse_eta_map(path.read_text(), str(path))


def constant_map(value: float, h_over_lambda=(0.0, 1.0), tm_over_h=(0.0, 1.0)) -> EtaMap:
    """Uniform map, handy for bounding cases."""
    g1, g2 = np.asarray(h_over_lambda, float), np.asarray(tm_over_h, float)
    return EtaMap(g1, g2, np.full((g1.size, g2.size), float(value)), {"kind": "constant"})

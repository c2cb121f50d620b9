"""Material constants and crystal-cut rotations.

Tensors are stored in Voigt form with engineering shear strains: stiffness
``cE`` (6x6, Pa), piezoelectric stress constants ``e`` (3x6, C/m^2) and clamped
permittivity ``epsS`` (3x3, F/m).

Euler convention
----------------
Angles ``(phi, theta, psi)`` are intrinsic Z-X-Z. The transformation matrix
taking crystal components to device components is::

    A = Rz(psi) @ Rx(theta) @ Rz(phi)

with ``Rz(a) = [[c, s, 0], [-s, c, 0], [0, 0, 1]]`` and
``Rx(b) = [[1, 0, 0], [0, c, s], [0, -s, c]]``. Rows of ``A`` are the device
axes written in crystal coordinates. Device axes: x = propagation, y = aperture
(along the electrode fingers), z = plate normal.

Cut labels ``"<N>-cut YZ<deg>°"`` map to a base triple for the plate normal N
followed by an in-plane rotation ``psi += deg``:

=======  ==================  ======================================
cut      base (deg)          device axes at 0° (x, y, z)
=======  ==================  ======================================
X-cut    (90, 90, 0)         (Y, Z, X)
Y-cut    (180, 90, 90)       (Z, X, Y)
Z-cut    (0, 0, 0)           (X, Y, Z)
=======  ==================  ======================================

So ``"X-cut YZ30°"`` is ``(90°, 90°, 30°)``: propagation 30° from crystal Y
toward crystal Z, plate normal along crystal X.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPS0 = 8.8541878128e-12

VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))

DATA_DIR = Path(__file__).parent / "data"


class MaterialError(ValueError):
    """Malformed material file or violated material invariant."""


@dataclass(frozen=True)
class EulerAngles:
    """Intrinsic Z-X-Z Euler angles in radians."""

    phi: float
    theta: float
    psi: float

    def __post_init__(self):
        if not all(math.isfinite(a) for a in (self.phi, self.theta, self.psi)):
            raise ValueError("Euler angles must be finite")

    @classmethod
    def from_degrees(cls, phi: float, theta: float, psi: float) -> "EulerAngles":
        return cls(math.radians(phi), math.radians(theta), math.radians(psi))

    def matrix(self) -> np.ndarray:
        return rz(self.psi) @ rx(self.theta) @ rz(self.phi)

    def inverse(self) -> "EulerAngles":
        return EulerAngles(-self.psi, -self.theta, -self.phi)


def rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def rx(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


@dataclass(frozen=True, eq=False)
class Material:
    name: str
    kind: str  # "piezoelectric" | "metal"
    density: float
    cE: np.ndarray
    e: np.ndarray
    epsS: np.ndarray

    def __post_init__(self):
        for attr, shape in (("cE", (6, 6)), ("e", (3, 6)), ("epsS", (3, 3))):
            arr = np.array(getattr(self, attr), dtype=float)
            if arr.shape != shape:
                raise MaterialError(f"{self.name}: {attr} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        validate(self)

    @property
    def is_metal(self) -> bool:
        return self.kind == "metal"


def _check_spd(name: str, label: str, mat: np.ndarray) -> None:
    scale = np.abs(mat).max()
    if not scale > 0:
        raise MaterialError(f"{name}: {label} is zero")
    if np.abs(mat - mat.T).max() > 1e-9 * scale:
        raise MaterialError(f"{name}: {label} is not symmetric")
    try:
        np.linalg.cholesky(mat / scale)
    except np.linalg.LinAlgError:
        raise MaterialError(f"{name}: {label} is not positive definite") from None


def validate(m: Material) -> None:
    if m.kind not in ("piezoelectric", "metal"):
        raise MaterialError(f"{m.name}: class must be 'piezoelectric' or 'metal', got {m.kind!r}")
    if not (math.isfinite(m.density) and m.density > 0):
        raise MaterialError(f"{m.name}: density must be positive, got {m.density}")
    for label, arr in (("cE", m.cE), ("e", m.e), ("epsS", m.epsS)):
        if not np.all(np.isfinite(arr)):
            raise MaterialError(f"{m.name}: {label} contains non-finite values")
    _check_spd(m.name, "stiffness cE", m.cE)
    _check_spd(m.name, "permittivity epsS", m.epsS)
    if m.is_metal and np.any(m.e != 0.0):
        raise MaterialError(f"{m.name}: metal must have zero piezoelectric matrix")


def isotropic_stiffness(lame_lambda: float, mu: float) -> np.ndarray:
    c = np.zeros((6, 6))
    c[:3, :3] = lame_lambda
    c[np.arange(3), np.arange(3)] = lame_lambda + 2 * mu
    c[np.arange(3, 6), np.arange(3, 6)] = mu
    return c


def isotropic_material(name: str, lame_lambda: float, mu: float, density: float,
                       kind: str = "piezoelectric") -> Material:
    """Non-piezoelectric isotropic solid (vacuum permittivity)."""
    return Material(name, kind, density, isotropic_stiffness(lame_lambda, mu),
                    np.zeros((3, 6)), EPS0 * np.eye(3))


# ---------------------------------------------------------------- file I/O

_KEYS = {"name": 1, "class": 1, "density_kg_m3": 1, "cE_GPa": 36, "e_C_m2": 18, "epsS_relative": 9}


def parse_material_text(text: str, source: str = "<string>") -> Material:
    fields: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line or ":" in line.split()[0]:
            sep = "=" if "=" in line else ":"
            key, _, value = line.partition(sep)
            key = key.strip()
            if key not in _KEYS:
                raise MaterialError(f"{source}:{lineno}: unknown key {key!r}")
            if key in fields:
                raise MaterialError(f"{source}:{lineno}: duplicate key {key!r}")
            fields[key] = value.replace(",", " ").split()
            current = key
        elif current is not None:
            fields[current].extend(line.replace(",", " ").split())
        else:
            raise MaterialError(f"{source}:{lineno}: value without key")

    missing = [k for k in _KEYS if k not in fields]
    if missing:
        raise MaterialError(f"{source}: missing keys {missing}")
    for key, count in _KEYS.items():
        if len(fields[key]) != count:
            raise MaterialError(f"{source}: {key} expects {count} value(s), got {len(fields[key])}")

    def numbers(key):
        try:
            return np.array([float(v) for v in fields[key]])
        except ValueError as exc:
            raise MaterialError(f"{source}: {key}: {exc}") from None

    name = fields["name"][0]
    try:
        return Material(
            name=name,
            kind=fields["class"][0],
            density=float(numbers("density_kg_m3")[0]),
            cE=numbers("cE_GPa").reshape(6, 6) * 1e9,
            e=numbers("e_C_m2").reshape(3, 6),
            epsS=numbers("epsS_relative").reshape(3, 3) * EPS0,
        )
    except MaterialError as exc:
        raise MaterialError(f"{source}: {exc}") from None


def load_material(path) -> Material:
    """Read a material file (see ``data/*.mat`` for the layout)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"material file not found: {path}")
    text = path.read_text()
    if any(line.lstrip().startswith("# PLACEHOLDER") for line in text.splitlines()):
        raise MaterialError(f"{path}: placeholder material; populate its constants first")
    return parse_material_text(text, str(path))


def format_material(m: Material) -> str:
    def rows(arr, scale, width):
        flat = (arr / scale).ravel()
        return "\n".join("    " + " ".join(repr(float(v)) for v in flat[i:i + width])
                         for i in range(0, flat.size, width))

    return (f"name = {m.name}\nclass = {m.kind}\ndensity_kg_m3 = {m.density!r}\n"
            f"cE_GPa =\n{rows(m.cE, 1e9, 6)}\ne_C_m2 =\n{rows(m.e, 1.0, 6)}\n"
            f"epsS_relative =\n{rows(m.epsS, EPS0, 3)}\n")


def builtin_material(name: str) -> Material:
    return load_material(DATA_DIR / f"{name}.mat")


# ---------------------------------------------------------------- rotations

def bond_matrix(a: np.ndarray) -> np.ndarray:
    """6x6 Voigt stress transformation for the direction-cosine matrix ``a``."""
    m = np.empty((6, 6))
    for big_i, (i, j) in enumerate(VOIGT_PAIRS):
        for big_j, (p, q) in enumerate(VOIGT_PAIRS):
            if p == q:
                m[big_i, big_j] = a[i, p] * a[j, q]
            else:
                m[big_i, big_j] = a[i, p] * a[j, q] + a[i, q] * a[j, p]
    return m


def rotate_by_matrix(m: Material, a: np.ndarray) -> Material:
    a = np.asarray(a, dtype=float)
    if not np.allclose(a @ a.T, np.eye(3), atol=1e-12):
        raise ValueError("rotation matrix is not orthogonal")
    bm = bond_matrix(a)
    c = bm @ m.cE @ bm.T
    eps = a @ m.epsS @ a.T
    e = a @ m.e @ bm.T
    # symmetrize away round-off so validation sees exact symmetry
    c = 0.5 * (c + c.T)
    eps = 0.5 * (eps + eps.T)
    if m.is_metal:
        e = np.zeros((3, 6))
    return Material(m.name, m.kind, m.density, c, e, eps)


def rotate_material(m: Material, angles: EulerAngles) -> Material:
    return rotate_by_matrix(m, angles.matrix())


_CUT_BASES = {"X": (90.0, 90.0, 0.0), "Y": (180.0, 90.0, 90.0), "Z": (0.0, 0.0, 0.0)}
_CUT_RE = re.compile(r"^\s*([A-Za-z])\s*-?\s*cut\s+YZ\s*([-+]?\d+(?:\.\d*)?)\s*(?:°|deg)?\s*$")


def cut_to_euler(label: str) -> EulerAngles:
    """Euler triple for labels such as ``"X-cut YZ170°"``."""
    match = _CUT_RE.match(label)
    if not match:
        raise ValueError(f"unparseable cut label {label!r}; expected e.g. 'X-cut YZ30°'")
    axis = match.group(1).upper()
    if axis not in _CUT_BASES:
        raise ValueError(f"unknown cut axis {axis!r} in {label!r}")
    phi, theta, psi = _CUT_BASES[axis]
    return EulerAngles.from_degrees(phi, theta, psi + float(match.group(2)))


# ---------------------------------------------------------------- helpers

def voigt_to_tensor(c: np.ndarray) -> np.ndarray:
    full = np.empty((3, 3, 3, 3))
    index = {}
    for big, (i, j) in enumerate(VOIGT_PAIRS):
        index[(i, j)] = index[(j, i)] = big
    for i in range(3):
        for j in range(3):
            for k in range(3):
                for l in range(3):
                    full[i, j, k, l] = c[index[(i, j)], index[(k, l)]]
    return full


def tensor_to_voigt(full: np.ndarray) -> np.ndarray:
    c = np.empty((6, 6))
    for big_i, (i, j) in enumerate(VOIGT_PAIRS):
        for big_j, (k, l) in enumerate(VOIGT_PAIRS):
            c[big_i, big_j] = full[i, j, k, l]
    return c


def mandel(c: np.ndarray) -> np.ndarray:
    """Voigt stiffness to the orthonormal Mandel representation."""
    w = np.array([1.0, 1.0, 1.0, math.sqrt(2), math.sqrt(2), math.sqrt(2)])
    return c * np.outer(w, w)

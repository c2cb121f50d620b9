"""One-port measurement ingestion, Q extraction and mBVD de-embedding."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dispersion import DeviceGeometry, device_to_coords
from .lsq import damped_least_squares


class MeasurementError(ValueError):
    pass


class TouchstoneError(MeasurementError):
    pass


class MbvdFitError(RuntimeError):
    pass


# ---------------------------------------------------------------- Touchstone

FREQ_UNITS = {"HZ": 1.0, "KHZ": 1e3, "MHZ": 1e6, "GHZ": 1e9}


@dataclass(frozen=True, eq=False)
class SParamTrace:
    frequencies: np.ndarray
    s11: np.ndarray
    z0: float = 50.0


def parse_touchstone_text(text: str, source: str = "<string>") -> SParamTrace:
    """Version-1 one-port Touchstone data."""
    unit, param, fmt, z0 = "GHZ", "S", "MA", 50.0
    seen_option = False
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("!", 1)[0].strip()
        if not line:
            continue
        if line.startswith("#"):
            if seen_option:
                continue  # later option lines are ignored per v1 convention
            seen_option = True
            tokens = line[1:].upper().split()
            k = 0
            while k < len(tokens):
                tok = tokens[k]
                if tok in FREQ_UNITS:
                    unit = tok
                elif tok in ("S", "Y", "Z", "G", "H"):
                    param = tok
                elif tok in ("RI", "MA", "DB"):
                    fmt = tok
                elif tok == "R":
                    if k + 1 >= len(tokens):
                        raise TouchstoneError(f"{source}:{lineno}: 'R' without impedance value")
                    try:
                        z0 = float(tokens[k + 1])
                    except ValueError:
                        raise TouchstoneError(f"{source}:{lineno}: bad reference impedance {tokens[k + 1]!r}") from None
                    if not z0 > 0:
                        raise TouchstoneError(f"{source}:{lineno}: reference impedance must be positive")
                    k += 1
                else:
                    raise TouchstoneError(f"{source}:{lineno}: malformed option line, unknown token {tok!r}")
                k += 1
            continue
        if line.startswith("["):
            raise TouchstoneError(f"{source}:{lineno}: Touchstone v2 keywords are not supported")
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            raise TouchstoneError(f"{source}:{lineno}: non-numeric data {line!r}") from None
        if len(values) != 3:
            raise TouchstoneError(
                f"{source}:{lineno}: expected 3 columns for a one-port file, got {len(values)} "
                "(multi-port data is not supported)")
        rows.append(values)

    if param != "S":
        raise TouchstoneError(f"{source}: only S-parameter files are supported, got {param}")
    if not rows:
        raise TouchstoneError(f"{source}: no data")
    data = np.array(rows)
    freq = data[:, 0] * FREQ_UNITS[unit]
    if np.any(np.diff(freq) <= 0):
        raise TouchstoneError(f"{source}: frequencies must be strictly increasing")
    a, b = data[:, 1], data[:, 2]
    if fmt == "RI":
        s11 = a + 1j * b
    elif fmt == "MA":
        s11 = a * np.exp(1j * np.deg2rad(b))
    else:
        s11 = 10.0 ** (a / 20.0) * np.exp(1j * np.deg2rad(b))
    return SParamTrace(freq, s11, z0)


def parse_touchstone(path) -> SParamTrace:
    path = Path(path)
    suffix = path.suffix.lower()
    if re.fullmatch(r"\.s\d+p", suffix) and suffix != ".s1p":
        raise TouchstoneError(f"{path}: multi-port file ({suffix}) is not supported")
    return parse_touchstone_text(path.read_text(), str(path))


def s11_to_y(s11, z0: float = 50.0, tol: float = 1e-9):
    """Y = (1/Z0)(1 - S11)/(1 + S11). Returns (Y, short_flags); flagged points are NaN."""
    s11 = np.asarray(s11, dtype=complex)
    den = 1.0 + s11
    short = np.abs(den) < tol
    safe = np.where(short, 1.0, den)
    y = np.where(short, np.nan + 1j * np.nan, (1.0 - s11) / safe / z0)
    return y, short


def y_to_s11(y, z0: float = 50.0):
    y = np.asarray(y, dtype=complex)
    yn = y * z0
    return (1.0 - yn) / (1.0 + yn)


# ---------------------------------------------------------------- traces

@dataclass(frozen=True, eq=False)
class AdmittanceTrace:
    frequencies: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        y = np.asarray(self.y, dtype=complex)
        if f.ndim != 1 or f.shape != y.shape:
            raise MeasurementError("frequency and admittance arrays must be matching 1-D arrays")
        if f.size < 16:
            raise MeasurementError(f"trace needs at least 16 points, got {f.size}")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(y))):
            raise MeasurementError("trace contains non-finite values")
        if np.any(np.diff(f) <= 0):
            raise MeasurementError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "y", y)

    @property
    def omega(self) -> np.ndarray:
        return 2 * np.pi * self.frequencies


def trace_from_sparams(sp: SParamTrace) -> AdmittanceTrace:
    y, short = s11_to_y(sp.s11, sp.z0)
    keep = ~short
    return AdmittanceTrace(sp.frequencies[keep], y[keep])


def read_trace(path) -> AdmittanceTrace:
    """``.s1p`` Touchstone or CSV with columns ``f_Hz,re_Y_S,im_Y_S``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        try:
            data = np.loadtxt(path, delimiter=",", comments="#", skiprows=1, ndmin=2)
        except ValueError as exc:
            raise MeasurementError(f"{path}: {exc}") from None
        if data.shape[1] != 3:
            raise MeasurementError(f"{path}: expected columns f_Hz,re_Y_S,im_Y_S")
        return AdmittanceTrace(data[:, 0], data[:, 1] + 1j * data[:, 2])
    return trace_from_sparams(parse_touchstone(path))


def write_trace_csv(trace: AdmittanceTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f_Hz", "re_Y_S", "im_Y_S"])
        for f, y in zip(trace.frequencies, trace.y):
            w.writerow([repr(float(f)), repr(float(y.real)), repr(float(y.imag))])


# ---------------------------------------------------------------- mBVD

@dataclass(frozen=True)
class MbvdParams:
    Rm: float
    Lm: float
    Cm: float
    C0: float
    Rs: float = 0.0
    R0: float = 0.0

    def __post_init__(self):
        for name in ("Rm", "Lm", "Cm", "C0"):
            if not getattr(self, name) > 0:
                raise MeasurementError(f"{name} must be positive")
        for name in ("Rs", "R0"):
            if not getattr(self, name) >= 0:
                raise MeasurementError(f"{name} must be non-negative")

    @property
    def f_s(self) -> float:
        return 1.0 / (2 * np.pi * math.sqrt(self.Lm * self.Cm))

    @property
    def f_p(self) -> float:
        return self.f_s * math.sqrt(1.0 + self.Cm / self.C0)

    def kt2(self) -> float:
        """Informational coupling estimate (pi^2/8) (f_p^2 - f_s^2) / f_p^2."""
        fs, fp = self.f_s, self.f_p
        return (np.pi ** 2 / 8) * (fp ** 2 - fs ** 2) / fp ** 2


def mbvd_admittance(p: MbvdParams, f) -> np.ndarray:
    w = 2 * np.pi * np.asarray(f, dtype=float)
    zm = p.Rm + 1j * w * p.Lm + 1.0 / (1j * w * p.Cm)
    z0b = p.R0 + 1.0 / (1j * w * p.C0)
    zcore = zm * z0b / (zm + z0b)
    return 1.0 / (p.Rs + zcore)


def synthesize_trace(p: MbvdParams, f, snr_db: Optional[float] = None, seed: int = 0) -> AdmittanceTrace:
    """mBVD trace, optionally with complex Gaussian noise at ``snr_db`` below rms |Y|."""
    y = mbvd_admittance(p, f)
    if snr_db is not None:
        rng = np.random.default_rng(seed)
        sigma = np.sqrt(np.mean(np.abs(y) ** 2)) * 10 ** (-snr_db / 20) / np.sqrt(2)
        y = y + sigma * (rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size))
    return AdmittanceTrace(np.asarray(f, dtype=float), y)


def _parabolic_peak(x, y, k):
    """Vertex of the parabola through (x[k-1..k+1], y[k-1..k+1])."""
    x0, x1, x2 = x[k - 1], x[k], x[k + 1]
    y0, y1, y2 = y[k - 1], y[k], y[k + 1]
    d0, d2 = x0 - x1, x2 - x1
    den = d0 * d2 * (d0 - d2)
    a = ((y0 - y1) * d2 - (y2 - y1) * d0) / den
    b = ((y2 - y1) * d0 * d0 - (y0 - y1) * d2 * d2) / den
    if a >= 0:
        return x1, y1
    dx = -b / (2 * a)
    dx = min(max(dx, d0), d2)
    return x1 + dx, y1 + b * dx + a * dx * dx


def find_resonance(trace: AdmittanceTrace) -> float:
    """Frequency of peak |Y|, refined parabolically on |Y|^2."""
    mag2 = np.abs(trace.y) ** 2
    k = int(np.argmax(mag2))
    if k == 0 or k == mag2.size - 1:
        raise MeasurementError("admittance peak sits at the span edge; resonance not captured")
    return float(_parabolic_peak(trace.frequencies, mag2, k)[0])


def half_power_points(trace: AdmittanceTrace):
    f = trace.frequencies
    mag2 = np.abs(trace.y) ** 2
    k = int(np.argmax(mag2))
    if k == 0 or k == mag2.size - 1:
        raise MeasurementError("admittance peak sits at the span edge; resonance not captured")
    f_s, peak = _parabolic_peak(f, mag2, k)
    level = 0.5 * peak

    lo = k
    while lo > 0 and mag2[lo] > level:
        lo -= 1
    if mag2[lo] > level:
        raise MeasurementError("lower half-power point lies outside the span")
    hi = k
    while hi < mag2.size - 1 and mag2[hi] > level:
        hi += 1
    if mag2[hi] > level:
        raise MeasurementError("upper half-power point lies outside the span")
    f1 = f[lo] + (level - mag2[lo]) * (f[lo + 1] - f[lo]) / (mag2[lo + 1] - mag2[lo])
    f2 = f[hi - 1] + (level - mag2[hi - 1]) * (f[hi] - f[hi - 1]) / (mag2[hi] - mag2[hi - 1])
    return float(f_s), float(f1), float(f2)


def q_3db(trace: AdmittanceTrace) -> float:
    f_s, f1, f2 = half_power_points(trace)
    return f_s / (f2 - f1)


def initial_guess(trace: AdmittanceTrace) -> MbvdParams:
    f, y = trace.frequencies, trace.y
    f_s = find_resonance(trace)
    k_s = int(np.argmax(np.abs(y)))
    z = np.abs(1.0 / y)
    above = np.arange(k_s + 1, f.size)
    if above.size < 3:
        raise MbvdFitError("no span above resonance; antiresonance missing")
    k_p = int(above[np.argmax(z[above])])
    if k_p == f.size - 1:
        raise MbvdFitError("antiresonance not inside the span; C0 is not identifiable")
    f_p = float(_parabolic_peak(f, z ** 2, k_p)[0])
    n_low = max(f.size // 10, 1)
    c0 = float(np.mean(y[:n_low].imag / (2 * np.pi * f[:n_low])))
    if not c0 > 0:
        raise MbvdFitError("low-frequency susceptance is not capacitive; cannot seed C0")
    cm = c0 * ((f_p / f_s) ** 2 - 1.0)
    lm = 1.0 / ((2 * np.pi * f_s) ** 2 * cm)
    rm = 1.0 / np.abs(y[k_s])
    return MbvdParams(Rm=rm, Lm=lm, Cm=cm, C0=c0, Rs=0.0, R0=0.0)


_FITTED = ("Rm", "Lm", "ws", "C0", "Rs")


@dataclass
class MbvdFit:
    params: MbvdParams
    residual_norm: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def fit_mbvd(trace: AdmittanceTrace, init: Optional[MbvdParams] = None, *,
             fit_r0: bool = False, max_iter: int = 300, full_output: bool = False):
    """Least-squares mBVD fit of sum |Y_model - Y_data|^2 in log-parameter space.

    The motional branch is carried as (Rm, Lm, w_s) with Cm = 1/(w_s^2 Lm);
    the series-resonance frequency is sharply determined by the data, and
    fitting it directly removes the narrow Lm-Cm valley.
    """
    init = init or initial_guess(trace)
    names = list(_FITTED) + (["R0"] if fit_r0 else [])
    start = {"Rm": init.Rm, "Lm": init.Lm, "ws": 2 * np.pi * init.f_s, "C0": init.C0,
             "Rs": init.Rs, "R0": init.R0}
    floor = {"Rs": 1e-6 * init.Rm, "R0": 1e-6 * init.Rm}
    for k in ("Rs", "R0"):
        if start[k] <= floor[k]:
            start[k] = 1e-2 * init.Rm
    x0 = np.log([start[k] for k in names])
    lower = x0 - np.log(1e4)
    upper = x0 + np.log(1e4)
    for i, k in enumerate(names):
        if k in floor:
            lower[i] = math.log(floor[k])
            upper[i] = math.log(1e3 * init.Rm)
        elif k == "ws":
            lower[i], upper[i] = x0[i] - np.log(2.0), x0[i] + np.log(2.0)

    f = trace.frequencies
    scale = np.max(np.abs(trace.y))

    def physical(x):
        v = dict(zip(names, np.exp(x)))
        v["Cm"] = 1.0 / (v.pop("ws") ** 2 * v["Lm"])
        v.setdefault("R0", 0.0)
        return v

    def residuals(x):
        d = (mbvd_admittance(MbvdParams(**physical(x)), f) - trace.y) / scale
        return np.concatenate([d.real, d.imag])

    res = damped_least_squares(residuals, x0, lower, upper, max_iter=max_iter, central=True,
                               rel_step=1e-6)
    notes = []
    vals = physical(res.x)
    for i, k in enumerate(names):
        at_lo = res.x[i] <= lower[i] + 1e-9
        at_hi = res.x[i] >= upper[i] - 1e-9
        if k in floor and at_lo:
            vals[k] = 0.0
            notes.append(f"{k} driven to its floor; reported as 0")
        elif at_lo or at_hi:
            raise MbvdFitError(f"mBVD fit pinned {k} at its bound")
    if not res.converged:
        raise MbvdFitError(f"mBVD fit did not converge: {res.message}")
    params = MbvdParams(**vals)
    if full_output:
        return MbvdFit(params, res.residual_norm * scale, res.n_iter, res.converged,
                       [2 * c * scale ** 2 for c in res.history], notes)
    return params


def deembed_q(p: MbvdParams) -> tuple[float, float]:
    """(loaded Q including Rs, mechanical Q of the motional branch)."""
    ws = 1.0 / math.sqrt(p.Lm * p.Cm)
    return ws * p.Lm / (p.Rm + p.Rs), ws * p.Lm / p.Rm


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class ResonanceRecord:
    device_id: str
    f_s: float
    Q_3dB: float
    Q_m: float
    geometry: Optional[DeviceGeometry] = None
    Rs: Optional[float] = None
    Rm: Optional[float] = None
    deembedded: bool = False

    def __post_init__(self):
        if not self.f_s > 0:
            raise MeasurementError(f"{self.device_id}: f_s must be positive")
        if not (self.Q_3dB > 0 and self.Q_m > 0):
            raise MeasurementError(f"{self.device_id}: quality factors must be positive")


MEASURED_COLUMNS = ("device_id", "f_s_Hz", "Q_3dB", "Rs_ohm", "lambda_m", "h_m", "tm_m")
RECORD_COLUMNS = MEASURED_COLUMNS + ("Rm_ohm", "Q_m", "deembedded",
                                     "h_over_lambda", "tm_over_h", "tm_over_lambda")


def _opt_float(row, key, where):
    raw = (row.get(key) or "").strip()
    if raw == "":
        return None
    try:
        return float(raw)
    except ValueError:
        raise MeasurementError(f"{where}: {key} is not a number ({raw!r})") from None


def load_measured_set(path) -> list[ResonanceRecord]:
    """Read a measured-set CSV; de-embeds Q_3dB when Rs and Rm are both given.

    Rows with an empty/missing ``Rs_ohm`` keep Q_m = Q_3dB and are flagged
    ``deembedded=False``. An explicit ``Q_m`` column takes precedence.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.lstrip().startswith("#")))
    if rows:
        header = rows[0].keys()
        missing = [c for c in ("device_id", "f_s_Hz", "Q_3dB") if c not in header]
        if missing:
            raise MeasurementError(f"{path}: missing columns {missing}")
    records = []
    for n, row in enumerate(rows, start=2):
        where = f"{path}: row {n} ({row.get('device_id', '?')})"
        f_s = _opt_float(row, "f_s_Hz", where)
        q3 = _opt_float(row, "Q_3dB", where)
        if f_s is None or not f_s > 0:
            raise MeasurementError(f"{where}: f_s_Hz must be positive")
        if q3 is None or not q3 > 0:
            raise MeasurementError(f"{where}: Q_3dB must be positive, got {q3}")
        rs = _opt_float(row, "Rs_ohm", where)
        rm = _opt_float(row, "Rm_ohm", where)
        qm_given = _opt_float(row, "Q_m", where)
        if rs is not None and rs < 0:
            raise MeasurementError(f"{where}: Rs_ohm must be non-negative")
        if rm is not None and not rm > 0:
            raise MeasurementError(f"{where}: Rm_ohm must be positive")
        if qm_given is not None:
            if not qm_given > 0:
                raise MeasurementError(f"{where}: Q_m must be positive")
            qm, de = qm_given, rs is not None
        elif rs is None:
            qm, de = q3, False
        elif rm is None:
            raise MeasurementError(f"{where}: Rs_ohm given without Rm_ohm; cannot de-embed")
        else:
            qm, de = q3 * (rm + rs) / rm, True

        lam = _opt_float(row, "lambda_m", where)
        h = _opt_float(row, "h_m", where)
        tm = _opt_float(row, "tm_m", where)
        geom = None
        if lam is not None or h is not None or tm is not None:
            if lam is None or h is None or tm is None:
                raise MeasurementError(f"{where}: geometry needs lambda_m, h_m and tm_m together")
            try:
                geom = DeviceGeometry(lam, h, tm, f_s)
            except ValueError as exc:
                raise MeasurementError(f"{where}: {exc}") from None
        records.append(ResonanceRecord(row["device_id"].strip(), f_s, q3, qm, geom, rs, rm, de))
    return records


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def record_row(r: ResonanceRecord) -> dict:
    g = r.geometry
    coords = device_to_coords(g) if g is not None else (None, None, None)
    return {
        "device_id": r.device_id,
        "f_s_Hz": _fmt(float(r.f_s)),
        "Q_3dB": _fmt(float(r.Q_3dB)),
        "Rs_ohm": _fmt(None if r.Rs is None else float(r.Rs)),
        "lambda_m": _fmt(None if g is None else float(g.wavelength)),
        "h_m": _fmt(None if g is None else float(g.film_thickness)),
        "tm_m": _fmt(None if g is None else float(g.metal_thickness)),
        "Rm_ohm": _fmt(None if r.Rm is None else float(r.Rm)),
        "Q_m": _fmt(float(r.Q_m)),
        "deembedded": _fmt(bool(r.deembedded)),
        "h_over_lambda": _fmt(None if g is None else float(coords[0])),
        "tm_over_h": _fmt(None if g is None else float(coords[1])),
        "tm_over_lambda": _fmt(None if g is None else float(coords[2])),
    }


def export_records(records, path, extra: Optional[list] = None) -> None:
    """Record CSV; ``extra`` is a per-record list of additional column dicts."""
    extra_cols = []
    if extra:
        for e in extra:
            for k in e:
                if k not in extra_cols and k not in RECORD_COLUMNS:
                    extra_cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(RECORD_COLUMNS) + extra_cols, lineterminator="\n")
        w.writeheader()
        for i, r in enumerate(records):
            row = record_row(r)
            if extra:
                row.update({k: _fmt(v) for k, v in extra[i].items()})
            w.writerow(row)


def extract_record(trace: AdmittanceTrace, device_id: str,
                   geometry: Optional[DeviceGeometry] = None):
    """Resonance, Q_3dB and fitted mBVD for one trace; returns (record, params)."""
    f_s = find_resonance(trace)
    q3 = q_3db(trace)
    params = fit_mbvd(trace)
    _, qm = deembed_q(params)
    if geometry is not None and geometry.f_s is None:
        geometry = DeviceGeometry(geometry.wavelength, geometry.film_thickness,
                                  geometry.metal_thickness, f_s)
    rec = ResonanceRecord(device_id, f_s, q3, qm, geometry, params.Rs, params.Rm, True)
    return rec, params

"""Batch command-line interface: eta maps, Q prediction, extraction, fitting, self-test.

Configuration is an INI file with one section per command plus ``[run]`` and
``[materials]``; every key can be overridden with ``--set section.key=value``
and the common flags below. Exit codes: 0 success, 1 runtime failure,
2 configuration or validation failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dispersion import (
    DeviceGeometry,
    EtaMapError,
    OutOfDomainError,
    SweepReport,
    export_eta_map,
    import_eta_map,
    interp_eta,
    point_spec,
    sweep_eta,
)
from .fem import MeshError, UnitCellSpec, build_mesh, select_mode, solve_unit_cell
from .fit import FAMILIES, FitSpec, fit_losses, residual_report
from .lossmodel import (
    LossModelError,
    QmetalConstant,
    QpiezoConstant,
    load_loss_model,
    parse_loss_config,
    q_m,
    q_metal_at,
    q_piezo_at,
)
from .materials import (
    DATA_DIR,
    MaterialError,
    builtin_material,
    EulerAngles,
    cut_to_euler,
    isotropic_material,
    load_material,
    rotate_material,
)
from .measure import (
    MbvdParams,
    MeasurementError,
    deembed_q,
    export_records,
    extract_record,
    fit_mbvd,
    load_measured_set,
    read_trace,
    synthesize_trace,
)
from .svgplot import Chart


class ConfigError(ValueError):
    pass


VALIDATION_ERRORS = (ConfigError, FileNotFoundError, MaterialError, LossModelError,
                     EtaMapError, MeasurementError, MeshError, configparser.Error)

# section -> key -> (default, description); rendered into --help
KEYS = {
    "run": {
        "output_dir": ("out", "directory receiving every output file"),
        "threads": ("", "worker threads for sweeps (default: machine parallelism)"),
        "seed": ("0", "seed for fit restarts and synthetic data"),
        "clamp": ("false", "clamp eta interpolation to the map edge instead of failing"),
    },
    "materials": {
        "piezo": ("isotropic_test", "piezoelectric film: material file path or built-in name"),
        "metal": ("isotropic_test_metal", "electrode metal: material file path or built-in name"),
        "piezo_cut": ("", "optional cut label such as 'Y-cut YZ 36' applied to the film"),
        "piezo_euler_deg": ("", "optional 'phi,theta,psi' Z-X-Z angles in degrees (overrides piezo_cut)"),
    },
    "eta-map": {
        "film_thickness_m": ("1e-6", "film thickness h; the wavelength follows from h/lambda"),
        "coverage": ("0.5", "electrode metallisation ratio in [0, 1]"),
        "h_over_lambda": ("0.01:0.5:50", "grid as 'start:stop:count' or a comma list"),
        "tm_over_h": ("0,0.1,0.2,0.3,0.4,0.5", "grid as 'start:stop:count' or a comma list"),
        "mesh_nx": ("32", "elements across the half-wavelength cell"),
        "mesh_nz_film": ("8", "elements through the film"),
        "mesh_nz_metal": ("2", "elements through the electrode"),
        "n_modes": ("10", "eigenpairs computed per grid point"),
        "selector": ("coupling", "mode selector: coupling, x, y or z"),
        "velocity_window_m_s": ("", "optional 'v_lo,v_hi' phase-velocity window in m/s"),
        "output": ("eta_map.csv", "eta-map CSV file name (an .svg with the same stem is written too)"),
    },
    "predict-q": {
        "eta_map": ("", "eta-map CSV (default: <output_dir>/eta_map.csv)"),
        "loss_model": ("", "loss-model INI file; when empty the [qpiezo]/[qmetal] sections of this config are used"),
        "axis": ("h_over_lambda", "x axis: h_over_lambda or tm_over_lambda"),
        "tm_over_h": ("", "t_m/h curves to emit (default: the map's grid)"),
        "frequency_hz": ("", "fixed operating frequency for frequency-dependent loss models"),
        "velocity_m_s": ("", "phase velocity; with film_thickness_m sets f = v*(h/lambda)/h per point"),
        "film_thickness_m": ("", "film thickness used with velocity_m_s"),
        "output": ("predicted_qm.csv", "prediction CSV file name (an .svg with the same stem is written too)"),
    },
    "extract-q": {
        "inputs": ("", "comma list of .s1p/.csv traces or directories of them"),
        "geometry": ("", "optional CSV with device_id,lambda_m,h_m,tm_m (device_id = trace file stem)"),
        "output": ("records.csv", "record CSV file name; failures go to extract_errors.csv"),
    },
    "fit": {
        "records": ("", "measured-set CSV with geometry columns"),
        "eta_map": ("", "eta-map CSV (default: <output_dir>/eta_map.csv)"),
        "family": ("both", "constant-Qpiezo, constant-plus-Qni or both"),
        "objective": ("least-squares", "least-squares or upper-envelope"),
        "envelope_bins": ("8", "bin count for the upper-envelope objective"),
        "residual_scale": ("log", "log or linear residuals"),
        "fixed": ("", "held parameters, e.g. 'fq=1.3e12; ni_exponent=1'"),
        "bounds": ("", "parameter bounds, e.g. 'q_piezo=10:1e6; fq=1e9:1e15'"),
        "ni_f_ref_hz": ("", "reference frequency of the Q_ni power law (default: geometric mean)"),
        "restarts": ("8", "seeded restarts, 1 to 8"),
        "output_prefix": ("fit", "prefix for the summary, residual CSV and overlay SVG"),
    },
}

PARAM_UNITS = {"q_piezo": "", "fq": "Hz", "ni_q_ref": "", "ni_exponent": ""}


# ---------------------------------------------------------------- configuration

class Config:
    def __init__(self, parser: configparser.ConfigParser, base_dir: Path):
        self.cp = parser
        self.base = base_dir

    def get(self, section: str, key: str) -> str:
        default = KEYS.get(section, {}).get(key, ("", ""))[0]
        if self.cp.has_option(section, key):
            return self.cp.get(section, key).strip()
        return default

    def path(self, section: str, key: str, must_exist: bool = True):
        raw = self.get(section, key)
        if not raw:
            return None
        p = Path(raw)
        if not p.is_absolute():
            p = self.base / p
        if must_exist and not p.exists():
            raise ConfigError(f"[{section}] {key}: path not found: {p}")
        return p

    def number(self, section: str, key: str, kind=float):
        raw = self.get(section, key)
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from None

    def optional_number(self, section: str, key: str):
        return self.number(section, key) if self.get(section, key) else None

    def flag(self, section: str, key: str) -> bool:
        raw = self.get(section, key).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off", ""):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")

    def grid(self, section: str, key: str):
        raw = self.get(section, key)
        try:
            if ":" in raw:
                a, b, n = raw.split(":")
                vals = np.linspace(float(a), float(b), int(n))
                return [float(v) for v in np.round(vals, 12)]
            return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse grid {raw!r}") from None

    def output_dir(self) -> Path:
        p = Path(self.get("run", "output_dir"))
        if not p.is_absolute():
            p = self.base / p
        try:
            p.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory not writable: {p} ({exc})") from None
        if not os.access(p, os.W_OK):
            raise ConfigError(f"output directory not writable: {p}")
        return p

    def threads(self) -> int:
        raw = self.get("run", "threads")
        n = int(raw) if raw else (os.cpu_count() or 1)
        if n < 1:
            raise ConfigError("[run] threads must be >= 1")
        return n


def load_config(args) -> Config:
    cp = configparser.ConfigParser(interpolation=None)
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp.read(path)
        base = path.resolve().parent
    for item in args.set or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name.strip(), value)

    def put(section, key, value):
        if value is None:
            return
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, str(value))

    put("run", "output_dir", getattr(args, "output_dir", None))
    put("run", "threads", getattr(args, "threads", None))
    put("run", "seed", getattr(args, "seed", None))
    if getattr(args, "clamp", False):
        put("run", "clamp", "true")
    for section, key, attr in (("materials", "piezo", "piezo"), ("materials", "metal", "metal"),
                               ("predict-q", "eta_map", "eta_map_predict"),
                               ("predict-q", "loss_model", "loss_model"),
                               ("extract-q", "geometry", "geometry"),
                               ("fit", "records", "records"), ("fit", "eta_map", "eta_map_fit"),
                               ("fit", "family", "family"), ("fit", "objective", "objective")):
        put(section, key, getattr(args, attr, None))
    if getattr(args, "inputs", None):
        put("extract-q", "inputs", ",".join(args.inputs))

    for section in cp.sections():
        if section in ("qpiezo", "qmetal"):
            continue
        known = KEYS.get(section)
        if known is None:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp.options(section):
            if key not in known:
                raise ConfigError(f"[{section}] unknown key {key!r}")
    return Config(cp, base)


def resolve_material(cfg: Config, key: str):
    raw = cfg.get("materials", key)
    if not raw:
        raise ConfigError(f"[materials] {key} is required")
    p = Path(raw)
    if not p.is_absolute():
        p = cfg.base / p
    if p.is_file():
        return load_material(p)
    if (DATA_DIR / f"{raw}.mat").is_file():
        return builtin_material(raw)
    raise ConfigError(f"[materials] {key}: material file not found: {p}")


def film_material(cfg: Config):
    mat = resolve_material(cfg, "piezo")
    euler = cfg.get("materials", "piezo_euler_deg")
    cut = cfg.get("materials", "piezo_cut")
    try:
        if euler:
            phi, theta, psi = (float(v) for v in euler.split(","))
            return rotate_material(mat, EulerAngles.from_degrees(phi, theta, psi))
        if cut:
            return rotate_material(mat, cut_to_euler(cut))
    except ValueError as exc:
        raise ConfigError(f"[materials] orientation: {exc}") from None
    return mat


def _eta_map_path(cfg: Config, section: str) -> Path:
    p = cfg.path(section, "eta_map")
    if p is None:
        p = cfg.output_dir() / KEYS["eta-map"]["output"][0]
        if not p.exists():
            raise ConfigError(f"[{section}] eta_map not set and {p} does not exist")
    return p


def _r(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_r(v) if not isinstance(v, str) else v for v in row])
    path.write_text(buf.getvalue())


# ---------------------------------------------------------------- commands

def cmd_eta_map(cfg: Config, out=None) -> int:
    out = out or sys.stdout
    sec = "eta-map"
    piezo = film_material(cfg)
    metal = resolve_material(cfg, "metal")
    g1, g2 = cfg.grid(sec, "h_over_lambda"), cfg.grid(sec, "tm_over_h")
    if not g1 or not g2:
        raise ConfigError("[eta-map] grids must be nonempty")
    window = None
    raw_window = cfg.get(sec, "velocity_window_m_s")
    if raw_window:
        try:
            window = tuple(float(v) for v in raw_window.split(","))
        except ValueError:
            window = ()
        if len(window) != 2 or not 0 <= window[0] < window[1]:
            raise ConfigError(f"[eta-map] velocity_window_m_s must be 'v_lo,v_hi', got {raw_window!r}")
    selector = cfg.get(sec, "selector")
    if selector not in ("coupling", "x", "y", "z"):
        raise ConfigError(f"[eta-map] unknown selector {selector!r}")
    try:
        h = cfg.number(sec, "film_thickness_m")
        base = UnitCellSpec(wavelength=h / g1[0], film_thickness=h, metal_thickness=g2[0] * h,
                            coverage=cfg.number(sec, "coverage"), piezo=piezo, metal=metal,
                            mesh_nx=cfg.number(sec, "mesh_nx", int),
                            mesh_nz_film=cfg.number(sec, "mesh_nz_film", int),
                            mesh_nz_metal=cfg.number(sec, "mesh_nz_metal", int))
        build_mesh(point_spec(base, g1[0], max(g2)))
    except (ValueError, ZeroDivisionError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[eta-map] {exc}") from None
    n_modes = cfg.number(sec, "n_modes", int)
    if n_modes < 1:
        raise ConfigError("[eta-map] n_modes must be >= 1")
    outdir = cfg.output_dir()
    report = SweepReport()
    t0 = time.perf_counter()
    try:
        emap = sweep_eta(base, g1, g2, n_modes=n_modes, velocity_window=window, selector=selector,
                         threads=cfg.threads(), report=report)
    except EtaMapError as exc:
        raise RuntimeError(str(exc)) from None
    csv_path = outdir / cfg.get(sec, "output")
    export_eta_map(emap, csv_path)

    chart = Chart("Piezoelectric energy confinement", "h/lambda (normalised film thickness)",
                  "eta (energy fraction in film)")
    for j, tmh in enumerate(emap.tm_over_h):
        chart.add(f"t_m/h = {tmh:g}", emap.h_over_lambda, emap.values[:, j])
    chart.save(csv_path.with_suffix(".svg"))
    print(f"eta map: {len(g1)}x{len(g2)} points, {len(report.failures)} gap(s), "
          f"{time.perf_counter() - t0:.1f} s -> {csv_path}", file=out)
    for hl, tmh, msg in report.failures:
        print(f"  gap at h/lambda={hl:g} t_m/h={tmh:g}: {msg}", file=out)
    return 0


def _loss_models(cfg: Config):
    path = cfg.path("predict-q", "loss_model")
    if path is not None:
        return load_loss_model(path)
    if cfg.cp.has_section("qpiezo") and cfg.cp.has_section("qmetal"):
        return parse_loss_config(cfg.cp, cfg.base)
    raise ConfigError("[predict-q] needs loss_model or [qpiezo]/[qmetal] sections")


def cmd_predict_q(cfg: Config, out=None) -> int:
    out = out or sys.stdout
    sec = "predict-q"
    emap = import_eta_map(_eta_map_path(cfg, sec))
    qp, qm = _loss_models(cfg)
    clamp = cfg.flag("run", "clamp")
    axis = cfg.get(sec, "axis")
    if axis not in ("h_over_lambda", "tm_over_lambda"):
        raise ConfigError(f"[predict-q] axis must be h_over_lambda or tm_over_lambda, got {axis!r}")
    curves = cfg.grid(sec, "tm_over_h") if cfg.get(sec, "tm_over_h") else list(emap.tm_over_h)
    f_fixed = cfg.optional_number(sec, "frequency_hz")
    v = cfg.optional_number(sec, "velocity_m_s")
    h = cfg.optional_number(sec, "film_thickness_m")
    freq_dependent = not (isinstance(qm, QmetalConstant) and isinstance(qp, QpiezoConstant))
    if f_fixed is None and (v is None or h is None) and freq_dependent:
        raise ConfigError("[predict-q] frequency-dependent loss model needs frequency_hz "
                          "or velocity_m_s with film_thickness_m")

    rows, failed = [], 0
    chart = Chart("Mechanical quality factor",
                  "h/lambda (normalised film thickness)" if axis == "h_over_lambda"
                  else "t_m/lambda (normalised electrode thickness)", "Q_m")
    for tmh in curves:
        xs, ys = [], []
        for hl in emap.h_over_lambda:
            hl = float(hl)
            tml = tmh * hl
            if f_fixed is not None:
                f = f_fixed
            elif v is not None and h is not None:
                f = v * hl / h
            else:
                f = 1.0
            try:
                eta = interp_eta(emap, hl, tmh, clamp=clamp)
                qpv = q_piezo_at(qp, f, tml)
                qmv = q_metal_at(qm, f)
                qmech = q_m(eta, qpv, qmv)
            except EtaMapError as exc:
                if isinstance(exc, OutOfDomainError):
                    raise
                failed += 1
                continue
            f_out = None if f_fixed is None and (v is None or h is None) else f
            rows.append((hl, float(tmh), tml, f_out, eta, qpv, qmv, qmech))
            xs.append(hl if axis == "h_over_lambda" else tml)
            ys.append(qmech)
        chart.add(f"t_m/h = {tmh:g}", xs, ys)
    if not rows:
        raise RuntimeError("no prediction could be made; the eta map has no usable points")
    outdir = cfg.output_dir()
    csv_path = outdir / cfg.get(sec, "output")
    _write_csv(csv_path, ("h_over_lambda", "tm_over_h", "tm_over_lambda", "frequency_Hz",
                          "eta", "Q_piezo", "Q_metal", "Q_m"), rows)
    chart.save(csv_path.with_suffix(".svg"))
    qs = [r[-1] for r in rows]
    print(f"predicted {len(rows)} point(s) on {len(curves)} curve(s), Q_m in "
          f"[{min(qs):.6g}, {max(qs):.6g}], {failed} skipped at map gaps -> {csv_path}", file=out)
    return 0


def _trace_files(cfg: Config):
    raw = cfg.get("extract-q", "inputs")
    if not raw:
        raise ConfigError("[extract-q] inputs is empty")
    files = []
    for item in (s.strip() for s in raw.split(",")):
        if not item:
            continue
        p = Path(item)
        if not p.is_absolute():
            p = cfg.base / p
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".s1p", ".csv")))
        else:
            files.append(p)
    if not files:
        raise ConfigError("[extract-q] no trace files found")
    return files


def _geometry_table(cfg: Config):
    p = cfg.path("extract-q", "geometry")
    if p is None:
        return {}
    table = {}
    with open(p, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                table[row["device_id"].strip()] = DeviceGeometry(
                    float(row["lambda_m"]), float(row["h_m"]), float(row["tm_m"]))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{p}: bad geometry row {row!r}: {exc}") from None
    return table


def cmd_extract_q(cfg: Config, out=None) -> int:
    out = out or sys.stdout
    files = _trace_files(cfg)
    geom = _geometry_table(cfg)
    outdir = cfg.output_dir()
    records, extra, errors = [], [], []
    for path in files:
        try:
            trace = read_trace(path)
            rec, p = extract_record(trace, path.stem, geom.get(path.stem))
        except Exception as exc:  # isolated per file, summarised below
            errors.append((str(path), f"{type(exc).__name__}: {exc}"))
            continue
        records.append(rec)
        extra.append({"Lm_H": float(p.Lm), "Cm_F": float(p.Cm), "C0_F": float(p.C0),
                      "R0_ohm": float(p.R0), "source": path.name})
    csv_path = outdir / cfg.get("extract-q", "output")
    export_records(records, csv_path, extra)
    _write_csv(outdir / "extract_errors.csv", ("file", "error"), errors)
    print(f"extracted {len(records)} of {len(files)} trace(s) -> {csv_path}", file=out)
    for path, msg in errors:
        print(f"  failed: {path}: {msg}", file=out)
    if not records:
        raise RuntimeError("every trace failed to extract")
    return 0


def _parse_assignments(raw: str, what: str):
    out = {}
    for part in raw.replace("\n", ";").split(";"):
        part = part.strip()
        if not part:
            continue
        name, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"[fit] {what}: expected name=value, got {part!r}")
        out[name.strip()] = value.strip()
    return out


def fit_specs(cfg: Config):
    sec = "fit"
    family = cfg.get(sec, "family")
    families = list(FAMILIES) if family == "both" else [family]
    fixed = {k: float(v) for k, v in _parse_assignments(cfg.get(sec, "fixed"), "fixed").items()}
    bounds = {}
    for k, v in _parse_assignments(cfg.get(sec, "bounds"), "bounds").items():
        try:
            lo, hi = (float(x) for x in v.split(":"))
        except ValueError:
            raise ConfigError(f"[fit] bounds for {k}: expected lo:hi, got {v!r}") from None
        bounds[k] = (lo, hi)
    specs = []
    for fam in families:
        names = FAMILIES.get(fam, ())
        try:
            specs.append(FitSpec(
                family=fam,
                fixed={k: v for k, v in fixed.items() if k in names},
                bounds={k: v for k, v in bounds.items() if k in names},
                objective=cfg.get(sec, "objective"),
                envelope_bins=cfg.number(sec, "envelope_bins", int),
                residual_scale=cfg.get(sec, "residual_scale"),
                ni_f_ref=cfg.optional_number(sec, "ni_f_ref_hz"),
                restarts=cfg.number(sec, "restarts", int),
                seed=cfg.number("run", "seed", int),
                clamp=cfg.flag("run", "clamp")))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[fit] {exc}") from None
    return specs


def format_summary(results, n_records: int) -> str:
    lines = ["loss-model fit summary", f"records supplied: {n_records}", ""]
    for res in results:
        lines.append(f"family: {res.family}")
        lines.append(f"  objective: {res.objective} ({res.residual_scale} residuals), "
                     f"{len(res.records)} record(s) fitted")
        for name in FAMILIES[res.family]:
            unit = PARAM_UNITS[name]
            val = res.params[name]
            if name in res.uncertainties:
                lines.append(f"  {name} = {val:.6g} +/- {res.uncertainties[name]:.3g} {unit}".rstrip())
            else:
                lines.append(f"  {name} = {val:.6g} {unit} (fixed)".replace("  (", " ("))
        if res.ni_f_ref is not None:
            lines.append(f"  ni_f_ref = {res.ni_f_ref:.6g} Hz")
        lines.append(f"  residual norm: {res.residual_norm:.6g}")
        lines.append(f"  converged: {'yes' if res.converged else 'no'} ({res.message}); "
                     f"{res.iterations} iteration(s), best restart {res.restart}")
        lines.append("")
    return "\n".join(lines)


def cmd_fit(cfg: Config, out=None) -> int:
    out = out or sys.stdout
    sec = "fit"
    rec_path = cfg.path(sec, "records")
    if rec_path is None:
        raise ConfigError("[fit] records is required")
    records = load_measured_set(rec_path)
    missing = [r.device_id for r in records if r.geometry is None]
    if missing:
        raise ConfigError(f"[fit] records without geometry: {', '.join(missing[:5])}")
    emap = import_eta_map(_eta_map_path(cfg, sec))
    specs = fit_specs(cfg)
    clamp = cfg.flag("run", "clamp")
    if not clamp:
        for r in records:
            hl, tmh = r.geometry.film_thickness / r.geometry.wavelength, \
                r.geometry.metal_thickness / r.geometry.film_thickness
            if not emap.contains(hl, tmh):
                raise ConfigError(f"[fit] record {r.device_id} lies outside the eta map "
                                  f"(h/lambda={hl:.6g}, t_m/h={tmh:.6g}); use --clamp to allow")
    results = [fit_losses(records, emap, spec) for spec in specs]

    outdir = cfg.output_dir()
    prefix = cfg.get(sec, "output_prefix")
    summary = format_summary(results, len(records))
    (outdir / f"{prefix}_summary.txt").write_text(summary)

    rows = []
    for res in results:
        for row in residual_report(res, records, emap, clamp=clamp):
            rows.append((res.family, row["device_id"], row["f_s_Hz"], row["Q_m_measured"],
                         row["Q_m_predicted"], row["residual"], row["eta"], row["flag"]))
    _write_csv(outdir / f"{prefix}_residuals.csv",
               ("family", "device_id", "f_s_Hz", "Q_m_measured", "Q_m_predicted", "residual",
                "eta", "flag"), rows)

    ordered = sorted(records, key=lambda r: (r.f_s, r.device_id))
    chart = Chart("Modelled vs measured mechanical Q", "resonance frequency f_s (Hz)", "Q_m",
                  xlog=True, ylog=True)
    plotted = []
    chart.add("measured", [r.f_s for r in ordered], [r.Q_m for r in ordered], style="points")
    plotted += [("measured", r.device_id, r.f_s, r.Q_m) for r in ordered]
    for res in results:
        pts = [(row["f_s_Hz"], row["Q_m_predicted"], row["device_id"])
               for row in residual_report(res, ordered, emap, clamp=clamp)
               if row["Q_m_predicted"] is not None]
        chart.add(f"model: {res.family}", [p[0] for p in pts], [p[1] for p in pts])
        plotted += [(res.family, d, f, q) for f, q, d in pts]
    chart.save(outdir / f"{prefix}_overlay.svg")
    _write_csv(outdir / f"{prefix}_overlay.csv", ("series", "device_id", "f_s_Hz", "Q_m"), plotted)
    out.write(summary)
    return 0


# ---------------------------------------------------------------- self-test

TOL_ENV = "PIEZOQ_SELFTEST_TOL_SCALE"


def selftest_checks(scale: float = 1.0, seed: int = 0):
    """(name, measured error, tolerance) for each analytic oracle."""
    checks = []
    iso = isotropic_material("iso", 50e9, 25e9, 5000.0)
    iso_metal = isotropic_material("iso-metal", 50e9, 25e9, 5000.0, kind="metal")

    spec = UnitCellSpec(10e-6, 1e-6, 0.0, 0.0, iso, iso_metal, mesh_nx=32, mesh_nz_film=8)
    _, _, modes = solve_unit_cell(spec, 6)
    sh0 = select_mode(modes, by="y")
    err = abs(sh0.frequency * spec.wavelength / math.sqrt(25e9 / 5000.0) - 1.0)
    checks.append(("SH0 phase velocity vs sqrt(mu/rho)", err, 1e-2 * scale))

    worst = 0.0
    for hl in (0.05, 0.2, 0.4):
        s = point_spec(UnitCellSpec(1e-6 / hl, 1e-6, 0.0, 0.5, iso, iso_metal,
                                    mesh_nx=16, mesh_nz_film=4), hl, 0.0)
        _, _, ms = solve_unit_cell(s, 4)
        worst = max(worst, max(abs(m.eta - 1.0) for m in ms))
    checks.append(("eta = 1 on a bare plate row", worst, 1e-9 * scale))

    e1 = abs(q_m(1.0, 2000.0, 200.0) / 2000.0 - 1.0)
    e0 = abs(q_m(0.0, 2000.0, 200.0) / 200.0 - 1.0)
    checks.append(("Q_m endpoints at eta = 0 and 1", max(e0, e1), 1e-12 * scale))

    truth = MbvdParams(Rm=100.0, Lm=25.33e-6, Cm=1e-15, C0=20e-15, Rs=5.0)
    f = np.linspace(0.9e9, 1.1e9, 2001)
    fitted = fit_mbvd(synthesize_trace(truth, f))
    rel = max(abs(getattr(fitted, k) / getattr(truth, k) - 1.0) for k in ("Rm", "Lm", "Cm", "C0", "Rs"))
    checks.append(("mBVD noiseless round trip", rel, 1e-3 * scale))
    noisy = fit_mbvd(synthesize_trace(truth, f, snr_db=40.0, seed=seed))
    rel = max(abs(getattr(noisy, k) / getattr(truth, k) - 1.0) for k in ("Rm", "Lm", "Cm"))
    checks.append(("mBVD 40 dB round trip (Rm, Lm, Cm)", rel, 2e-2 * scale))
    _, qmech = deembed_q(fitted)
    ws = 1.0 / math.sqrt(truth.Lm * truth.Cm)
    checks.append(("de-embedded Q_m vs w_s Lm / Rm", abs(qmech / (ws * truth.Lm / truth.Rm) - 1.0),
                   1e-3 * scale))
    return checks


def cmd_selftest(cfg: Config, out=None) -> int:
    out = out or sys.stdout
    raw = os.environ.get(TOL_ENV, "")
    try:
        scale = float(raw) if raw else 1.0
    except ValueError:
        raise ConfigError(f"{TOL_ENV} must be a number, got {raw!r}") from None
    if not scale > 0:
        raise ConfigError(f"{TOL_ENV} must be positive")
    print(f"tolerance scale: {scale:g}" + (f" (from {TOL_ENV})" if raw else ""), file=out)
    checks = selftest_checks(scale, cfg.number("run", "seed", int))
    ok = True
    for name, err, tol in checks:
        passed = err <= tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: error {err:.3g} (tolerance {tol:.3g})", file=out)
    print("all checks passed" if ok else "self-test FAILED", file=out)
    return 0 if ok else 1


# ---------------------------------------------------------------- entry point

def _keys_help(*sections) -> str:
    lines = ["config keys (INI sections; override with --set section.key=value):"]
    for s in sections:
        lines.append(f"  [{s}]")
        for k, (default, desc) in KEYS[s].items():
            d = f" (default: {default})" if default else ""
            lines.append(f"    {k}: {desc}{d}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI configuration file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-o", "--output-dir", dest="output_dir", help="sets [run] output_dir")
    common.add_argument("--threads", type=int, help="sets [run] threads")
    common.add_argument("--seed", type=int, help="sets [run] seed")
    common.add_argument("--clamp", action="store_true", help="sets [run] clamp = true")

    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="piezoq", description=__doc__, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("eta-map", parents=[common], formatter_class=fmt,
                       help="sweep the unit cell and write the eta map",
                       epilog=_keys_help("run", "materials", "eta-map"))
    s.add_argument("--piezo", help="sets [materials] piezo")
    s.add_argument("--metal", help="sets [materials] metal")

    s = sub.add_parser("predict-q", parents=[common], formatter_class=fmt,
                       help="predict Q_m curves from an eta map and loss models",
                       epilog=_keys_help("run", "predict-q")
                       + "\n  [qpiezo] / [qmetal]: inline loss model, same keys as a loss-model file")
    s.add_argument("--eta-map", dest="eta_map_predict", help="sets [predict-q] eta_map")
    s.add_argument("--loss-model", dest="loss_model", help="sets [predict-q] loss_model")

    s = sub.add_parser("extract-q", parents=[common], formatter_class=fmt,
                       help="extract f_s, Q_3dB and mBVD parameters from traces",
                       epilog=_keys_help("run", "extract-q"))
    s.add_argument("inputs", nargs="*", help="trace files or directories (sets [extract-q] inputs)")
    s.add_argument("--geometry", help="sets [extract-q] geometry")

    s = sub.add_parser("fit", parents=[common], formatter_class=fmt,
                       help="fit loss-model parameters to measured records",
                       epilog=_keys_help("run", "fit"))
    s.add_argument("--records", help="sets [fit] records")
    s.add_argument("--eta-map", dest="eta_map_fit", help="sets [fit] eta_map")
    s.add_argument("--family", choices=["both", *FAMILIES], help="sets [fit] family")
    s.add_argument("--objective", choices=["least-squares", "upper-envelope"],
                   help="sets [fit] objective")

    sub.add_parser("selftest", parents=[common], formatter_class=fmt,
                   help="run the analytic oracle checks",
                   epilog=f"environment: {TOL_ENV} multiplies every tolerance (default 1)")
    return p


COMMANDS = {"eta-map": cmd_eta_map, "predict-q": cmd_predict_q, "extract-q": cmd_extract_q,
            "fit": cmd_fit, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except VALIDATION_ERRORS as exc:
        print(f"piezoq {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"piezoq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Loss-model parameter estimation from multifrequency resonance records."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dispersion import EtaMap, device_to_coords, interp_eta
from .lossmodel import (
    NiPowerLaw,
    QmetalConstantFQ,
    QpiezoConstant,
    QpiezoWithNi,
    q_m,
    q_metal_at,
    q_piezo_at,
)
from .lsq import damped_least_squares, numerical_jacobian


class FitError(RuntimeError):
    pass


class UnderdeterminedError(FitError):
    pass


FAMILIES = {
    "constant-Qpiezo": ("q_piezo", "fq"),
    "constant-plus-Qni": ("q_piezo", "fq", "ni_q_ref", "ni_exponent"),
}
LOG_PARAMS = {"q_piezo", "fq", "ni_q_ref"}
DEFAULT_BOUNDS = {
    "q_piezo": (1.0, 1e8),
    "fq": (1e6, 1e17),
    "ni_q_ref": (1.0, 1e8),
    "ni_exponent": (-4.0, 4.0),
}


@dataclass(frozen=True)
class FitSpec:
    family: str = "constant-Qpiezo"
    free: Optional[tuple] = None           # default: every parameter of the family
    fixed: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    objective: str = "least-squares"       # or "upper-envelope"
    envelope_bins: int = 8
    residual_scale: str = "log"            # or "linear"
    ni_f_ref: Optional[float] = None       # default: geometric mean of record frequencies
    restarts: int = 8
    seed: int = 0
    clamp: bool = False
    max_iter: int = 200

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; choose from {sorted(FAMILIES)}")
        names = FAMILIES[self.family]
        free = tuple(self.free) if self.free is not None else tuple(n for n in names if n not in self.fixed)
        unknown = [n for n in free + tuple(self.fixed) if n not in names]
        if unknown:
            raise ValueError(f"parameters {unknown} do not belong to family {self.family}")
        missing = [n for n in names if n not in free and n not in self.fixed]
        if missing:
            raise ValueError(f"parameters {missing} are neither free nor fixed")
        if not free:
            raise ValueError("no free parameters")
        object.__setattr__(self, "free", free)
        for n in free:
            lo, hi = self.bounds_for(n)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bounds for {n} must be finite and ordered, got ({lo}, {hi})")
            if n in LOG_PARAMS and lo <= 0:
                raise ValueError(f"lower bound for {n} must be positive")
        if self.objective not in ("least-squares", "upper-envelope"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "upper-envelope" and self.envelope_bins < 2:
            raise ValueError("envelope needs at least 2 bins")
        if self.residual_scale not in ("log", "linear"):
            raise ValueError(f"unknown residual scale {self.residual_scale!r}")
        if not 1 <= self.restarts <= 8:
            raise ValueError("restarts must be between 1 and 8")

    def bounds_for(self, name):
        return tuple(float(v) for v in self.bounds.get(name, DEFAULT_BOUNDS[name]))


@dataclass
class FitResult:
    family: str
    objective: str
    residual_scale: str
    params: dict
    uncertainties: dict
    residual_norm: float
    residuals: np.ndarray
    records: list
    etas: np.ndarray
    initial_params: dict
    initial_cost: float
    cost: float
    converged: bool
    message: str
    iterations: int
    restart: int
    ni_f_ref: Optional[float] = None

    def models(self):
        p = self.params
        metal = QmetalConstantFQ(p["fq"])
        if self.family == "constant-Qpiezo":
            return QpiezoConstant(p["q_piezo"]), metal
        ni = NiPowerLaw(p["ni_q_ref"], self.ni_f_ref, p["ni_exponent"])
        return QpiezoWithNi(p["q_piezo"], ni), metal

    def predict(self, eta: float, f: float, tm_over_lambda=None) -> float:
        qp, qm = self.models()
        return q_m(eta, q_piezo_at(qp, f, tm_over_lambda), q_metal_at(qm, f))


def _sort_key(r):
    return (r.f_s, r.device_id, r.Q_m)


def envelope(records, nbins: int):
    """Highest-Q_m record per bin, bins uniform in log f (h/lambda when f is unknown)."""
    records = list(records)
    if not records:
        raise FitError("envelope of an empty record set")
    if nbins < 2:
        raise ValueError("nbins must be >= 2")
    if all(r.f_s is not None and r.f_s > 0 for r in records):
        axis = np.log([r.f_s for r in records])
    else:
        if any(r.geometry is None for r in records):
            raise FitError("records need frequency or geometry for envelope binning")
        axis = np.array([device_to_coords(r.geometry)[0] for r in records])
    lo, hi = axis.min(), axis.max()
    if hi == lo:
        bins = np.zeros(len(records), dtype=int)
    else:
        bins = np.minimum(((axis - lo) / (hi - lo) * nbins).astype(int), nbins - 1)
    best = {}
    for b, r in zip(bins, records):
        cur = best.get(b)
        if cur is None or (r.Q_m, -r.f_s, r.device_id) > (cur.Q_m, -cur.f_s, cur.device_id):
            best[b] = r
    return sorted(best.values(), key=_sort_key)


def record_etas(records, emap: EtaMap, clamp: bool = False):
    etas, flags = [], []
    for r in records:
        if r.geometry is None:
            raise FitError(f"record {r.device_id} has no geometry")
        hl, tmh, _ = device_to_coords(r.geometry)
        flags.append("" if emap.contains(hl, tmh) else "clamped")
        etas.append(interp_eta(emap, hl, tmh, clamp=clamp))
    return np.array(etas), flags


class _Problem:
    def __init__(self, spec: FitSpec, records, etas, f_ref):
        self.spec = spec
        self.names = FAMILIES[spec.family]
        self.free = spec.free
        self.f = np.array([r.f_s for r in records])
        self.q = np.array([r.Q_m for r in records])
        self.tml = [device_to_coords(r.geometry)[2] for r in records]
        self.etas = etas
        self.f_ref = f_ref

    def to_x(self, params):
        return np.array([math.log(params[n]) if n in LOG_PARAMS else params[n] for n in self.free])

    def to_params(self, x):
        p = dict(self.spec.fixed)
        for n, v in zip(self.free, x):
            p[n] = math.exp(v) if n in LOG_PARAMS else float(v)
        return p

    def bounds(self):
        lo, hi = [], []
        for n in self.free:
            a, b = self.spec.bounds_for(n)
            if n in LOG_PARAMS:
                a, b = math.log(a), math.log(b)
            lo.append(a)
            hi.append(b)
        return np.array(lo), np.array(hi)

    def predict(self, params):
        qp_inv = 1.0 / params["q_piezo"]
        if self.spec.family == "constant-plus-Qni":
            qni = params["ni_q_ref"] * (self.f_ref / self.f) ** params["ni_exponent"]
            qp_inv = qp_inv + 1.0 / qni
        qmetal_inv = self.f / params["fq"]
        return 1.0 / (self.etas * qp_inv + (1.0 - self.etas) * qmetal_inv)

    def residuals(self, x):
        pred = self.predict(self.to_params(x))
        if self.spec.residual_scale == "log":
            return np.log(self.q / pred)
        return self.q - pred


def initial_params(spec: FitSpec, records, f_ref) -> dict:
    q = np.array([r.Q_m for r in records])
    f = np.array([r.f_s for r in records])
    guess = {"q_piezo": float(q.max()), "fq": float(np.median(q * f)),
             "ni_q_ref": float(q.max()), "ni_exponent": 1.0}
    out = dict(spec.fixed)
    for n in spec.free:
        lo, hi = spec.bounds_for(n)
        out[n] = min(max(guess[n], lo), hi)
    return out


def fit_losses(records, emap: EtaMap, spec: FitSpec = FitSpec()) -> FitResult:
    """Damped least squares over the free loss parameters, with seeded restarts."""
    records = sorted(records, key=_sort_key)
    if not records:
        raise FitError("no records to fit")
    if spec.objective == "upper-envelope":
        records = envelope(records, spec.envelope_bins)
    n_free = len(spec.free)
    if len(records) < n_free:
        raise UnderdeterminedError(
            f"{len(records)} record(s) cannot determine {n_free} free parameter(s)")
    etas, _ = record_etas(records, emap, spec.clamp)
    f_ref = spec.ni_f_ref or float(np.exp(np.mean(np.log([r.f_s for r in records]))))
    prob = _Problem(spec, records, etas, f_ref)

    p0 = initial_params(spec, records, f_ref)
    x0 = prob.to_x(p0)
    lower, upper = prob.bounds()
    jac0 = numerical_jacobian(prob.residuals, x0, rel_step=1e-6, central=True)
    sv = np.linalg.svd(jac0, compute_uv=False)
    rank = int(np.sum(sv > 1e-6 * sv.max())) if sv.size and sv.max() > 0 else 0
    if rank < n_free:
        raise UnderdeterminedError(
            f"free parameters {list(spec.free)} are not identifiable from these records "
            f"(Jacobian rank {rank} < {n_free}); add records spanning more frequencies/geometries "
            "or fix a parameter")
    r0 = prob.residuals(x0)
    cost0 = 0.5 * float(r0 @ r0)

    rng = np.random.default_rng(spec.seed)
    starts = [x0]
    for _ in range(spec.restarts - 1):
        jitter = np.array([rng.normal(0.0, 1.0) if n in LOG_PARAMS else rng.normal(0.0, 0.5)
                           for n in spec.free])
        starts.append(np.clip(x0 + jitter, lower, upper))

    best, best_k = None, -1
    for k, xs in enumerate(starts):
        try:
            res = damped_least_squares(prob.residuals, xs, lower, upper, max_iter=spec.max_iter,
                                       central=True, rel_step=1e-6)
        except Exception:
            continue
        if best is None or res.cost < best.cost * (1 - 1e-12):
            best, best_k = res, k
    if best is None:
        raise FitError("every restart failed")
    if best.cost > cost0:
        raise FitError("fit ended above its starting objective")

    params = prob.to_params(best.x)
    try:
        cov = best.covariance()
    except np.linalg.LinAlgError:
        raise FitError("normal matrix could not be factorised at the solution") from None
    sig = np.sqrt(np.clip(np.diag(cov), 0, None))
    unc = {}
    for n, s in zip(spec.free, sig):
        unc[n] = float(params[n] * s) if n in LOG_PARAMS else float(s)
    message = best.message
    weak = [n for n in spec.free if not math.isfinite(unc[n])]
    if weak:
        message += f"; normal matrix singular at the solution, {', '.join(weak)} unidentified"
    return FitResult(
        family=spec.family, objective=spec.objective, residual_scale=spec.residual_scale,
        params=params, uncertainties=unc, residual_norm=best.residual_norm,
        residuals=best.residuals, records=records, etas=etas, initial_params=p0,
        initial_cost=cost0, cost=best.cost, converged=best.converged, message=message,
        iterations=best.n_iter, restart=best_k,
        ni_f_ref=f_ref if spec.family == "constant-plus-Qni" else None)


def residual_report(result: FitResult, records, emap: EtaMap, clamp: bool = False) -> list[dict]:
    """Per-record measured vs predicted Q_m with the eta used."""
    rows = []
    for r in sorted(records, key=_sort_key):
        row = {"device_id": r.device_id, "f_s_Hz": r.f_s, "Q_m_measured": r.Q_m,
               "Q_m_predicted": None, "residual": None, "eta": None, "flag": ""}
        if r.geometry is None:
            row["flag"] = "no-geometry"
            rows.append(row)
            continue
        hl, tmh, tml = device_to_coords(r.geometry)
        inside = emap.contains(hl, tmh)
        if not inside and not clamp:
            row["flag"] = "outside-map"
            rows.append(row)
            continue
        eta = interp_eta(emap, hl, tmh, clamp=clamp)
        pred = result.predict(eta, r.f_s, tml)
        resid = (math.log(r.Q_m / pred) if result.residual_scale == "log" else r.Q_m - pred)
        row.update(Q_m_predicted=pred, residual=resid, eta=eta, flag="" if inside else "clamped")
        rows.append(row)
    return rows

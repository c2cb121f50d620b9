"""Loss budgets and the energy-weighted mechanical quality factor.

Piezoelectric-medium losses add in series (reciprocals sum); the metal is
described by a constant f*Q product or a fixed Q; the two meet through the
energy confinement eta::

    1/Q_m = eta / Q_piezo + (1 - eta) / Q_metal
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .dispersion import DeviceGeometry, EtaMap, device_to_coords, interp_eta


class LossModelError(ValueError):
    pass


def _positive(name, value):
    try:
        ok = math.isfinite(value) and value > 0
    except TypeError:
        ok = False
    if not ok:
        raise LossModelError(f"{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class LossBudget:
    """Named loss channels; ``None`` means the channel does not contribute."""

    Q_pp: Optional[float] = None
    Q_anchor: Optional[float] = None
    Q_air: Optional[float] = None
    Q_ni: Optional[float] = None
    Q_TED: Optional[float] = None
    Q_ep: Optional[float] = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                _positive(f.name, v)

    def present(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


def series_q(budget: Union[LossBudget, dict, list, tuple]) -> float:
    """Combine loss channels: 1/Q = sum(1/Q_i) over the present channels."""
    if isinstance(budget, LossBudget):
        values = list(budget.present().values())
    elif isinstance(budget, dict):
        values = [v for v in budget.values() if v is not None]
    else:
        values = [v for v in budget if v is not None]
    if not values:
        raise LossModelError("loss budget has no components")
    for v in values:
        _positive("Q component", v)
    return 1.0 / math.fsum(1.0 / v for v in values)


# ---------------------------------------------------------------- Q_ni

@dataclass(frozen=True)
class NiConstant:
    q: float

    def __post_init__(self):
        _positive("Q_ni", self.q)

    def at(self, f: float) -> float:
        return self.q


@dataclass(frozen=True)
class NiPowerLaw:
    """Q_ni(f) = q_ref * (f_ref / f) ** exponent."""

    q_ref: float
    f_ref: float
    exponent: float = 1.0

    def __post_init__(self):
        _positive("Q_ni reference", self.q_ref)
        _positive("Q_ni reference frequency", self.f_ref)
        if not math.isfinite(self.exponent):
            raise LossModelError("Q_ni exponent must be finite")

    def at(self, f: float) -> float:
        return self.q_ref * (self.f_ref / f) ** self.exponent


NiModel = Union[NiConstant, NiPowerLaw]


# ---------------------------------------------------------------- Q_piezo

@dataclass(frozen=True)
class QpiezoConstant:
    q0: float

    def __post_init__(self):
        _positive("Q_piezo", self.q0)


@dataclass(frozen=True)
class QpiezoWithNi:
    q0: float
    ni: NiModel

    def __post_init__(self):
        _positive("Q_piezo", self.q0)


@dataclass(frozen=True)
class QpiezoTable:
    """Q_piezo tabulated against t_m/lambda, linearly interpolated."""

    tm_over_lambda: tuple
    q: tuple

    def __post_init__(self):
        x = np.asarray(self.tm_over_lambda, dtype=float)
        y = np.asarray(self.q, dtype=float)
        if x.ndim != 1 or x.size < 2 or x.shape != y.shape:
            raise LossModelError("Q_piezo table needs matching 1-D grids with >= 2 points")
        if np.any(np.diff(x) <= 0):
            raise LossModelError("Q_piezo table grid must be strictly increasing")
        if not np.all(np.isfinite(y)) or np.any(y <= 0):
            raise LossModelError("Q_piezo table values must be positive")
        object.__setattr__(self, "tm_over_lambda", tuple(float(v) for v in x))
        object.__setattr__(self, "q", tuple(float(v) for v in y))


QpiezoModel = Union[QpiezoConstant, QpiezoWithNi, QpiezoTable]


@dataclass(frozen=True)
class QmetalConstantFQ:
    fq: float   # Hz

    def __post_init__(self):
        _positive("f*Q product", self.fq)


@dataclass(frozen=True)
class QmetalConstant:
    q: float

    def __post_init__(self):
        _positive("Q_metal", self.q)


QmetalModel = Union[QmetalConstantFQ, QmetalConstant]


def _check_freq(f):
    if not (math.isfinite(f) and f > 0):
        raise LossModelError(f"frequency must be positive, got {f!r}")


def q_metal_at(model: QmetalModel, f: float) -> float:
    _check_freq(f)
    if isinstance(model, QmetalConstantFQ):
        return model.fq / f
    if isinstance(model, QmetalConstant):
        return model.q
    raise TypeError(f"not a metal loss model: {model!r}")


def q_piezo_at(model: QpiezoModel, f: float, tm_over_lambda: Optional[float] = None) -> float:
    if isinstance(model, QpiezoConstant):
        return model.q0
    if isinstance(model, QpiezoWithNi):
        _check_freq(f)
        return series_q([model.q0, model.ni.at(f)])
    if isinstance(model, QpiezoTable):
        if tm_over_lambda is None:
            raise LossModelError("table Q_piezo needs t_m/lambda")
        lo, hi = model.tm_over_lambda[0], model.tm_over_lambda[-1]
        if not lo <= tm_over_lambda <= hi:
            raise LossModelError(f"t_m/lambda={tm_over_lambda:.6g} outside table [{lo:.6g}, {hi:.6g}]")
        return float(np.interp(tm_over_lambda, model.tm_over_lambda, model.q))
    raise TypeError(f"not a piezo loss model: {model!r}")


def q_m(eta: float, q_piezo: float, q_metal: float) -> float:
    if not 0.0 <= eta <= 1.0:
        raise LossModelError(f"eta must lie in [0, 1], got {eta!r}")
    _positive("Q_piezo", q_piezo)
    _positive("Q_metal", q_metal)
    return 1.0 / (eta / q_piezo + (1.0 - eta) / q_metal)


def predict_qm(dev: DeviceGeometry, emap: EtaMap, qp: QpiezoModel, qm: QmetalModel,
               f: float, clamp: bool = False) -> float:
    hl, tmh, tml = device_to_coords(dev)
    eta = interp_eta(emap, hl, tmh, clamp=clamp)
    return q_m(eta, q_piezo_at(qp, f, tml), q_metal_at(qm, f))


# ---------------------------------------------------------------- description files

def parse_loss_config(cfg: configparser.ConfigParser, base_dir: Path = Path(".")):
    """Build (QpiezoModel, QmetalModel) from ``[qpiezo]`` and ``[qmetal]`` sections.

    ``[qpiezo] kind`` is ``constant`` (``q0``), ``constant_with_ni`` (``q0`` plus
    ``ni_kind = constant`` with ``ni_q``, or ``ni_kind = power_law`` with
    ``ni_q_ref``, ``ni_f_ref_hz``, ``ni_exponent``) or ``table`` (``table`` =
    path to a two-column CSV ``tm_over_lambda,q``).
    ``[qmetal] kind`` is ``constant_fq`` (``fq_hz``) or ``constant`` (``q``).
    """
    try:
        sp, sm = cfg["qpiezo"], cfg["qmetal"]
    except KeyError as exc:
        raise LossModelError(f"loss model needs section {exc}") from None

    def num(sec, key):
        try:
            return float(sec[key])
        except KeyError:
            raise LossModelError(f"[{sec.name}] missing key {key!r}") from None
        except ValueError as exc:
            raise LossModelError(f"[{sec.name}] {key}: {exc}") from None

    kind = sp.get("kind", "constant").strip()
    if kind == "constant":
        qp = QpiezoConstant(num(sp, "q0"))
    elif kind == "constant_with_ni":
        ni_kind = sp.get("ni_kind", "constant").strip()
        if ni_kind == "constant":
            ni = NiConstant(num(sp, "ni_q"))
        elif ni_kind == "power_law":
            ni = NiPowerLaw(num(sp, "ni_q_ref"), num(sp, "ni_f_ref_hz"), num(sp, "ni_exponent"))
        else:
            raise LossModelError(f"unknown ni_kind {ni_kind!r}")
        qp = QpiezoWithNi(num(sp, "q0"), ni)
    elif kind == "table":
        path = base_dir / sp["table"]
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        qp = QpiezoTable(tuple(data[:, 0]), tuple(data[:, 1]))
    else:
        raise LossModelError(f"unknown [qpiezo] kind {kind!r}")

    mkind = sm.get("kind", "constant_fq").strip()
    if mkind == "constant_fq":
        qm = QmetalConstantFQ(num(sm, "fq_hz"))
    elif mkind == "constant":
        qm = QmetalConstant(num(sm, "q"))
    else:
        raise LossModelError(f"unknown [qmetal] kind {mkind!r}")
    return qp, qm


def load_loss_model(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"loss model file not found: {path}")
    cfg = configparser.ConfigParser()
    cfg.read(path)
    return parse_loss_config(cfg, path.parent)

import configparser

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piezoq.dispersion import DeviceGeometry, EtaMap, constant_map
from piezoq.lossmodel import (
    LossBudget,
    LossModelError,
    NiConstant,
    NiPowerLaw,
    QmetalConstant,
    QmetalConstantFQ,
    QpiezoConstant,
    QpiezoTable,
    QpiezoWithNi,
    load_loss_model,
    parse_loss_config,
    predict_qm,
    q_m,
    q_metal_at,
    q_piezo_at,
    series_q,
)

qs = st.floats(1.0, 1e6)
etas = st.floats(0.0, 1.0)


# ---------------------------------------------------------------- series budget


def test_series_single():
    assert series_q(LossBudget(Q_pp=2000)) == 2000


def test_series_equal_pair():
    assert series_q([1000, 1000]) == 500


def test_series_hand_value():
    assert series_q({"a": 2000, "b": 3000}) == pytest.approx(1200, rel=1e-15)


def test_series_empty():
    with pytest.raises(LossModelError):
        series_q(LossBudget())


def test_budget_rejects_nonpositive():
    with pytest.raises(LossModelError):
        LossBudget(Q_air=0)
    with pytest.raises(LossModelError):
        LossBudget(Q_ep=float("inf"))


def test_budget_present_channels():
    assert LossBudget(Q_pp=10, Q_TED=20).present() == {"Q_pp": 10, "Q_TED": 20}


@settings(max_examples=200)
@given(st.lists(qs, min_size=1, max_size=6), qs)
def test_series_below_min_and_monotone(values, extra):
    q = series_q(values)
    assert q <= min(values) * (1 + 1e-12)
    assert series_q(values + [extra]) <= q * (1 + 1e-12)


# ---------------------------------------------------------------- metal


def test_fq_al():
    assert q_metal_at(QmetalConstantFQ(1.3e12), 13e9) == 100.0


def test_fq_au():
    assert q_metal_at(QmetalConstantFQ(0.5e12), 500e6) == 1000.0


def test_constant_metal():
    assert q_metal_at(QmetalConstant(200), 3.7e9) == 200


@settings(max_examples=200)
@given(st.floats(1e3, 1e12))
def test_fq_product_exact(f):
    fq = 1.3e12
    assert q_metal_at(QmetalConstantFQ(fq), f) * f == pytest.approx(fq, rel=1e-15)


@pytest.mark.parametrize("f", [0.0, -1.0, float("nan")])
def test_metal_bad_frequency(f):
    with pytest.raises(LossModelError):
        q_metal_at(QmetalConstantFQ(1e12), f)


# ---------------------------------------------------------------- piezo


def test_piezo_constant():
    assert q_piezo_at(QpiezoConstant(2000), 123e6) == 2000


def test_piezo_with_constant_ni():
    assert q_piezo_at(QpiezoWithNi(2000, NiConstant(2000)), 5e9) == 1000


def test_piezo_with_power_law_ni():
    model = QpiezoWithNi(2000, NiPowerLaw(2000, 1e9, 1.0))
    assert q_piezo_at(model, 2e9) == pytest.approx(2000 / 3, rel=1e-12)


def test_piezo_table():
    t = QpiezoTable((0.0, 0.02, 0.04), (3000, 1000, 500))
    assert q_piezo_at(t, 1e9, 0.01) == pytest.approx(2000)
    assert q_piezo_at(t, 1e9, 0.04) == 500
    with pytest.raises(LossModelError, match="outside"):
        q_piezo_at(t, 1e9, 0.05)
    with pytest.raises(LossModelError, match="needs"):
        q_piezo_at(t, 1e9)


def test_table_validation():
    with pytest.raises(LossModelError):
        QpiezoTable((0.0, 0.0), (1, 2))
    with pytest.raises(LossModelError):
        QpiezoTable((0.0, 0.1), (1, -2))
    with pytest.raises(LossModelError):
        QpiezoTable((0.0,), (1,))


# ---------------------------------------------------------------- combination


def test_qm_endpoints():
    assert q_m(1.0, 2000, 200) == 2000
    assert q_m(0.0, 2000, 200) == 200


def test_qm_hand_value():
    assert q_m(0.9, 2000, 200) == pytest.approx(1 / (0.9 / 2000 + 0.1 / 200), rel=1e-15)
    assert q_m(0.9, 2000, 200) == pytest.approx(1052.63, abs=0.01)


@pytest.mark.parametrize("eta", [-0.1, 1.1, float("nan")])
def test_qm_bad_eta(eta):
    with pytest.raises(LossModelError):
        q_m(eta, 2000, 200)


@settings(max_examples=300)
@given(etas, qs, qs)
def test_qm_bounded(eta, qp, qmet):
    v = q_m(eta, qp, qmet)
    assert min(qp, qmet) * (1 - 1e-12) <= v <= max(qp, qmet) * (1 + 1e-12)


@settings(max_examples=100)
@given(qs, qs)
def test_qm_monotone_in_eta(qp, qmet):
    grid = np.linspace(0, 1, 201)
    vals = np.array([q_m(e, qp, qmet) for e in grid])
    d = np.diff(vals)
    tol = 1e-12 * max(qp, qmet)
    if qp > qmet:
        assert np.all(d >= -tol)
    elif qp < qmet:
        assert np.all(d <= tol)


@settings(max_examples=100)
@given(etas, qs)
def test_qm_degenerate(eta, q):
    assert q_m(eta, q, q) == pytest.approx(q, rel=1e-12)


# ---------------------------------------------------------------- prediction


DEV = DeviceGeometry(10e-6, 1e-6, 0.2e-6)


def test_predict_eta_one():
    assert predict_qm(DEV, constant_map(1.0), QpiezoConstant(2000), QmetalConstant(5), 1e9) == 2000


def test_predict_eta_zero():
    assert predict_qm(DEV, constant_map(0.0), QpiezoConstant(2000), QmetalConstantFQ(1e12), 1e9) == 1000


def test_predict_hand_composition():
    m = EtaMap([0.0, 1.0], [0.0, 1.0], np.full((2, 2), 0.8))
    got = predict_qm(DEV, m, QpiezoConstant(2000), QmetalConstantFQ(0.5e12), 500e6)
    assert got == pytest.approx(1 / (0.8 / 2000 + 0.2 / 1000), rel=1e-12)
    assert got == pytest.approx(1666.67, abs=0.01)


def test_predict_outside_map():
    m = EtaMap([0.0, 0.05], [0.0, 1.0], np.full((2, 2), 0.8))
    with pytest.raises(ValueError):
        predict_qm(DEV, m, QpiezoConstant(2000), QmetalConstant(200), 1e9)
    assert predict_qm(DEV, m, QpiezoConstant(2000), QmetalConstant(200), 1e9, clamp=True) > 0


def test_predict_table_uses_tm_over_lambda():
    t = QpiezoTable((0.0, 0.04), (3000, 1000))
    got = predict_qm(DEV, constant_map(1.0), t, QmetalConstant(1), 1e9)   # t_m/lambda = 0.02
    assert got == pytest.approx(2000)


# ---------------------------------------------------------------- description files


def _cfg(text):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    return cp


def test_config_constant():
    qp, qm = parse_loss_config(_cfg("[qpiezo]\nkind = constant\nq0 = 2000\n[qmetal]\nkind = constant\nq = 200\n"))
    assert qp == QpiezoConstant(2000) and qm == QmetalConstant(200)


def test_config_power_law():
    qp, qm = parse_loss_config(_cfg(
        "[qpiezo]\nkind = constant_with_ni\nq0 = 2000\nni_kind = power_law\nni_q_ref = 3000\n"
        "ni_f_ref_hz = 1e9\nni_exponent = 0.5\n[qmetal]\nfq_hz = 1.3e12\n"))
    assert qp == QpiezoWithNi(2000, NiPowerLaw(3000, 1e9, 0.5))
    assert qm == QmetalConstantFQ(1.3e12)


def test_config_table(tmp_path):
    (tmp_path / "t.csv").write_text("# tm_over_lambda,q\n0.0,3000\n0.05,800\n")
    (tmp_path / "loss.ini").write_text("[qpiezo]\nkind = table\ntable = t.csv\n[qmetal]\nkind = constant\nq = 100\n")
    qp, _ = load_loss_model(tmp_path / "loss.ini")
    assert qp.q == (3000.0, 800.0)


@pytest.mark.parametrize("text,msg", [
    ("[qpiezo]\nq0 = 1\n", "section"),
    ("[qpiezo]\nkind = magic\n[qmetal]\nq = 1\n", "kind"),
    ("[qpiezo]\nkind = constant\n[qmetal]\nkind = constant\nq = 1\n", "q0"),
    ("[qpiezo]\nq0 = abc\n[qmetal]\nkind = constant\nq = 1\n", "q0"),
    ("[qpiezo]\nq0 = 1\n[qmetal]\nkind = weird\n", "kind"),
    ("[qpiezo]\nkind = constant_with_ni\nq0 = 1\nni_kind = exp\n[qmetal]\nq = 1\nkind = constant\n", "ni_kind"),
    ("[qpiezo]\nq0 = -5\n[qmetal]\nkind = constant\nq = 1\n", "positive"),
])
def test_config_errors(text, msg):
    with pytest.raises(LossModelError, match=msg):
        parse_loss_config(_cfg(text))


def test_missing_loss_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_loss_model(tmp_path / "none.ini")

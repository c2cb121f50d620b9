import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from piezoq.cli import KEYS, main, selftest_checks
from piezoq.dispersion import constant_map, export_eta_map, import_eta_map
from piezoq.measure import MbvdParams, export_records, synthesize_trace, write_trace_csv

from synth import FQ, Q_PIEZO, analytic_map, synthetic_records

SMALL = """\
[run]
output_dir = out
seed = 0
[eta-map]
h_over_lambda = 0.1,0.3
tm_over_h = 0,0.2
mesh_nx = 8
mesh_nz_film = 2
mesh_nz_metal = 2
n_modes = 4
selector = y
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(SMALL)
    return p


# ---------------------------------------------------------------- eta-map


def test_eta_map_command(small_cfg, capsys):
    assert main(["eta-map", "-c", str(small_cfg), "--threads", "2"]) == 0
    out = small_cfg.parent / "out"
    m = import_eta_map(out / "eta_map.csv")
    assert np.all(np.abs(m.values[:, 0] - 1.0) <= 1e-9)
    assert np.all(m.values[:, 1] < 1.0)
    ET.parse(out / "eta_map.svg")
    assert "2x2 points" in capsys.readouterr().out


def test_eta_map_byte_identical(small_cfg):
    out = small_cfg.parent / "out"
    assert main(["eta-map", "-c", str(small_cfg), "--threads", "1"]) == 0
    first = (out / "eta_map.csv").read_bytes()
    assert main(["eta-map", "-c", str(small_cfg), "--threads", "3"]) == 0
    assert (out / "eta_map.csv").read_bytes() == first


def test_missing_material_is_config_error(small_cfg, capsys):
    rc = main(["eta-map", "-c", str(small_cfg), "--piezo", "no_such.mat"])
    assert rc == 2
    assert "no_such.mat" in capsys.readouterr().err


def test_placeholder_material_is_config_error(small_cfg, capsys):
    assert main(["eta-map", "-c", str(small_cfg), "--piezo", "LiNbO3"]) == 2
    assert "placeholder" in capsys.readouterr().err


@pytest.mark.parametrize("setting", [
    "eta-map.selector=diagonal",
    "eta-map.mesh_nx=abc",
    "eta-map.velocity_window_m_s=5",
    "eta-map.bogus=1",
    "nosuch.key=1",
    "eta-map.h_over_lambda=",
])
def test_bad_eta_map_config(small_cfg, setting):
    assert main(["eta-map", "-c", str(small_cfg), "--set", setting]) == 2


def test_missing_config_file(tmp_path):
    assert main(["eta-map", "-c", str(tmp_path / "none.ini")]) == 2


def test_help_lists_keys(capsys):
    with pytest.raises(SystemExit):
        main(["fit", "--help"])
    text = capsys.readouterr().out
    for key in KEYS["fit"]:
        assert key in text


# ---------------------------------------------------------------- predict-q


PREDICT = """\
[run]
output_dir = out
[predict-q]
eta_map = map.csv
[qpiezo]
kind = constant
q0 = 2000
[qmetal]
kind = constant
q = 200
"""


def test_predict_q_bounds(tmp_path):
    export_eta_map(analytic_map(), tmp_path / "map.csv")
    (tmp_path / "p.ini").write_text(PREDICT)
    assert main(["predict-q", "-c", str(tmp_path / "p.ini")]) == 0
    rows = read_csv(tmp_path / "out" / "predicted_qm.csv")
    q = np.array([float(r["Q_m"]) for r in rows])
    assert np.all((q >= 200) & (q <= 2000))
    bare = [float(r["Q_m"]) for r in rows if float(r["tm_over_h"]) == 0.0]
    assert np.allclose(bare, 2000.0, rtol=1e-12)
    assert rows[0]["frequency_Hz"] == ""
    ET.parse(tmp_path / "out" / "predicted_qm.svg")


def test_predict_q_flat_map(tmp_path):
    export_eta_map(constant_map(1.0), tmp_path / "map.csv")
    (tmp_path / "p.ini").write_text(PREDICT)
    assert main(["predict-q", "-c", str(tmp_path / "p.ini")]) == 0
    q = [float(r["Q_m"]) for r in read_csv(tmp_path / "out" / "predicted_qm.csv")]
    assert q == [2000.0] * len(q)


def test_predict_q_fq_needs_frequency(tmp_path):
    export_eta_map(analytic_map(), tmp_path / "map.csv")
    (tmp_path / "p.ini").write_text(PREDICT.replace("kind = constant\nq = 200", "fq_hz = 1.3e12"))
    assert main(["predict-q", "-c", str(tmp_path / "p.ini")]) == 2
    assert main(["predict-q", "-c", str(tmp_path / "p.ini"), "--set", "predict-q.frequency_hz=13e9"]) == 0
    rows = read_csv(tmp_path / "out" / "predicted_qm.csv")
    assert {float(r["Q_metal"]) for r in rows} == {100.0}


def test_predict_q_empty_map(tmp_path):
    (tmp_path / "map.csv").write_text("h_over_lambda,tm_over_h,eta\n")
    (tmp_path / "p.ini").write_text(PREDICT)
    assert main(["predict-q", "-c", str(tmp_path / "p.ini")]) == 2


def test_predict_q_all_gaps(tmp_path):
    (tmp_path / "map.csv").write_text("h_over_lambda,tm_over_h,eta\n0.1,0.0,\n0.2,0.0,\n")
    (tmp_path / "p.ini").write_text(PREDICT)
    assert main(["predict-q", "-c", str(tmp_path / "p.ini")]) == 1


# ---------------------------------------------------------------- extract-q


TRUTHS = [MbvdParams(Rm=100.0, Lm=25.33e-6, Cm=1e-15, C0=20e-15, Rs=5.0),
          MbvdParams(Rm=40.0, Lm=12.0e-6, Cm=1e-15, C0=15e-15, Rs=2.0),
          MbvdParams(Rm=80.0, Lm=50.0e-6, Cm=1e-15, C0=25e-15, Rs=1.0)]


def test_extract_q(tmp_path, capsys):
    tdir = tmp_path / "traces"
    tdir.mkdir()
    for k, p in enumerate(TRUTHS):
        f = np.linspace(0.9 * p.f_s, 1.1 * p.f_s, 1501)
        write_trace_csv(synthesize_trace(p, f), tdir / f"dev{k}.csv")
    f = np.linspace(0.95e9, 1.01e9, 400)          # no antiresonance inside the span
    write_trace_csv(synthesize_trace(TRUTHS[0], f), tdir / "bad.csv")
    (tmp_path / "geom.csv").write_text("device_id,lambda_m,h_m,tm_m\ndev0,1e-5,1e-6,1e-7\n")
    rc = main(["extract-q", str(tdir), "--geometry", str(tmp_path / "geom.csv"),
               "-o", str(tmp_path / "out")])
    assert rc == 0
    rows = read_csv(tmp_path / "out" / "records.csv")
    assert [r["device_id"] for r in rows] == ["dev0", "dev1", "dev2"]
    for row, p in zip(rows, TRUTHS):
        ws = 1 / np.sqrt(p.Lm * p.Cm)
        assert float(row["Q_m"]) == pytest.approx(ws * p.Lm / p.Rm, rel=1e-3)
    assert float(rows[0]["h_over_lambda"]) == pytest.approx(0.1, rel=1e-15) and rows[1]["h_over_lambda"] == ""
    errors = read_csv(tmp_path / "out" / "extract_errors.csv")
    assert len(errors) == 1 and "bad.csv" in errors[0]["file"]
    assert "3 of 4" in capsys.readouterr().out


def test_extract_q_all_fail(tmp_path):
    f = np.linspace(0.95e9, 1.01e9, 400)
    write_trace_csv(synthesize_trace(TRUTHS[0], f), tmp_path / "bad.csv")
    assert main(["extract-q", str(tmp_path / "bad.csv"), "-o", str(tmp_path / "out")]) == 1


def test_extract_q_no_inputs(tmp_path):
    assert main(["extract-q", "-o", str(tmp_path)]) == 2


# ---------------------------------------------------------------- fit


@pytest.fixture
def fit_dir(tmp_path):
    export_eta_map(analytic_map(), tmp_path / "map.csv")
    export_records(synthetic_records(analytic_map(), noise=0.05, seed=2), tmp_path / "records.csv")
    (tmp_path / "fit.ini").write_text(
        "[run]\noutput_dir = out\nseed = 0\n[fit]\nrecords = records.csv\neta_map = map.csv\n")
    return tmp_path


def test_fit_command(fit_dir, capsys):
    assert main(["fit", "-c", str(fit_dir / "fit.ini"), "--family", "constant-Qpiezo"]) == 0
    out = fit_dir / "out"
    summary = (out / "fit_summary.txt").read_text()
    assert "objective: least-squares (log residuals)" in summary
    assert "q_piezo = " in summary and "+/-" in summary
    assert summary == capsys.readouterr().out
    rows = read_csv(out / "fit_residuals.csv")
    assert len(rows) == 30 and all(r["flag"] == "" for r in rows)
    ET.parse(out / "fit_overlay.svg")
    assert read_csv(out / "fit_overlay.csv")[0]["series"] == "measured"


def test_fit_both_families_and_envelope(fit_dir):
    rc = main(["fit", "-c", str(fit_dir / "fit.ini"), "--objective", "upper-envelope"])
    assert rc == 0
    summary = (fit_dir / "out" / "fit_summary.txt").read_text()
    assert "family: constant-Qpiezo" in summary and "family: constant-plus-Qni" in summary
    assert "objective: upper-envelope" in summary


def test_fit_fixed_parameter(fit_dir):
    rc = main(["fit", "-c", str(fit_dir / "fit.ini"), "--family", "constant-Qpiezo",
               "--set", f"fit.fixed=fq={FQ!r}"])
    assert rc == 0
    assert "(fixed)" in (fit_dir / "out" / "fit_summary.txt").read_text()


def test_fit_underdetermined_exit_1(tmp_path):
    export_eta_map(analytic_map(), tmp_path / "map.csv")
    (tmp_path / "records.csv").write_text(
        "device_id,f_s_Hz,Q_3dB,Rs_ohm,lambda_m,h_m,tm_m\n"
        + "".join(f"d{k},1e9,{1000 + k},,4e-6,8e-7,1e-7\n" for k in range(4)))
    rc = main(["fit", "--records", str(tmp_path / "records.csv"), "--eta-map", str(tmp_path / "map.csv"),
               "--family", "constant-Qpiezo", "-o", str(tmp_path / "out")])
    assert rc == 1


def test_fit_outside_map_needs_clamp(fit_dir):
    with open(fit_dir / "records.csv", "a") as fh:
        fh.write("far,2e9,900,,1e-6,9e-7,0.0\n")
    args = ["fit", "-c", str(fit_dir / "fit.ini"), "--family", "constant-Qpiezo"]
    assert main(args) == 2
    assert main(args + ["--clamp"]) == 0
    rows = read_csv(fit_dir / "out" / "fit_residuals.csv")
    assert [r["flag"] for r in rows if r["device_id"] == "far"] == ["clamped"]


def test_fit_byte_identical_reruns(fit_dir):
    args = ["fit", "-c", str(fit_dir / "fit.ini")]
    assert main(args + ["--threads", "1"]) == 0
    a = {p.name: p.read_bytes() for p in (fit_dir / "out").iterdir()}
    assert main(args + ["--threads", "4"]) == 0
    b = {p.name: p.read_bytes() for p in (fit_dir / "out").iterdir()}
    assert a == b


def test_fit_recovers_parameters(fit_dir):
    assert main(["fit", "-c", str(fit_dir / "fit.ini"), "--family", "constant-Qpiezo"]) == 0
    text = (fit_dir / "out" / "fit_summary.txt").read_text()
    q = float(text.split("q_piezo = ")[1].split()[0])
    fq = float(text.split("fq = ")[1].split()[0])
    assert q == pytest.approx(Q_PIEZO, rel=0.1) and fq == pytest.approx(FQ, rel=0.1)


# ---------------------------------------------------------------- selftest


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == len(selftest_checks()) and "FAIL" not in out


def test_selftest_tolerance_scale(monkeypatch, capsys):
    monkeypatch.setenv("PIEZOQ_SELFTEST_TOL_SCALE", "1e-9")
    assert main(["selftest"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "from PIEZOQ_SELFTEST_TOL_SCALE" in out


def test_selftest_bad_scale(monkeypatch):
    monkeypatch.setenv("PIEZOQ_SELFTEST_TOL_SCALE", "abc")
    assert main(["selftest"]) == 2

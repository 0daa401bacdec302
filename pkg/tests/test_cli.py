import csv
import json
import math

import numpy as np
import pytest

from drlim.cli import (
    EXIT_INFEASIBLE,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_USAGE,
    main,
    read_config_file,
    read_input,
    write_field,
)
from drlim.dg1d import default_sample_points
from drlim.studies import perturbed_field


def run(tmp_path, *argv):
    out = tmp_path / "out"
    code = main([*argv, "--out", str(out)])
    return code, out


def summary(out, name):
    return json.loads((out / f"{name}_summary.json").read_text())


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ limit

def test_limit_four_cells(tmp_path):
    src = tmp_path / "u.txt"
    src.write_text("# averages\n1.2\n-0.5\n-1.3\n0.0\n")
    code, out = run(tmp_path, "limit", str(src), "--bounds", "-1,1")
    assert code == EXIT_OK
    x = np.array([float(v) for v in (out / "limited.txt").read_text().split()])
    assert math.fsum(x) == pytest.approx(-0.6, abs=1e-13)
    assert np.all(x >= -1) and np.all(x <= 1)
    np.testing.assert_allclose(x, [1.0, -0.55, -1.0, -0.05], atol=1e-12)
    s = summary(out, "limit")
    assert s["failure"] is None and s["r_hat"] == 2 and s["regime"] == "CASE3"
    for key in ("theta_hat", "c", "lam", "iterations", "mass_defect", "max_bound_violation"):
        assert key in s


def test_limit_all_in_bounds_is_identity(tmp_path):
    values = [0.1, -0.3, 0.7, 1.0, -1.0]
    src = tmp_path / "u.txt"
    src.write_text("".join(f"{v!r}\n" for v in values))
    code, out = run(tmp_path, "limit", str(src))
    assert code == EXIT_OK
    assert (out / "limited.txt").read_bytes() == src.read_bytes()
    assert summary(out, "limit")["iterations"] == 0


def test_limit_output_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    src = tmp_path / "u.txt"
    src.write_text("".join(f"{v:.6f}\n" for v in rng.uniform(-1.5, 1.5, 200)))
    code, out = run(tmp_path, "limit", str(src))
    assert code == EXIT_OK
    x = read_input(out / "limited.txt")
    s = summary(out, "limit")
    assert s["mass_defect"] == math.fsum(x) - s["target_mass"]


def test_limit_infeasible(tmp_path):
    src = tmp_path / "u.txt"
    src.write_text("1.5\n2.5\n")
    code, out = run(tmp_path, "limit", str(src))
    assert code == EXIT_INFEASIBLE
    assert summary(out, "limit")["failure"] == "infeasible"


@pytest.mark.parametrize("text", ["1.0\nabc\n", "", "# nothing\n", "1.0 2.0\n", "nan\n"])
def test_limit_parse_errors(tmp_path, text):
    src = tmp_path / "u.txt"
    src.write_text(text)
    code, out = run(tmp_path, "limit", str(src))
    assert code == EXIT_USAGE
    assert summary(out, "limit")["failure"].startswith("usage")


def test_limit_missing_file(tmp_path):
    code, out = run(tmp_path, "limit", str(tmp_path / "nope.txt"))
    assert code == EXIT_USAGE


@pytest.mark.parametrize("bounds", ["1,-1", "0", "a,b"])
def test_bad_bounds(tmp_path, bounds):
    src = tmp_path / "u.txt"
    src.write_text("0.1\n")
    code, _ = run(tmp_path, "limit", str(src), "--bounds", bounds)
    assert code == EXIT_USAGE


def test_limit_not_converged_writes_partial_output(tmp_path):
    src = tmp_path / "u.txt"
    src.write_text("".join(f"{float(v)!r}\n" for v in np.random.default_rng(1).uniform(-1.5, 1.5, 100)))
    code, out = run(tmp_path, "limit", str(src), "--max-iters", "2")
    assert code == EXIT_NOT_CONVERGED
    s = summary(out, "limit")
    assert s["failure"] == "not_converged" and s["partial"] is True
    assert (out / "limited.txt").exists()


def test_limit_modal_field(tmp_path):
    field = perturbed_field(40, 2)
    src = tmp_path / "field.txt"
    write_field(src, field)
    code, out = run(tmp_path, "limit", str(src))
    assert code == EXIT_OK
    limited = read_input(out / "limited_field.txt")
    vals = limited.values_at(default_sample_points(2))
    assert vals.min() >= -1 - 1e-14 and vals.max() <= 1 + 1e-14
    assert abs(limited.mass - field.mass) <= 1e-11 * max(1, abs(field.mass))
    assert summary(out, "limit")["input_kind"] == "modal_field"


def test_modal_field_round_trip(tmp_path):
    field = perturbed_field(10, 3)
    path = tmp_path / "f.txt"
    write_field(path, field)
    back = read_input(path)
    assert np.array_equal(back.coeffs, field.coeffs)
    assert (back.x_lo, back.x_hi, back.periodic) == (field.x_lo, field.x_hi, field.periodic)


@pytest.mark.parametrize("text", [
    "2 1 0.5 0 1 true\n0.1 0.0\n",             # missing a cell
    "2 1 0.3 0 1 true\n0.1 0.0\n0.2 0.0\n",    # h inconsistent
    "2 1 0.5 0 1 maybe\n0.1 0.0\n0.2 0.0\n",   # bad flag
    "2 1 0.5 0 1 true\n0.1\n0.2 0.0\n",        # short row
    "2 1 0.5 0 1\n0.1 0.0\n0.2 0.0\n",         # short header
])
def test_modal_field_parse_errors(tmp_path, text):
    src = tmp_path / "f.txt"
    src.write_text(text)
    code, _ = run(tmp_path, "limit", str(src))
    assert code == EXIT_USAGE


def test_config_file_and_flag_override(tmp_path):
    src = tmp_path / "u.txt"
    src.write_text("0.2\n0.4\n")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# limiter run\ninput = {src}\nbounds = 0, 1  # unit box\nepsilon = 1e-12\n")
    code, out = run(tmp_path, "limit", "--config", str(cfg))
    assert code == EXIT_OK
    s = summary(out, "limit")
    assert s["bounds"] == [0.0, 1.0] and s["epsilon"] == 1e-12
    code, out = run(tmp_path, "limit", "--config", str(cfg), "--epsilon", "1e-10")
    assert summary(out, "limit")["epsilon"] == 1e-10


def test_config_file_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no equals sign\n")
    code, _ = run(tmp_path, "limit", "--config", str(cfg))
    assert code == EXIT_USAGE
    cfg.write_text("colour = blue\n")
    code, _ = run(tmp_path, "limit", "--config", str(cfg))
    assert code == EXIT_USAGE


def test_read_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("a = 1\n\n# x\nmax-iters = 5 # five\n")
    assert read_config_file(cfg) == {"a": "1", "max_iters": "5"}


# ------------------------------------------------------------- rate study

def test_rate_study_rows(tmp_path):
    code, out = run(tmp_path, "rate-study", "--N", "10000", "--r", "0,1,100")
    assert code == EXIT_OK
    rows = read_rows(out / "rate_study.csv")
    assert list(rows[0]) == ["N", "r", "r_exact", "theta_hat", "theta_exact", "c", "lam",
                             "predicted_rate", "measured_rate", "iterations"]
    assert [int(r["r"]) for r in rows] == [1, 100]
    s = summary(out, "rate_study")
    assert any("r=0 skipped" in n for n in s["notes"])
    # r/N = 1e-4 sits next to the 1/3 limit
    assert abs(float(rows[0]["predicted_rate"]) - 1 / 3) <= 1e-3
    # 17 significant digits
    mantissa = rows[0]["theta_hat"].split("e")[0].replace("-", "").replace(".", "")
    assert len(mantissa) == 17


def test_rate_study_threads_keep_order(tmp_path, monkeypatch):
    args = ["rate-study", "--N", "3000", "--ratios", "0.01,0.001,0.1", "--seed", "3"]
    code, out1 = run(tmp_path / "a", *args)
    monkeypatch.setenv("DRLIM_THREADS", "3")
    code2, out2 = run(tmp_path / "b", *args)
    assert code == code2 == EXIT_OK
    assert (out1 / "rate_study.csv").read_bytes() == (out2 / "rate_study.csv").read_bytes()


def test_rate_study_bad_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv("DRLIM_THREADS", "many")
    code, _ = run(tmp_path, "rate-study", "--N", "100", "--r", "5")
    assert code == EXIT_USAGE


def test_rate_study_rejects_bad_r(tmp_path):
    code, _ = run(tmp_path, "rate-study", "--N", "100", "--r", "150")
    assert code == EXIT_USAGE


# --------------------------------------------------------- accuracy study

def test_accuracy_study_output(tmp_path):
    code, out = run(tmp_path, "accuracy-study", "--meshes", "20,40,80")
    assert code == EXIT_OK
    rows = read_rows(out / "accuracy_study.csv")
    assert [r["mode"] for r in rows] == ["none"] * 3 + ["average"] * 3 + ["both"] * 3
    s = summary(out, "accuracy_study")
    assert "limited_to_unlimited_l2" in s and "checks" in s


def test_accuracy_study_without_violations(tmp_path):
    # zero perturbation keeps every average in bounds: Step I is a no-op
    code, out = run(tmp_path, "accuracy-study", "--amplitude", "0")
    rows = read_rows(out / "accuracy_study.csv")
    none = [r for r in rows if r["mode"] == "none"]
    avg = [r for r in rows if r["mode"] == "average"]
    for a, b in zip(none, avg):
        assert a["l2_error"] == b["l2_error"] and a["linf_error"] == b["linf_error"]
        assert b["iterations"] == "0"


def test_accuracy_study_needs_three_meshes(tmp_path):
    code, out = run(tmp_path, "accuracy-study", "--meshes", "20,40")
    assert code == EXIT_USAGE


# ---------------------------------------------------------------- ch demo

def test_ch_demo_small(tmp_path):
    cfg = tmp_path / "ch.cfg"
    cfg.write_text("n_cells = 64\nend_step = 30\nmobility = degenerate\n")
    code, out = run(tmp_path, "ch-demo", "--config", str(cfg), "--set", "dt=2e-5")
    assert code == EXIT_OK
    rows = read_rows(out / "ch_demo.csv")
    assert len(rows) == 31
    assert list(rows[0])[:7] == ["step", "time", "mass", "bad_ratio", "r_hat", "dr_iterations",
                                 "mass_defect"]
    s = summary(out, "ch_demo")
    assert s["config"]["dt"] == 2e-5 and s["config"]["mobility"] == "degenerate"
    m = [float(r["mass"]) for r in rows]
    assert max(abs(v - m[0]) for v in m) <= 1e-10 * (1 + abs(m[0]))


def test_ch_demo_flory_huggins(tmp_path):
    code, out = run(tmp_path, "ch-demo", "--set", "potential=fh", "--set", "end_step=40",
                    "--set", "n_cells=64")
    assert code == EXIT_OK
    assert all(r["r_hat"] == "0" for r in read_rows(out / "ch_demo.csv"))


@pytest.mark.parametrize("setting", ["colour=blue", "dt=-1", "dt=fast", "potential=quartic",
                                     "noequals"])
def test_ch_demo_bad_settings(tmp_path, setting):
    code, out = run(tmp_path, "ch-demo", "--set", setting)
    assert code == EXIT_USAGE
    assert summary(out, "ch_demo")["failure"].startswith("usage")


def test_ch_demo_deterministic(tmp_path):
    args = ["ch-demo", "--set", "n_cells=64", "--set", "end_step=20", "--seed", "7"]
    run(tmp_path / "a", *args)
    run(tmp_path / "b", *args)
    a = (tmp_path / "a" / "out" / "ch_demo.csv").read_bytes()
    assert a == (tmp_path / "b" / "out" / "ch_demo.csv").read_bytes()


def test_rate_study_default_sweep_matches_prediction(tmp_path):
    code, out = run(tmp_path, "rate-study")
    assert code == EXIT_OK
    for row in read_rows(out / "rate_study.csv"):
        pred, meas = float(row["predicted_rate"]), float(row["measured_rate"])
        assert abs(meas - pred) <= 0.05 * pred, row


def test_ch_demo_default_run(tmp_path):
    code, out = run(tmp_path, "ch-demo")
    assert code == EXIT_OK
    s = summary(out, "ch_demo")
    m0 = float(read_rows(out / "ch_demo.csv")[0]["mass"])
    assert s["max_mass_drift"] <= 1e-10 * (1 + abs(m0))
    assert s["max_dr_iterations"] <= 20

import csv
import json

import numpy as np
import pytest

from ciforge import cli
from ciforge.fields import load_field


def test_validate_params_exit_codes(tmp_path, capsys):
    assert cli.main(["validate-params"]) == 0
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"params": {"beta": 0.4}}))
    assert cli.main(["validate-params", "--config", str(cfg)]) != 0


def test_validate_reports_failed_check(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"params": {"beta": 0.4}}))
    cli.main(["validate-params", "--config", str(cfg)])
    rep = json.loads(capsys.readouterr().out)
    assert not rep["passed"]
    assert any(c["name"] == "β<1/3" and not c["pass"] for c in rep["checks"])


def test_run_refuses_invalid_params(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"params": {"beta": 0.4}}))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_INVALID
    assert not (tmp_path / "o").exists()


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 2, "seed": 5, "n": 64, "params": {"a": 3.0}}))
    env = {"CIFORGE_SEED": "7", "CIFORGE_N": "128", "CIFORGE_PARAM_B": "1.4", "HOME": "/x"}
    c = cli.load_config(str(cfg), env=env, n=32)
    assert (c.steps, c.seed, c.n) == (2, 7, 32)
    assert c.params["a"] == 3.0 and c.params["b"] == 1.4 and c.params["beta"] == 0.05
    assert "out" not in c.to_dict()


@pytest.mark.parametrize("bad", [{"steps": 4}, {"n": 48}, {"preset": "vortex/zero"}, {"mode": "fast"}, {"colour": 1}])
def test_config_rejects(tmp_path, bad):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(bad))
    with pytest.raises((KeyError, ValueError)):
        cli.load_config(str(cfg), env={})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_INVALID


def test_presets_are_steady_euler():
    from ciforge.euler import pressure_of
    from ciforge.calculus import div, grad

    for name in ("shear", "taylor-green"):
        v = cli.preset_field(name, 32)
        rhs = div(v.outer()) + grad(pressure_of(v))
        assert rhs.sup() <= 1e-12
    assert cli.preset_field("zero", 32).sup() == 0.0


def test_dims_command(tmp_path, capsys):
    assert cli.main(["dims", "--beta-pp", "0.25", "--out", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["infimum_closed_form"] == pytest.approx(5 / 6)
    assert (tmp_path / "dims.json").exists()


def test_verify_suites(capsys):
    assert cli.main(["verify", "singular", "scheme"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and all(l.startswith("PASS") for l in lines)
    assert cli.main(["verify", "nonsense"]) == cli.EXIT_INVALID


@pytest.mark.slow
def test_degenerate_shear_shear_run(tmp_path):
    out = tmp_path / "ss"
    assert cli.main(["run", "--preset", "shear/shear", "--steps", "1", "--out", str(out)]) == 0
    rep = json.loads((out / "step_1" / "inductive_report.json").read_text())
    assert rep["glue"]["degenerate"]
    assert rep["perturb_checks"]["w_sup"] == 0.0
    # Identical steady inputs give the rescaled steady shear eps*u at every time and both steps.
    u = cli.preset_field("shear", 32).data
    scale = []
    for q in (0, 1):
        d = out / f"step_{q}"
        for f in json.loads((d / "inductive_report.json").read_text())["fields"]:
            x = load_field(str(d / "fields"), f["name"])
            if f["name"].startswith("R"):
                assert x.sup() == 0.0
            else:
                c = float(np.sum(x.data * u) / np.sum(u * u))
                assert np.abs(x.data - c * u).max() <= 1e-14
                scale.append(c)
    assert 0 < min(scale) and max(scale) - min(scale) <= 1e-15


@pytest.mark.slow
def test_strict_mode_faults(tmp_path):
    out = tmp_path / "strict"
    code = cli.main(["run", "--preset", "shear/zero", "--steps", "1", "--mode", "strict", "--out", str(out)])
    assert code == cli.EXIT_GUARD
    fault = json.loads((out / "fault.json").read_text())
    assert "scale chain" in fault["message"]


# Integration on the shared shear/zero runs ------------------------------------------------


@pytest.mark.slow
def test_run_artifacts(cli_runs):
    out, proc = cli_runs[0]
    assert proc.returncode == 0, proc.stderr
    cfg = json.loads((out / "config.json").read_text())
    assert "out" not in cfg and cfg["preset"] == "shear/zero" and cfg["params"]["M"] > 0
    for q in (0, 1):
        d = out / f"step_{q}"
        for name in ("badset.json", "inductive_report.json", "metrics.csv"):
            assert (d / name).exists()
        with open(d / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["t", "e_v", "R_C0", "v_C1"] and len(rows) == 129
        rep = json.loads((d / "inductive_report.json").read_text())
        assert rep["structural_passed"]
        assert all(rep.get("structural_flags", {}).values())
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] and not summary["levels"][1]["degenerate"]
    assert (out / "dimension_report.json").exists()


@pytest.mark.slow
def test_no_timings_in_reports(cli_runs):
    out, _ = cli_runs[0]
    for p in out.rglob("*.json"):
        assert "second" not in p.read_text() and "elapsed" not in p.read_text()


@pytest.mark.slow
def test_analyze_and_plot_data(cli_runs, tmp_path, capsys):
    import shutil

    out = tmp_path / "copy"
    shutil.copytree(cli_runs[0][0], out)
    (out / "dimension_report.json").unlink()
    assert cli.main(["analyze", str(out)]) == 0
    rep = json.loads((out / "dimension_report.json").read_text())
    assert rep["box_dimension"]["counts"][0] == 1
    assert rep["box_dimension"]["scale_rule"] == "given"
    assert cli.main(["plot-data", str(out)]) == 0
    with open(out / "plot_energy.csv") as fh:
        rows = list(csv.DictReader(fh))
    for q in ("0", "1"):
        t = [float(r["t"]) for r in rows if r["step"] == q]
        assert len(t) == 129 and np.all(np.diff(t) > 0)
    with open(out / "plot_badsets.csv") as fh:
        bad = list(csv.DictReader(fh))
    assert {r["level"] for r in bad} == {"0", "1"}
    assert all(float(r["start"]) < float(r["end"]) for r in bad)

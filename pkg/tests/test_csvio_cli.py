import json
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import FIXTURES, simulate_panel
from mdpde_panel.baselines import EstimatorSpec, fit_ols, run_external_plugin
from mdpde_panel.cli import main, trimmed_mpe
from mdpde_panel.csvio import SCHEMA_VERSION, dump_report, format_table, load_report, read_panel_csv, write_panel_csv
from mdpde_panel.errors import PanelParseError
from mdpde_panel.panel import PanelDataset


@pytest.fixture
def panel_csv(tmp_path):
    data = simulate_panel(np.random.default_rng(5), n=30, t=4, beta=[1.0, 2.0, -1.0])
    path = tmp_path / "panel.csv"
    write_panel_csv(data, path)
    return data, path


def write(tmp_path, text, name="in.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_round_trip(panel_csv):
    data, path = panel_csv
    back = read_panel_csv(path)
    assert np.array_equal(back.y, data.y) and np.array_equal(back.x, data.x)
    assert back.unit_labels == data.unit_labels and back.period_labels == data.period_labels
    assert back.regressor_names == data.regressor_names


def test_no_intercept_read(panel_csv):
    _, path = panel_csv
    data = read_panel_csv(path, intercept=False)
    assert data.n_regressors == 2 and not data.has_intercept


def test_unbalanced_panel_names_units(tmp_path):
    path = write(tmp_path, "unit,period,y,x\na,1,1,1\na,2,2,2\nb,1,3,1\nc,1,1,0\nc,2,4,1\n")
    with pytest.raises(PanelParseError, match="units missing periods: b"):
        read_panel_csv(path)


@pytest.mark.parametrize("body, line, fragment", [
    ("a,1,1,1\na,2,x,2\n", 3, "non-numeric"),
    ("a,1,1,1\na,2,,2\n", 3, "non-numeric"),
    ("a,1,1,1\na,1,2,2\n", 3, "duplicate"),
    ("a,1,1\n", 2, "expected 4 fields"),
    ("a,1,nan,1\n", 2, "non-finite"),
])
def test_parse_errors_carry_line(tmp_path, body, line, fragment):
    path = write(tmp_path, "unit,period,y,x\n" + body)
    with pytest.raises(PanelParseError, match=f"line {line}: .*{fragment}"):
        read_panel_csv(path)


def test_bad_header(tmp_path):
    with pytest.raises(PanelParseError, match="line 1"):
        read_panel_csv(write(tmp_path, "id,time,y,x\n"))


def test_report_helpers(tmp_path):
    text = dump_report({"b": np.float64(1.5), "a": np.arange(2), "c": float("nan")}, tmp_path / "r.json")
    back = load_report(tmp_path / "r.json")
    assert back == {"schema_version": SCHEMA_VERSION, "a": [0, 1], "b": 1.5, "c": None}
    assert text.index('"a"') < text.index('"b"')
    table = format_table(["name", "v"], [["x", 1.0], ["longer", 22.5]])
    assert table.splitlines()[2] == "x        1.0000"
    assert table.splitlines()[3] == "longer  22.5000"


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_fit_ols_report(panel_csv, tmp_path, capsys):
    data, path = panel_csv
    out = tmp_path / "ols.json"
    assert run_cli("fit", path, "--estimator", "ols", "-o", out) == 0
    report = load_report(out)
    assert report["schema_version"] == SCHEMA_VERSION
    assert_allclose(report["theta"]["beta"], fit_ols(data).beta, rtol=1e-14)
    assert set(report["standard_errors"]) == {"const", "x1", "x2"}


def test_fit_mdpde_stdout_and_table(panel_csv, capsys):
    _, path = panel_csv
    assert run_cli("fit", path, "--gamma", "0.2", "--table") == 0
    captured = capsys.readouterr()
    report = json.loads(captured.out)
    assert report["gamma"] == 0.2 and report["converged"]
    assert len(report["covariance"]) == 5
    assert "sigma2_eps" in report["standard_errors"]
    assert "parameter" in captured.err


def test_fit_adaptive(panel_csv, tmp_path):
    _, path = panel_csv
    out = tmp_path / "opt.json"
    assert run_cli("fit", path, "-o", out) == 0
    report = load_report(out)
    assert report["gamma_selection"]["converged"]
    assert 0.0 <= report["gamma"] <= 1.0


def test_toy_exact_panel_is_degenerate(tmp_path, capsys):
    path = write(tmp_path, "unit,period,y,x\nu1,t1,3,1\nu1,t2,5,2\nu1,t3,1,0\n"
                           "u2,t1,7,3\nu2,t2,9,4\nu2,t3,13,6\n")
    assert run_cli("fit", path, "--estimator", "ols") == 0
    report = json.loads(capsys.readouterr().out)
    assert_allclose(report["theta"]["beta"], [1.0, 2.0], atol=1e-12)
    assert any("degenerate" in n for n in report["notes"])
    code = run_cli("fit", path, "--gamma", "0.3")
    report = json.loads(capsys.readouterr().out)
    # both variances sit at the floor, so the MDPDE's J is singular there
    assert code == 5
    assert any(n.startswith("singular J") for n in report["notes"])
    assert_allclose(report["theta"]["beta"], [1.0, 2.0], atol=1e-6)
    assert any("degenerate" in n for n in report["notes"])


def test_exit_code_parse(tmp_path, capsys):
    path = write(tmp_path, "unit,period,y,x\na,1,1,1\na,2,2,2\nb,1,3,1\n")
    assert run_cli("fit", path) == 2
    assert "b" in capsys.readouterr().err
    assert run_cli("fit", tmp_path / "missing.csv") == 2


def test_exit_code_rank(tmp_path, capsys):
    rows = "".join(f"u{i},{t},{i + t},{t},{2 * t}\n" for i in range(4) for t in range(3))
    path = write(tmp_path, "unit,period,y,a,b\n" + rows)
    assert run_cli("fit", path, "--estimator", "ols") == 3
    assert "b" in capsys.readouterr().err


def test_exit_code_nonconvergence(panel_csv, monkeypatch, capsys):
    _, path = panel_csv
    import mdpde_panel.cli as cli
    from mdpde_panel.dpd import DpdConfig

    real = cli.DpdConfig
    monkeypatch.setattr(cli, "DpdConfig", lambda gamma, **kw: real(gamma, max_iterations=1, **kw))
    assert run_cli("fit", path, "--gamma", "0.4") == 4
    assert json.loads(capsys.readouterr().out)["converged"] is False


def test_exit_code_singular(panel_csv, tmp_path, capsys):
    _, path = panel_csv
    fit = tmp_path / "fit.json"
    assert run_cli("fit", path, "--gamma", "0.2", "-o", fit) == 0
    report = load_report(fit)
    # a huge effect variance against a tiny error variance makes J numerically singular
    report["theta"]["sigma2_alpha"] = 1e8
    report["theta"]["sigma2_eps"] = 1e-4
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps(report))
    assert run_cli("influence", path, broken) == 5
    assert "singular" in capsys.readouterr().err


def test_exit_code_singular_from_fit_notes(panel_csv, monkeypatch, capsys):
    _, path = panel_csv
    import mdpde_panel.cli as cli

    real = cli.fit_mdpde

    def noted(data, cfg):
        fit = real(data, cfg)
        fit.notes.append("singular J: covariance uses a pseudo-inverse")
        return fit

    monkeypatch.setattr(cli, "fit_mdpde", noted)
    assert run_cli("fit", path, "--gamma", "0.2") == 5


def test_trimmed_mpe(panel_csv, tmp_path, capsys):
    data, path = panel_csv
    ols = tmp_path / "ols.json"
    dpd = tmp_path / "dpd.json"
    run_cli("fit", path, "--estimator", "ols", "-o", ols)
    run_cli("fit", path, "--gamma", "0.3", "-o", dpd)
    capsys.readouterr()
    out = tmp_path / "trim.json"
    assert run_cli("trimmed-mpe", path, dpd, ols, ols, "--trim", "0", "0.2", "-o", out) == 0
    text = capsys.readouterr().out
    assert "mdpde(0.3)" in text and "increase %" in text
    report = load_report(out)
    beta = np.asarray(load_report(ols)["theta"]["beta"])
    plain = np.mean((data.y - data.x @ beta) ** 2)
    assert report["mpe"][1][0] == pytest.approx(plain)
    assert report["increase_percent"][2] == pytest.approx(report["increase_percent"][1])
    assert run_cli("trimmed-mpe", path, ols, ols, "-o", out) == 0
    assert load_report(out)["increase_percent"][1] == [0.0, 0.0, 0.0]


def test_trimmed_mpe_arithmetic():
    y = np.array([[0.0, 0.0], [0.0, 10.0]])
    data = PanelDataset(y, np.ones((2, 2, 1)))
    table = trimmed_mpe(data, [np.zeros(1)], [0.0, 0.25, 0.5])
    assert_allclose(table[0], [25.0, 0.0, 0.0])


def test_trim_argument_validation(panel_csv, tmp_path):
    _, path = panel_csv
    with pytest.raises(SystemExit) as info:
        run_cli("trimmed-mpe", path, tmp_path / "x.json", "--trim", "1.0")
    assert info.value.code == 2


def test_influence_csv(panel_csv, tmp_path):
    _, path = panel_csv
    fit = tmp_path / "fit.json"
    run_cli("fit", path, "--gamma", "0.3", "-o", fit)
    out = tmp_path / "if.csv"
    assert run_cli("influence", path, fit, "--shifts", "0", "10", "100", "1000",
                   "--leverage-shifts", "0", "1", "-o", out) == 0
    rows = np.genfromtxt(out, delimiter=",", names=True)
    assert rows.shape == (8,)
    assert "if_sigma2_eps" in rows.dtype.names
    base = rows[rows["leverage_shift"] == 0]
    for name in ("if_const", "if_x1", "if_x2"):
        assert abs(base[name][0]) < 1e-10
    # the beta block redescends; the variance entries level off at -J^{-1} xi
    tail = base["log_if_norm_beta"][1:]
    assert np.all(np.diff(tail) < 0)


def test_simulate_smoke(tmp_path, capsys):
    assert run_cli("simulate", "smoke", "--out-dir", tmp_path) == 0
    assert "smoke" in capsys.readouterr().out
    first = (tmp_path / "smoke_1.json").read_bytes()
    assert (tmp_path / "smoke_1.csv").exists()
    assert run_cli("simulate", "smoke", "--out-dir", tmp_path) == 0
    assert (tmp_path / "smoke_1.json").read_bytes() == first
    assert run_cli("simulate", "smoke", "--seed", "8", "--out-dir", tmp_path) == 0
    assert (tmp_path / "smoke_1.json").read_bytes() != first


def test_simulate_bad_config(tmp_path, capsys):
    path = write(tmp_path, "[design]\nn_units = 'ten'\n", "bad.toml")
    assert run_cli("simulate", path) == 2
    assert "line 2" in capsys.readouterr().err


def test_fit_seed_determinism(panel_csv, tmp_path):
    _, path = panel_csv
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run_cli("fit", path, "--gamma", "0.25", "--seed", "4", "-o", a)
    run_cli("fit", path, "--gamma", "0.25", "--seed", "4", "-o", b)
    assert a.read_bytes() == b.read_bytes()


def test_external_plugin_uses_cli(panel_csv):
    data, _ = panel_csv
    command = [sys.executable, "-m", "mdpde_panel.cli", "fit", "--estimator", "ols"]
    theta = run_external_plugin(EstimatorSpec("plugin-ols", "external-plugin", {"command": command}), data)
    assert_allclose(theta.beta, fit_ols(data).beta, rtol=1e-10)


def test_console_script_version():
    done = subprocess.run([sys.executable, "-m", "mdpde_panel.cli", "--version"],
                          capture_output=True, text=True)
    assert done.returncode == 0 and "mdpde-panel" in done.stdout

import json

import numpy as np
import pytest

from occp import __version__
from occp.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main, parse_config_text
from occp.report import ReplicationReport, emit_report, load_report_json


def test_report_roundtrip(tmp_path):
    rep = ReplicationReport(["a", "b"], config={"alphas": (0.1, 0.5)}, seed=3)
    rep.add(a=0.1, b=float("nan"))
    rep.add(a=1 / 3, b=2)
    emit_report(rep, "json", tmp_path / "r.json")
    emit_report(rep, "csv", tmp_path / "r.csv")
    back = load_report_json(tmp_path / "r.json")
    assert back.rows[1]["a"] == 1 / 3 and back.seed == 3
    assert (tmp_path / "r.csv").read_text().splitlines() == ["a,b", "0.10000000000000001,nan",
                                                            "0.33333333333333331,2"]
    with pytest.raises(KeyError):
        rep.add(c=1)
    with pytest.raises(ValueError):
        emit_report(rep, "xml", tmp_path / "r.xml")


def test_parse_config_text():
    text = "# comment\nalphas = 0.1, 0.5\ncopula.n = 50\nbiased-means.n1 = 3  # ignored here\n"
    assert parse_config_text(text, "copula") == {"alphas": "0.1, 0.5", "n": "50"}


def test_version(capsys):
    assert main(["version"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == __version__


@pytest.mark.parametrize("argv", [
    ["nope"],
    ["copula", "--set", "bogus=1"],
    ["copula", "--set", "n=abc"],
    ["copula", "--set", "alphas=-1"],
    ["copula", "--set", "bin_padding=-0.1"],
    ["biased-means", "--set", "priors=flat"],
    ["biased-means", "--threads", "0"],
    ["biased-means", "--star-csv", "x.csv"],
    ["gp-confound", "--star-csv", "/nonexistent.csv"],
    ["gp-confound", "--set", "solver=newton"],
    ["divergence-check", "--set", "instances=0"],
    ["copula", "--config", "/nonexistent.cfg"],
])
def test_invalid_input_exit_code(argv, tmp_path):
    assert main(argv + ["--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert not any(tmp_path.glob("*.csv"))


def test_unwritable_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["biased-means", "--replications", "2", "--out-dir", str(blocker / "sub")]) == EXIT_INVALID


def _run(tmp_path, name, argv):
    out = tmp_path / name
    assert main(argv + ["--out-dir", str(out)]) == EXIT_OK
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_biased_means_outputs_byte_identical(tmp_path):
    argv = ["biased-means", "--replications", "4", "--seed", "9", "--set", "grid_size=4", "--set", "alphas=0.05,0.999"]
    a = _run(tmp_path, "a", argv + ["--threads", "1"])
    b = _run(tmp_path, "b", argv + ["--threads", "2"])
    assert set(a) == {"table1.csv", "table1.json", "contours.csv", "contours.json"}
    assert a == b
    doc = json.loads(a["table1.json"])
    assert doc["seed"] == 9 and doc["config"]["replications"] == 4


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("biased-means.replications = 3\nbiased-means.alphas = 0.5\ngrid_size = 3\nseed = 1\n")
    files = _run(tmp_path, "o", ["biased-means", "--config", str(cfg), "--seed", "2"])
    doc = json.loads(files["table1.json"])
    assert doc["seed"] == 2 and doc["config"]["replications"] == 3 and doc["config"]["alphas"] == [0.5]


def test_divergence_check(capsys):
    assert main(["divergence-check", "--set", "instances=2", "--set", "alphas=0.5"]) == EXIT_OK
    assert "polya_gamma" in capsys.readouterr().out
    assert main(["divergence-check", "--set", "instances=2", "--set", "alphas=0.5", "--set", "tol=0"]) == EXIT_RUNTIME


def test_copula_small_run(tmp_path):
    argv = ["copula", "--replications", "1", "--set", "n=40", "--set", "M=3", "--set", "alphas=0.5",
            "--set", "mc_samples=100", "--set", "band_draws=20"]
    files = _run(tmp_path, "c", argv)
    assert {"copula_table.csv", "marginal_fit.csv"} <= set(files)
    assert files == _run(tmp_path, "c2", argv)


def test_gp_confound_small_run_with_star(tmp_path):
    from test_gp_confound import _write_star

    star = tmp_path / "star.csv"
    _write_star(star, n=80)
    argv = ["gp-confound", "--replications", "1", "--set", "n1=40", "--set", "n2=10", "--set", "M=3",
            "--set", "alphas=0.5,0.999", "--set", "draws=50", "--set", "grid_n=5", "--star-csv", str(star)]
    files = _run(tmp_path, "g", argv)
    assert {"gp_table.csv", "gp_grid.csv", "star_table.csv"} <= set(files)
    rows = json.loads(files["star_table.json"])["rows"]
    assert len(rows) == 2 and all(np.isfinite(r["tau_rmse"]) for r in rows)

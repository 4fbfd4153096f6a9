import json
import re

import numpy as np
import pytest

from einrel import config
from einrel.cli import CLASSES, build_parser, run
from einrel.report import strip_timestamp


def _cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _only_dir(out):
    dirs = [p for p in out.iterdir() if p.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


def test_homogenize_constant(tmp_path, capsys):
    cfg = _cfg(tmp_path, "field_kind = constant\nconst_c = 2.0\nlambda_ellipticity = 2\ngrid_level = 1\n")
    assert run(["homogenize", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "a_bar = [[2.0" in out or "a_bar = [[2.000000" in out
    d = _only_dir(tmp_path / "o")
    rep = json.loads((d / "homogenized.json").read_text())
    assert np.allclose(rep["matrix"], 2 * np.eye(2), atol=1e-9)
    assert rep["schema_version"] == 1 and "generated_at" in rep
    assert re.fullmatch(r"homogenize-[0-9a-f]{12}-seed0", d.name)


def test_unknown_key_lists_valid_keys(tmp_path, capsys):
    cfg = _cfg(tmp_path, "amp_q = 1\n")
    assert run(["homogenize", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "'amp_q'" in err and "amp_a" in err and "lambda_ellipticity" in err
    assert not (tmp_path / "o").exists()


def test_malformed_value_names_key(tmp_path, capsys):
    cfg = _cfg(tmp_path, "grid_level = three\n")
    assert run(["homogenize", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "grid_level" in capsys.readouterr().err


def test_constraint_violation_is_config_error(tmp_path, capsys):
    cfg = _cfg(tmp_path, "amp_v = 2.0\n")
    assert run(["gen-env", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file(tmp_path):
    assert run(["homogenize", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2


def test_partial_output_removed_on_failure(tmp_path):
    # resolvent with lam = rho 3^-m > 1 fails after the run directory exists
    cfg = _cfg(tmp_path, "res_m = 1\nres_h = 0\nrho = 5\nhom_level = 1\n")
    assert run(["resolvent", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert list((tmp_path / "o").iterdir()) == []


def test_solver_failure_exit_code(tmp_path):
    cfg = _cfg(tmp_path, "grid_level = 2\nsolver_tol = 1e-30\npreconditioner = jacobi\ncompare_coarser = false\n")
    assert run(["homogenize", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 3


def test_help_lists_every_key_with_units(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for cls in CLASSES:
        for k in config.keys_of(cls):
            assert re.search(rf"^  {k} \(", text, re.M), k
    assert "(length," in text and "(time," in text


def test_seed_override_and_reproducibility(tmp_path):
    cfg = _cfg(tmp_path, "sample_n = 5\nsample_extent = 2\n")
    for out in ("a", "b"):
        assert run(["gen-env", "--config", cfg, "--out", str(tmp_path / out), "--seed", "5", "--quiet"]) == 0
    da, db = _only_dir(tmp_path / "a"), _only_dir(tmp_path / "b")
    assert da.name == db.name and da.name.endswith("seed5")
    assert (da / "field_samples.csv").read_bytes() == (db / "field_samples.csv").read_bytes()
    assert strip_timestamp((da / "environment.json").read_text()) == strip_timestamp(
        (db / "environment.json").read_text())
    assert "seed = 5" in (da / "config.cfg").read_text()


@pytest.mark.parametrize("cmd, cfgtext, files", [
    ("validate-env", "validate_samples = 500\n", ["validation.json"]),
    ("simulate", "lam = 0.5\nhorizon = 2\nn_paths = 2\n", ["paths.csv", "simulation.json"]),
    ("corrector", "grid_level = 1\ncorrector_p = 0, 1\n", ["corrector.csv", "corrector.json"]),
    ("resolvent", "res_m = 1\nres_h = 0\nhom_level = 1\nclock_samples = 100\n",
     ["velocity_resolvent.csv", "clock_resolvent.csv", "resolvent.json"]),
    ("regen", "field_kind = constant\nlam = 0.5\nhorizon = 2000\nn_paths = 4\n", ["blocks.csv", "regeneration.json"]),
    ("fk-check", "field_kind = constant\nres_m = 1\nres_h = 0\nhom_level = 1\nfk_paths = 50\n", ["fk_check.json"]),
    ("exit-check", "field_kind = constant\nexit_m = 1\nexit_h = 0, 1\nexit_paths = 50\n",
     ["exit_check.json", "exit_check.csv"]),
    ("girsanov-check", "girsanov_paths = 50\ngirsanov_t = 5\n", ["girsanov_check.json"]),
])
def test_subcommands_write_reports(tmp_path, cmd, cfgtext, files):
    cfg = _cfg(tmp_path, cfgtext)
    assert run([cmd, "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    d = _only_dir(tmp_path / "o")
    for f in files + ["config.cfg"]:
        assert (d / f).is_file(), f


def test_einstein_rate_end_to_end(tmp_path, capsys):
    cfg = _cfg(tmp_path, "\n".join([
        "field_kind = constant", "lambdas = 0.5, 0.4, 0.3, 0.25", "env_seeds = 1, 2", "rate_paths = 4", "rate_paths_exponent = 0",
        "rate_path_units = 250", "clock_samples = 10", "hom_level = 1", "grid_spacing = 0.5",
        "resolvent_diagnostics = false", ""]))
    assert run(["einstein-rate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    d = _only_dir(tmp_path / "o")
    for f in ("report.json", "report.csv", "loglog.txt", "rate.png", "config.cfg"):
        assert (d / f).is_file()
    rep = json.loads((d / "report.json").read_text())
    assert len(rep["rows"]) == 8 and all("seed" in r for r in rep["rows"])
    assert rep["fit"]["pooled"]["degenerate"]
    assert "fit degenerate" in capsys.readouterr().out
    csv_lines = (d / "report.csv").read_text().splitlines()
    assert len(csv_lines) == 9

import json

import numpy as np
import pytest

from defaultable import ConfigError, list_presets, preset_config, run_experiment, validate_config
from defaultable.cli import main as cli_main


def test_registry_has_all_presets_with_blurbs():
    presets = list_presets()
    assert len(presets) >= 7
    names = [n for n, _b in presets]
    for expected in ("figure1", "pathology", "merton", "after_default",
                     "anticipating_compensator", "martingale_audit", "partial_info"):
        assert expected in names
    assert all(blurb for _n, blurb in presets)


def test_every_preset_validates_against_the_schema():
    for name, _blurb in list_presets():
        cfg = preset_config(name)
        assert cfg.experiment == name


def test_anticipating_preset_window_is_a_multiple_of_dt():
    cfg = preset_config("anticipating_compensator")
    grid = cfg.section("grid")
    eps = cfg.section("default_mechanism")["epsilon"]
    dt = grid["horizon"] / grid["n_steps"]
    assert abs(eps / dt - round(eps / dt)) < 1e-12


def test_unknown_key_fails_with_dotted_path():
    raw = json.loads(json.dumps(preset_config("merton").raw))
    raw["coefficients"]["sigm"] = 0.2
    with pytest.raises(ConfigError) as err:
        validate_config(raw)
    assert "coefficients.sigm" in str(err.value)


def test_unknown_section_and_missing_requirements_fail():
    with pytest.raises(ConfigError):
        validate_config({"experiment": "merton", "grids": {}})
    with pytest.raises(ConfigError) as err:
        validate_config({"experiment": "merton"})
    assert "requires section" in str(err.value)
    with pytest.raises(ConfigError):
        validate_config({"experiment": "unheard_of"})


def test_window_epsilon_must_fit_the_grid():
    raw = json.loads(json.dumps(preset_config("anticipating_compensator").raw))
    raw["default_mechanism"]["epsilon"] = 0.0013
    with pytest.raises(ConfigError):
        validate_config(raw)


def test_run_experiment_writes_tables_and_manifest(tmp_path):
    manifest = run_experiment(preset_config("empty_market"), tmp_path)
    assert manifest.exit_code == 0
    assert manifest.verdicts == {"empty_market": "pass"}
    table = tmp_path / "empty_market.csv"
    assert table.exists()
    header, *rows = table.read_text().strip().split("\n")
    assert header == "time,pi,status"
    assert all(row.split(",")[1] == "0" for row in rows)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["tables"]["empty_market"]["sha256"]
    assert man["kernel_backend"] in ("numba", "numpy")


def test_run_experiment_emits_deterministic_bytes(tmp_path):
    cfg = preset_config("merton")
    a = run_experiment(cfg, tmp_path / "a", reference=True)
    b = run_experiment(cfg, tmp_path / "b", reference=True)
    for name in a.tables:
        assert a.tables[name]["sha256"] == b.tables[name]["sha256"]
    fa = (tmp_path / "a" / "merton.csv").read_bytes()
    fb = (tmp_path / "b" / "merton.csv").read_bytes()
    assert fa == fb


def test_seed_and_path_overrides_change_the_run(tmp_path):
    cfg = preset_config("merton")
    a = run_experiment(cfg, tmp_path / "a", seed=1, paths=500)
    b = run_experiment(cfg, tmp_path / "b", seed=2, paths=500)
    assert a.seed == 1 and b.seed == 2
    fa = (tmp_path / "a" / "merton.csv").read_text()
    fb = (tmp_path / "b" / "merton.csv").read_text()
    assert fa != fb                                  # MC columns moved with the seed


def test_worker_fanout_reduces_in_batch_order(tmp_path):
    raw = json.loads(json.dumps(preset_config("martingale_audit").raw))
    raw["ensemble"].update({"paths": 30000, "batch": 10000})
    seq = run_experiment(validate_config(raw), tmp_path / "seq")
    raw["ensemble"]["workers"] = 3
    par = run_experiment(validate_config(raw), tmp_path / "par")
    a = (tmp_path / "seq" / "martingale.csv").read_bytes()
    b = (tmp_path / "par" / "martingale.csv").read_bytes()
    assert a == b
    assert seq.verdicts == par.verdicts


def test_cli_presets_and_validate_and_run(tmp_path, capsys):
    assert cli_main(["presets"]) == 0
    out = capsys.readouterr().out
    assert "figure1" in out and "martingale_audit" in out

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(preset_config("empty_market").raw))
    assert cli_main(["validate", str(cfg_path)]) == 0

    assert cli_main(["run", str(cfg_path), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "manifest.json").exists()


def test_cli_flags_config_errors_as_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": "merton", "grid": {"horizon": 1.0}}))
    assert cli_main(["run", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "grid.n_steps" in err


def test_cli_figure1_emits_two_tables_and_a_plot(tmp_path):
    assert cli_main(["run", "figure1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "figure1_uncompensated.csv").exists()
    assert (tmp_path / "figure1_compensated.csv").exists()
    svg = (tmp_path / "figure1.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_figure1_table_contents(tmp_path):
    run_experiment(preset_config("figure1"), tmp_path)
    rows = np.genfromtxt(tmp_path / "figure1_uncompensated.csv", delimiter=",",
                         names=True)
    assert np.all(np.diff(rows["pi"]) < 0)
    crossing = rows["pi"][np.isclose(rows["intensity"], 0.16)]
    assert abs(crossing[0]) < 1e-8

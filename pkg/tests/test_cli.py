import csv
import json

import numpy as np
import pytest

from zonefl import cli
from zonefl.model import sigmoid
from zonefl.config import format_partition, load_settings, parse_partition_text
from zonefl.results import COMPARE_COLUMNS, FAILURE_MARKER, atomic_write, improvement_gain
from zonefl.scenario import ConfigError

SMALL = """\
rounds: 6
seed: 1
strategy: static
scenario:
  grid: [2, 2]
  n_clients: 12
  mobility: [0.6, 0.4]
output:
  dir: {out}
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(SMALL.format(out=tmp_path / "from_file"))
    return path


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


def test_missing_rounds_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 1\nscenario:\n  grid: [2, 2]\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "rounds" in capsys.readouterr().err


def test_unknown_key_reports_its_line(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("rounds: 3\nscenario:\n  grid: [2, 2]\n  colour: red\n")
    assert cli.main(["run", str(path)]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 4" in err and "scenario.colour" in err


def test_invalid_value_names_the_field(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("rounds: 3\nscenario:\n  n_clients: -4\n")
    with pytest.raises(ConfigError) as err:
        load_settings(path)
    assert err.value.field_name == "scenario.n_clients"
    assert err.value.line == 3


def test_compare_needs_five_seeds(config):
    with pytest.raises(ConfigError):
        load_settings(config, {"compare.seeds": [0, 1, 2]})


def test_overrides_take_precedence(config):
    s = load_settings(config, {"rounds": 2, "scenario.noise_std": 0.25})
    assert s.scenario.rounds == 2 and s.scenario.noise_std == 0.25
    assert s.config_hash != load_settings(config).config_hash


def test_rerun_is_byte_identical_and_manifest_records_overrides(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["run", str(config), "--strategy", "zgd", "--set", "round.local_epochs=2"]
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert files(a) == files(b)
    assert {"rounds.csv", "events.jsonl", "checks.jsonl", "summary.json", "betas.csv"} <= set(files(a))
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["strategy"] == "zgd"
    assert manifest["overrides"] == {"round.local_epochs": 2, "strategy": "zgd"}
    assert manifest["schema_version"] == 1
    summary = json.loads((a / "summary.json").read_text())
    assert summary["strategy"] == "zgd"


def test_no_betas_flag(config, tmp_path):
    assert cli.main(["run", str(config), "--strategy", "zgd", "--no-betas", "--out", str(tmp_path / "o")]) == 0
    assert not (tmp_path / "o" / "betas.csv").exists()


def test_rounds_csv_has_one_row_per_zone_round(config, tmp_path):
    out = tmp_path / "o"
    assert cli.main(["run", str(config), "--out", str(out)]) == 0
    with open(out / "rounds.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 * 4
    assert rows[0].keys() >= {"round", "zone_id", "train_loss", "validation_loss", "models_sent"}


def test_output_dir_precedence(config, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", str(config)]) == 0
    assert (tmp_path / "env" / "summary.json").exists()
    assert cli.main(["run", str(config), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "summary.json").exists()
    monkeypatch.delenv(cli.OUTPUT_ENV)
    assert cli.main(["run", str(config)]) == 0
    assert (tmp_path / "from_file" / "summary.json").exists()


def test_numeric_failure_writes_partial_results(config, tmp_path, capsys):
    out = tmp_path / "o"
    code = cli.main(["run", str(config), "--out", str(out), "--set", "round.local_learning_rate=1000", "--rounds", "60"])
    assert code == cli.EXIT_NUMERIC
    assert (out / FAILURE_MARKER).exists()
    assert (out / "rounds.csv").read_text().startswith("round,")
    assert "numeric failure" in capsys.readouterr().err
    # a later successful run in the same directory clears the marker
    assert cli.main(["run", str(config), "--out", str(out)]) == 0
    assert not (out / FAILURE_MARKER).exists()


def test_compare_writes_a_paired_table(config, tmp_path):
    out = tmp_path / "cmp"
    assert cli.main(["compare", str(config), "--seeds", "0,1,2,3,4", "--rounds", "3", "--jobs", "2",
                     "--out", str(out)]) == 0
    with open(out / "compare.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == COMPARE_COLUMNS
    assert len(rows) == 8
    for row in rows:
        assert row["n_seeds"] == "5"
        if row["strategy"] == "global":
            assert float(row["gain_vs_global_pct"]) == 0.0
    per_seed = json.loads((out / "compare.json").read_text())["per_seed"]
    assert all(len(v) == 5 for m in per_seed.values() for v in m.values())


def test_improvement_gain_conventions():
    base, value = improvement_gain(21.20, 19.86)
    assert base == pytest.approx(6.3208, abs=1e-4)
    assert value == pytest.approx(6.7472, abs=1e-4)
    # the published 6.74% is the relative-to-value convention
    assert abs(value - 6.74) < 0.01
    assert improvement_gain(0.5, 0.6, lower_is_better=False)[0] == pytest.approx(20.0)


def test_compare_rows_gain_against_global():
    values = {"rmse": {"global": [2.0, 2.0], "static": [1.0, 1.0], "zms": [1.5, 1.5], "zgd": [3.0, 3.0]}}
    rows = {r[0]: r for r in cli.compare_rows(values, {"rmse": True})}
    assert rows["static"][5] == 50.0 and rows["static"][6] == 100.0
    assert rows["zgd"][5] == -50.0
    assert rows["global"][3] == 0.0


def test_partition_file_round_trip(tmp_path):
    zones, edges, names = ("a", "b", "c"), (("a", "b"), ("b", "c")), {"a": "North Hall"}
    text = format_partition(zones, edges, names)
    assert parse_partition_text("# campus\n" + text) == (zones, edges, names)


def test_partition_file_bad_line_reports_line(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_partition_text("zone a\nzone b\nedge a\n", "p.txt")
    assert err.value.line == 3
    with pytest.raises(ConfigError):
        parse_partition_text("zone a\nedge a b\n")


def test_partition_file_in_config(tmp_path):
    (tmp_path / "zones.txt").write_text("zone a\nzone b\nzone c\nedge a b\nedge b c\n")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("rounds: 2\nscenario:\n  partition_file: zones.txt\n  n_clients: 9\n  mobility: [1.0]\n")
    s = load_settings(cfg)
    assert s.scenario.zones == ("a", "b", "c")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "x" / "f.txt", "one")
    atomic_write(tmp_path / "x" / "f.txt", "two")
    assert [p.name for p in (tmp_path / "x").iterdir()] == ["f.txt"]
    assert (tmp_path / "x" / "f.txt").read_text() == "two"


def test_selfcheck_passes(capsys):
    assert cli.main(["selfcheck"]) == 0
    assert "all checks passed" in capsys.readouterr().out


def test_selfcheck_catches_a_sign_flip(monkeypatch, capsys):
    from zonefl import selfcheck

    def flipped(own, neighbours, similarity="dot"):
        e = sigmoid(np.array([float(np.dot(own, g)) for g in neighbours]))
        w = np.exp(-e)
        return w / w.sum()

    monkeypatch.setattr(cli, "run_selfcheck", lambda: selfcheck.run_selfcheck(attention=flipped))
    assert cli.main(["selfcheck"]) == cli.EXIT_SELFCHECK
    assert "FAIL" in capsys.readouterr().out

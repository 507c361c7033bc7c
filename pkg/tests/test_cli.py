"""Tests for the command-line verbs, exit codes, and report artifacts."""

import json

import pytest
import yaml

from robustdet.cli import main
from robustdet.config import ConfigError, default_config_dict, load_config
from robustdet.pipeline import VARIANTS
from robustdet.world import load_dataset

SMALL = {
    "world": {"domain_shift": {"prototype_shift": 1.0, "extra_noise": 0.15}},
    "n_source_scenes": 25,
    "n_target_scenes": 25,
    "n_eval_scenes": 8,
    "phase1_steps": 250,
    "phase2_steps": 150,
    "phase3_steps": 250,
    "alpha_schedule": {"alpha_start": 100.0, "alpha_end": 0.5,
                       "anneal_steps": 180},
    "lr_schedule": {"initial": 0.1, "drop_step": 200, "dropped": 0.001},
    "seeds": [0],
}


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


# ----------------------------------------------------------------------
# config loading
# ----------------------------------------------------------------------

def test_load_config_round_trip(config_path):
    config, seeds = load_config(config_path)
    assert seeds == [0]
    assert config.n_source_scenes == 25
    assert config.alpha_schedule.alpha_end == 0.5
    assert config.world.domain_shift.prototype_shift == 1.0


def test_unknown_keys_are_hard_errors(tmp_path):
    for section, payload in [
        (None, {"misspelled_option": 1}),
        ("world", {"world": {"scene_sidth": 32}}),
        ("alpha_schedule", {"alpha_schedule": {"alpha_begin": 1.0}}),
    ]:
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(payload))
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(path)


def test_missing_and_malformed_config_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("foo: [unclosed")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(scalar)


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    config, seeds = load_config(path)
    assert seeds == [config.seed]
    assert config.mining_score_threshold == 0.7


def test_default_config_dict_is_loadable(tmp_path):
    path = tmp_path / "default.yaml"
    path.write_text(yaml.safe_dump(default_config_dict()))
    config, _ = load_config(path)
    assert config.phase3_steps == 2800


# ----------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------

def test_gen_data_writes_loadable_datasets(config_path, tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config_path), "--out", str(out)]) == 0
    source = load_dataset(out / "source.jsonl")
    target = load_dataset(out / "target.jsonl")
    assert len(source) == 25 and source.domain_tag == "source"
    assert len(target) == 25 and target.domain_tag == "target"
    stdout = capsys.readouterr().out
    assert "source.jsonl" in stdout and "target.jsonl" in stdout


def test_gen_data_bad_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("not_a_key: 1")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


# ----------------------------------------------------------------------
# run / ablate
# ----------------------------------------------------------------------

def test_run_writes_reports_and_manifest(config_path, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--config", str(config_path), "--out", str(out),
                 "--variants", "source_only,pseudo_label"])
    assert code == 0
    csv = (out / "report.csv").read_text()
    header, *rows = csv.strip().splitlines()
    assert header.startswith("variant,seed,map")
    assert any(r.startswith("source_only,0,") for r in rows)
    assert any(r.startswith("pseudo_label,mean,") for r in rows)

    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"source_only", "pseudo_label"}
    assert "mean_map" in summary["source_only"]

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["outputs"] == ["report.csv", "summary.json"]
    assert manifest["seeds"] == [0]
    assert manifest["wall_clock"]["elapsed_seconds"] > 0
    assert "source_only: mean mAP" in capsys.readouterr().out


def test_run_rejects_unknown_variant(config_path, tmp_path, capsys):
    code = main(["run", "--config", str(config_path),
                 "--out", str(tmp_path / "x"), "--variants", "ours_fulll"])
    assert code == 1
    assert "unknown variant" in capsys.readouterr().err


def test_run_seeds_flag_overrides_config(config_path, tmp_path):
    out = tmp_path / "run"
    code = main(["run", "--config", str(config_path), "--out", str(out),
                 "--variants", "source_only", "--seeds", "3,4"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["source_only"]["per_seed_map"]) == {"3", "4"}


def test_ablate_reports_all_variants_and_prints_table(config_path, tmp_path,
                                                      capsys):
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", str(config_path), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == set(VARIANTS)
    stdout = capsys.readouterr().out
    assert "Cls-Cor" in stdout and "FN-Cor" in stdout
    assert "ours_full" in stdout


def test_ablate_reruns_are_byte_identical(config_path, tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["ablate", "--config", str(config_path), "--out", str(out_a)]) == 0
    assert main(["ablate", "--config", str(config_path), "--out", str(out_b)]) == 0
    assert (out_a / "report.csv").read_bytes() == (out_b / "report.csv").read_bytes()
    assert (out_a / "summary.json").read_bytes() == (out_b / "summary.json").read_bytes()


# ----------------------------------------------------------------------
# verify-theorems
# ----------------------------------------------------------------------

def test_verify_theorems_passes_at_default_tolerance(capsys):
    assert main(["verify-theorems", "--trials", "20"]) == 0
    stdout = capsys.readouterr().out
    assert "categorical fusion" in stdout
    assert "below tolerance" in stdout


def test_verify_theorems_fails_at_zero_tolerance(capsys):
    assert main(["verify-theorems", "--trials", "5", "--tolerance", "0"]) == 1
    assert "FAIL" in capsys.readouterr().err

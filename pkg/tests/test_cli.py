import json
from pathlib import Path

import pytest
import yaml

from replaymem.cli import (EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, OUTPUT_ROOT_ENV, ValidationError,
                           compare_runs, execute_run, inspect_buffer, main)
from replaymem.config import ConfigError, ExperimentConfig, load_config, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TINY = CONFIGS / "tiny.yaml"


def tiny_cfg(tmp_path, **over):
    raw = yaml.safe_load(TINY.read_text())
    raw.update(over)
    raw["output_dir"] = str(tmp_path / over.get("output_dir", "x"))
    path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.yaml"
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return path


class TestConfig:
    def test_shipped_configs_load(self):
        for p in CONFIGS.glob("*.yaml"):
            cfg = load_config(p)
            assert isinstance(cfg, ExperimentConfig)

    def test_full_rate_configuration(self):
        cfg = load_config(CONFIGS / "full_rate.yaml")
        assert (cfg.strategy.value, cfg.N, cfg.S, cfg.K) == ("selective", 128, 100, 0.25)

    def test_k_out_of_range_names_field_and_line(self):
        text = TINY.read_text().replace("K: 0.25", "K: 1.5")
        with pytest.raises(ConfigError) as e:
            parse_config(text)
        assert e.value.field == "K"
        assert e.value.line == text.splitlines().index("K: 1.5") + 1

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as e:
            parse_config(TINY.read_text() + "sampling_rate: 5\n")
        assert e.value.field == "sampling_rate" and e.value.line is not None

    def test_unknown_source_key(self):
        text = TINY.read_text().replace("    noise_sigma: [0.2, 1.0]\n  - source_id: 1",
                                        "    noise_sigma: [0.2, 1.0]\n    colour: red\n  - source_id: 1")
        with pytest.raises(ConfigError) as e:
            parse_config(text)
        assert e.value.field == "sources[0].colour"

    def test_schema_version_required(self):
        with pytest.raises(ConfigError) as e:
            parse_config(TINY.read_text().replace("schema_version: 1", "schema_version: 2"))
        assert e.value.field == "schema_version"

    def test_batch_larger_than_buffer(self):
        with pytest.raises(ConfigError) as e:
            parse_config(TINY.read_text().replace("N: 16", "N: 2"))
        assert e.value.field == "N"

    def test_yaml_syntax_error_has_line(self):
        with pytest.raises(ConfigError) as e:
            parse_config("schema_version: 1\nstrategy: [unclosed\n")
        assert e.value.line is not None

    def test_resolved_round_trip(self):
        cfg = load_config(TINY)
        again = parse_config(cfg.to_yaml())
        assert again.to_dict() == cfg.to_dict()
        assert again.stream_key() == cfg.stream_key()


class TestRun:
    def test_artifacts_and_idempotence(self, tmp_path):
        cfg_path = tiny_cfg(tmp_path)
        assert main(["run", str(cfg_path)]) == EXIT_OK
        out = tmp_path / "x"
        names = {p.name for p in out.iterdir()}
        assert {"metrics.jsonl", "run.json", "summary.txt", "evictions.jsonl", "config.resolved.yaml",
                "snapshots"} <= names
        assert {p.name for p in (out / "snapshots").iterdir()} == {"source_0.jsonl", "source_1.jsonl", "final.jsonl"}
        first = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
        assert main(["run", str(cfg_path)]) == EXIT_OK
        assert {p: p.read_bytes() for p in out.rglob("*") if p.is_file()} == first
        info = json.loads((out / "run.json").read_text())
        assert info["label"] == "SM-25%"
        assert "Average" in (out / "summary.txt").read_text()

    def test_embedded_config_reproduces_run(self, tmp_path):
        cfg_path = tiny_cfg(tmp_path)
        out = tmp_path / "x"
        assert main(["run", str(cfg_path)]) == EXIT_OK
        metrics = (out / "metrics.jsonl").read_bytes()
        resolved = tmp_path / "resolved.yaml"
        resolved.write_text((out / "config.resolved.yaml").read_text())
        for p in out.rglob("*"):
            if p.is_file():
                p.unlink()
        assert main(["run", str(resolved)]) == EXIT_OK
        assert (out / "metrics.jsonl").read_bytes() == metrics

    def test_flag_overrides(self, tmp_path):
        cfg_path = tiny_cfg(tmp_path)
        assert main(["run", str(cfg_path), "--strategy", "linear", "--output-dir", str(tmp_path / "lin")]) == EXIT_OK
        info = json.loads((tmp_path / "lin" / "run.json").read_text())
        assert info["strategy"] == "linear"

    def test_output_root_env(self, tmp_path, monkeypatch):
        raw = yaml.safe_load(TINY.read_text())
        raw["output_dir"] = "rel/run"
        cfg_path = tmp_path / "rel.yaml"
        cfg_path.write_text(yaml.safe_dump(raw))
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
        assert main(["run", str(cfg_path)]) == EXIT_OK
        assert (tmp_path / "root" / "rel" / "run" / "run.json").is_file()

    def test_invalid_k_exit_code(self, tmp_path, capsys):
        cfg_path = tiny_cfg(tmp_path, K=1.5)
        assert main(["run", str(cfg_path)]) == EXIT_VALIDATION
        assert "K" in capsys.readouterr().err

    def test_invalid_flag_value(self, tmp_path, capsys):
        cfg_path = tiny_cfg(tmp_path)
        assert main(["run", str(cfg_path), "--K", "2"]) == EXIT_VALIDATION
        assert "K" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("not a directory")
        cfg_path = tiny_cfg(tmp_path)
        assert main(["run", str(cfg_path), "--output-dir", str(blocker / "sub")]) == EXIT_RUNTIME


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cmp")
    cfg = load_config(TINY)
    dirs = {}
    for strat in ("linear", "dynamic", "selective"):
        cfg.strategy = strat
        cfg.output_dir = str(base / strat)
        dirs[strat] = execute_run(cfg.validate())
    cfg.strategy = "dynamic"
    cfg.seed = 7
    cfg.output_dir = str(base / "dyn_seed7")
    dirs["seed7"] = execute_run(cfg.validate())
    cfg.seed = 0
    cfg.sources = cfg.sources[:1]
    cfg.output_dir = str(base / "other_stream")
    dirs["other"] = execute_run(cfg.validate())
    return dirs


class TestCompare:
    def test_three_way_table(self, runs):
        rep = compare_runs([runs["linear"], runs["dynamic"], runs["selective"]])
        assert set(rep["order"]) == {"LM", "DM", "SM-25%"}
        avgs = [rep["table"]["rows"][k]["average"] for k in rep["order"]]
        assert avgs == sorted(avgs, reverse=True)
        assert not rep["seed_mismatch"]
        for k in rep["order"]:
            assert rep["series"][k]["forgetting"] and rep["series"][k]["composition_entropy"]

    def test_single_dir_is_an_error(self, runs, capsys):
        with pytest.raises(ValidationError):
            compare_runs([runs["linear"]])
        assert main(["compare", str(runs["linear"])]) == EXIT_VALIDATION

    def test_seed_mismatch_warns(self, runs, capsys):
        rep = compare_runs([runs["linear"], runs["seed7"]])
        assert rep["seed_mismatch"] and rep["seeds"] == [0, 7]
        assert main(["compare", str(runs["linear"]), str(runs["seed7"])]) == EXIT_OK
        assert "warning" in capsys.readouterr().out

    def test_mismatched_streams(self, runs):
        with pytest.raises(ValidationError):
            compare_runs([runs["linear"], runs["other"]])
        assert main(["compare", str(runs["linear"]), str(runs["other"])]) == EXIT_VALIDATION

    def test_json_report(self, runs, tmp_path):
        out = tmp_path / "cmp.json"
        assert main(["compare", str(runs["dynamic"]), str(runs["selective"]), "--json", str(out)]) == EXIT_OK
        assert json.loads(out.read_text())["schema"] == "replaymem.compare/1"

    def test_inspect_buffer(self, runs, capsys):
        snap = runs["selective"] / "snapshots" / "final.jsonl"
        text = inspect_buffer(snap)
        assert "strategy=selective" in text and "source 0" in text and "source 1" in text
        assert main(["inspect-buffer", str(snap)]) == EXIT_OK
        assert "per-source counts" in capsys.readouterr().out

import json
import os

import pytest

from app.config import effective_config_dict
from app.main import main
from app.records.audit import RunAuditLogger
from app.services.federation import FederationService


def write_config(tmp_path, config, **updates) -> str:
    data = effective_config_dict(config)
    for section, values in updates.items():
        if isinstance(values, dict):
            data[section].update(values)
        else:
            data[section] = values
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return str(path)


def read(path) -> str:
    with open(path, encoding="utf-8") as f:
        return f.read()


def last_json(capsys):
    return json.loads(capsys.readouterr().out)


def read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def checkpoint_files(out) -> list:
    root = out / "checkpoints"
    return [str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()]


class TestGenerateCommand:
    """Tests for ``generate``"""

    def test_writes_dataset_and_manifest(self, tmp_path, quick_config):
        """generate writes one CSV per area and lists them in the manifest"""
        out = tmp_path / "gen"
        assert main(["generate", "--config", write_config(tmp_path, quick_config), "--out", str(out)]) == 0
        assert sorted(os.listdir(out / "dataset")) == ["area_0.csv", "area_1.csv"]
        manifest = json.loads(read(out / "manifest.json"))
        assert manifest["dataset_files"] == ["area_0.csv", "area_1.csv"]
        assert RunAuditLogger(str(out)).read_events("dataset_generated")

    def test_generated_dataset_can_be_replayed(self, tmp_path, quick_config):
        """a generated dataset directory feeds a later run"""
        gen = tmp_path / "gen"
        main(["generate", "--config", write_config(tmp_path, quick_config), "--out", str(gen)])
        config = write_config(tmp_path, quick_config, dataset_dir=str(gen / "dataset"))
        assert main(["run", "--config", config, "--out", str(tmp_path / "run")]) == 0


class TestRunCommand:
    """Tests for ``run`` and the per-kind commands"""

    def test_writes_report(self, tmp_path, quick_config):
        """run writes every report file, a checkpoint per twin and one audit event per round"""
        out = tmp_path / "run"
        assert main(["run", "--config", write_config(tmp_path, quick_config), "--out", str(out)]) == 0
        for name in ("results.csv", "history.csv", "costs.csv", "downstream.csv", "charts.svg", "manifest.json"):
            assert (out / name).exists()
        assert (out / "checkpoints" / "gating_seed0" / "V_to_W" / "twin.json").exists()
        assert len(RunAuditLogger(str(out)).read_events("round_completed")) == 2

    def test_same_config_same_results(self, tmp_path, quick_config):
        """two runs of one config produce identical results.csv"""
        config = write_config(tmp_path, quick_config)
        main(["run", "--config", config, "--out", str(tmp_path / "a")])
        main(["run", "--config", config, "--out", str(tmp_path / "b")])
        assert read(tmp_path / "a" / "results.csv") == read(tmp_path / "b" / "results.csv")

    def test_thread_count_does_not_change_results(self, tmp_path, quick_config):
        """one and eight threads give byte-identical results and checkpoints"""
        config = write_config(tmp_path, quick_config, fed={"aggregation": "gated", "local_lr": 1e-6})
        assert main(["run", "--config", config, "--out", str(tmp_path / "one"), "--threads", "1"]) == 0
        assert main(["run", "--config", config, "--out", str(tmp_path / "eight"), "--threads", "8"]) == 0
        assert read(tmp_path / "one" / "results.csv") == read(tmp_path / "eight" / "results.csv")
        one = checkpoint_files(tmp_path / "one")
        eight = checkpoint_files(tmp_path / "eight")
        assert one and sorted(one) == sorted(eight)
        for name in one:
            assert read_bytes(tmp_path / "one" / "checkpoints" / name) == \
                read_bytes(tmp_path / "eight" / "checkpoints" / name)

    def test_manifest_replays_the_run(self, tmp_path, quick_config):
        """the manifest written by a run is itself a config that reproduces it"""
        main(["run", "--config", write_config(tmp_path, quick_config), "--out", str(tmp_path / "first")])
        manifest = str(tmp_path / "first" / "manifest.json")
        assert main(["run", "--config", manifest, "--out", str(tmp_path / "again")]) == 0
        assert read(tmp_path / "first" / "results.csv") == read(tmp_path / "again" / "results.csv")

    def test_unified_mode(self, tmp_path, quick_config, capsys):
        """unified mode trains one twin per fusor and seed"""
        config = write_config(tmp_path, quick_config, ops=["V->W", "V+W->S"])
        capsys.readouterr()
        assert main(["run", "--config", config, "--out", str(tmp_path / "u"), "--mode", "unified"]) == 0
        assert last_json(capsys)["rows"] == 2

    def test_transfer_command(self, tmp_path, quick_config):
        """the transfer command accepts an op on the command line"""
        config = write_config(tmp_path, quick_config)
        assert main(["transfer", "--config", config, "--out", str(tmp_path / "t"), "--op", "W->S"]) == 0
        assert "W->S" in read(tmp_path / "t" / "results.csv")

    def test_kind_without_ops(self, tmp_path, quick_config):
        """an op-kind command with no ops of that kind is a config error"""
        assert main(["merge", "--config", write_config(tmp_path, quick_config), "--out", str(tmp_path / "m")]) == 1

    def test_bad_config_exits_one(self, tmp_path):
        """a schema violation exits 1"""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"fed": {"rounds": -1}}))
        assert main(["run", "--config", str(path)]) == 1

    def test_missing_config_exits_three(self, tmp_path):
        """an unreadable config file exits 3"""
        assert main(["run", "--config", str(tmp_path / "missing.json")]) == 3

    def test_enforced_bound_exits_one(self, tmp_path, quick_config):
        """the enforce policy turns any bound violation into exit 1"""
        config = write_config(tmp_path, quick_config, fed={"step_size_policy": "enforce"})
        assert main(["run", "--config", config, "--out", str(tmp_path / "e")]) == 1

    def test_gated_run_far_above_bound_exits_one(self, tmp_path, quick_config, capsys):
        """a local rate a thousand times the bound stops a gated run under warn"""
        bound = FederationService.check_step_size(1.0, 1.0, 1e-3, 2, 10.0).bound
        config = write_config(tmp_path, quick_config,
                              fed={"aggregation": "gated", "local_lr": 1000 * bound})
        capsys.readouterr()
        assert main(["run", "--config", config, "--out", str(tmp_path / "g")]) == 1
        assert "step-size bound" in last_json(capsys)["message"]

    def test_gated_run_slightly_above_bound_warns(self, tmp_path, quick_config):
        """within the fatal factor the run completes and records the failed check"""
        bound = FederationService.check_step_size(1.0, 1.0, 1e-3, 2, 10.0).bound
        config = write_config(tmp_path, quick_config,
                              fed={"aggregation": "gated", "local_lr": 2 * bound})
        out = tmp_path / "w"
        assert main(["run", "--config", config, "--out", str(out)]) == 0
        manifest = json.loads(read(out / "manifest.json"))
        assert manifest["step_size"]["gating_seed0"]["passed"] is False

    def test_divergence_exits_two(self, tmp_path, quick_config, capsys):
        """a non-finite run exits 2 and records the divergence"""
        config = write_config(tmp_path, quick_config, fed={"local_lr": 1e30, "rounds": 3, "local_steps": 5})
        capsys.readouterr()
        out = tmp_path / "d"
        assert main(["run", "--config", config, "--out", str(out)]) == 2
        result = last_json(capsys)
        report = json.loads(read(result["divergence_report"]))
        assert report["round"] is not None
        assert RunAuditLogger(str(out)).read_events("divergence")


class TestOtherCommands:
    """Tests for ``costs``, ``check-bound`` and ``schema``"""

    def test_costs(self, tmp_path, quick_config, capsys):
        """costs prints all three ledgers and writes costs.csv"""
        capsys.readouterr()
        assert main(["costs", "--config", write_config(tmp_path, quick_config), "--out", str(tmp_path / "c")]) == 0
        ledgers = last_json(capsys)["ledgers"]["gating"]
        assert set(ledgers) == {"federated", "centralized", "direct"}
        assert (tmp_path / "c" / "costs.csv").exists()

    def test_check_bound(self, capsys):
        """check-bound reports the bound and whether local_lr passes"""
        capsys.readouterr()
        args = ["check-bound", "--G", "1", "--L", "1", "--mu", "1", "--beta", "1", "--eta", "1", "--eta-l", "0.5"]
        assert main(args) == 0
        result = last_json(capsys)
        assert result["bound"] == pytest.approx(1.0 / 96.0)
        assert result["passed"] is False

    def test_check_bound_missing_constants(self, capsys):
        """check-bound without G or L exits 1"""
        assert main(["check-bound", "--mu", "1"]) == 1

    def test_schema(self, capsys):
        """schema prints the config JSON schema"""
        capsys.readouterr()
        assert main(["schema"]) == 0
        assert "properties" in last_json(capsys)["schema"]

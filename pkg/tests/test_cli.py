import csv
import json
import math
import os
from pathlib import Path

from evocomp.cli import main

GOLDEN_DIR = Path(__file__).parent / "goldens"


def write_config(tmp_path, **overrides):
    config = {
        "task": "prune_structured",
        "model": "bundled:tiny_mlp",
        "dataset": "bundled:two_spirals",
        "evaluator": {"type": "builtin"},
        "engine": {
            "accuracy_floor": 0.9,
            "population_size": 12,
            "iterations": 6,
            "seed": 7,
        },
    }
    for key, value in overrides.items():
        if key == "engine":
            config["engine"].update(value)
        else:
            config[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config, indent=2))
    return path


def synthetic_config(tmp_path, coefficients=(0.5, 0.3, 0.8), floor=0.8, **engine):
    return write_config(
        tmp_path,
        dataset=None,
        evaluator={
            "type": "synthetic",
            "base_accuracy": 0.9,
            "coefficients": list(coefficients),
        },
        engine={"accuracy_floor": floor, **engine},
    )


class TestFlops:
    def test_bundled_mlp_report(self, capsys):
        assert main(["flops", "--model", "bundled:tiny_mlp"]) == 2  # not a path
        code = main(["flops", "--model", str(asset("tiny_mlp"))])
        out = capsys.readouterr().out
        assert code == 0
        assert "total MACs: 1152" in out  # hand sum: 2*32 + 32*32 + 32*2
        assert "fully_connected" in out

    def test_plan_ratio_identity(self, capsys, tmp_path):
        plan = [{"layer": i, "action": {"type": "none"}} for i in range(3)]
        plan_path = tmp_path / "plan.json"
        plan_path.write_text(json.dumps(plan))
        code = main(
            ["flops", "--model", str(asset("tiny_mlp")), "--plan", str(plan_path)]
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "flops ratio: 1.000000" in out

    def test_missing_file_exits_2(self, capsys):
        assert main(["flops", "--model", "/nonexistent/model.evm"]) == 2
        assert "error:" in capsys.readouterr().err


def asset(name):
    from evocomp.assets import asset_path

    return asset_path(name)


class TestThresholds:
    def test_synthetic_matches_closed_form(self, tmp_path, capsys):
        config = synthetic_config(tmp_path)
        out_dir = tmp_path / "out"
        assert main(["thresholds", "--config", str(config), "--out", str(out_dir)]) == 0
        payload = json.loads((out_dir / "thresholds.json").read_text())
        for theta, c in zip(payload["theta"], (0.5, 0.3, 0.8)):
            assert abs(theta - math.sqrt(0.1 / c)) <= 1 / 64

    def test_rerun_is_identical(self, tmp_path):
        config = synthetic_config(tmp_path)
        first = tmp_path / "a"
        second = tmp_path / "b"
        main(["thresholds", "--config", str(config), "--out", str(first)])
        main(["thresholds", "--config", str(config), "--out", str(second)])
        assert (first / "thresholds.json").read_bytes() == (
            second / "thresholds.json"
        ).read_bytes()

    def test_infeasible_floor_exits_1(self, tmp_path, capsys):
        config = synthetic_config(tmp_path, floor=0.95)
        code = main(["thresholds", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "lower the floor" in capsys.readouterr().err


class TestSearch:
    def test_golden_best_plan_seed7(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out_dir = tmp_path / "run"
        assert main(["search", "--config", str(config), "--out", str(out_dir)]) == 0
        produced = (out_dir / "best_plan.json").read_bytes()
        golden = GOLDEN_DIR / "best_plan_seed7.json"
        if os.environ.get("EVOCOMP_REGEN_GOLDENS") == "1":
            GOLDEN_DIR.mkdir(exist_ok=True)
            golden.write_bytes(produced)
        assert produced == golden.read_bytes()

    def test_zero_iterations_runs(self, tmp_path):
        config = write_config(tmp_path, engine={"iterations": 0})
        out_dir = tmp_path / "run"
        assert main(["search", "--config", str(config), "--out", str(out_dir)]) == 0
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["result"]["score"] > 0
        lines = (out_dir / "history.jsonl").read_text().splitlines()
        assert len(lines) == 12  # only the initial population was evaluated

    def test_odd_population_exits_2_naming_field(self, tmp_path, capsys):
        config = write_config(tmp_path, engine={"population_size": 7})
        code = main(["search", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "population_size" in capsys.readouterr().err

    def test_history_is_deterministic_for_seed(self, tmp_path):
        config = write_config(tmp_path)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        main(["search", "--config", str(config), "--out", str(out_a)])
        main(["search", "--config", str(config), "--out", str(out_b)])
        assert (out_a / "history.jsonl").read_bytes() == (
            out_b / "history.jsonl"
        ).read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path):
        config = write_config(tmp_path)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        main(["search", "--config", str(config), "--out", str(out_a), "--seed", "99"])
        main(["search", "--config", str(config), "--out", str(out_b)])
        manifest = json.loads((out_a / "manifest.json").read_text())
        assert manifest["seed"] == 99
        assert (out_a / "history.jsonl").read_bytes() != (
            out_b / "history.jsonl"
        ).read_bytes()

    def test_manifest_records_asset_hashes(self, tmp_path):
        config = write_config(tmp_path, engine={"iterations": 1})
        out_dir = tmp_path / "run"
        main(["search", "--config", str(config), "--out", str(out_dir)])
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert len(manifest["asset_hashes"]["model"]) == 64
        assert len(manifest["asset_hashes"]["dataset"]) == 64
        assert manifest["started"] <= manifest["finished"]

    def test_workers_flag_preserves_results(self, tmp_path):
        config = write_config(tmp_path, engine={"iterations": 3})
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        main(["search", "--config", str(config), "--out", str(out_a)])
        main(["search", "--config", str(config), "--out", str(out_b), "--workers", "4"])
        assert (out_a / "history.jsonl").read_bytes() == (
            out_b / "history.jsonl"
        ).read_bytes()


class TestDecomposeSearch:
    def test_combined_task_on_cnn_asset(self, tmp_path):
        config = write_config(
            tmp_path,
            task="decompose_prune",
            model="bundled:small_cnn",
            dataset="bundled:blocks8",
            engine={"population_size": 8, "iterations": 2, "accuracy_floor": 0.85},
        )
        out_dir = tmp_path / "run"
        assert main(["search", "--config", str(config), "--out", str(out_dir)]) == 0
        best = json.loads((out_dir / "best_plan.json").read_text())
        assert best["accuracy"] > 0.85
        kinds = {entry["action"]["type"] for entry in best["plan"]}
        assert kinds == {"prune_decompose"}


class TestPareto:
    def test_row_counts(self, tmp_path):
        config = write_config(
            tmp_path, engine={"population_size": 8, "iterations": 2}
        )
        out_dir = tmp_path / "out"
        code = main(
            ["pareto", "--config", str(config), "--out", str(out_dir),
             "--thresholds", "0.9,0.95"]
        )
        assert code == 0
        with open(out_dir / "pareto.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        uniform = [r for r in rows if r["source"] == "uniform"]
        evolved = [r for r in rows if r["source"] == "evolved"]
        assert len(uniform) == 65
        assert len(evolved) == 2

    def test_duplicate_thresholds_deduplicated(self, tmp_path, caplog):
        config = write_config(
            tmp_path, engine={"population_size": 8, "iterations": 1}
        )
        out_dir = tmp_path / "out"
        with caplog.at_level("WARNING"):
            code = main(
                ["pareto", "--config", str(config), "--out", str(out_dir),
                 "--thresholds", "0.9,0.9,0.95"]
            )
        assert code == 0
        assert any("duplicate" in r.message for r in caplog.records)
        with open(out_dir / "pareto.csv", newline="") as fh:
            evolved = [r for r in csv.DictReader(fh) if r["source"] == "evolved"]
        assert len(evolved) == 2

    def test_single_threshold_rejected(self, tmp_path, capsys):
        config = write_config(tmp_path)
        code = main(
            ["pareto", "--config", str(config), "--out", str(tmp_path / "o"),
             "--thresholds", "0.9"]
        )
        assert code == 2

    def test_decomposition_task_rejected(self, tmp_path, capsys):
        config = write_config(tmp_path, task="decompose")
        code = main(
            ["pareto", "--config", str(config), "--out", str(tmp_path / "o"),
             "--thresholds", "0.9,0.95"]
        )
        assert code == 2
        assert "pruning task" in capsys.readouterr().err

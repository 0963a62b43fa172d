"""Command-line driver: FLOPs reports, threshold search, runs, Pareto sweeps.

Run configuration is a single JSON document:

    {
      "task": "prune_structured",
      "model": "bundled:tiny_mlp",          // path or bundled:<name>
      "dataset": "bundled:two_spirals",     // required for the builtin evaluator
      "dataset_fraction": 1.0,
      "evaluator": {"type": "builtin"},
      "engine": {"accuracy_floor": 0.9, "population_size": 100, ...}
    }

Evaluator variants: {"type":"builtin"}, {"type":"synthetic",
"base_accuracy":0.9,"coefficients":[...]}, and {"type":"external",
"command":[...],"timeout_s":300}. Relative model/dataset paths resolve
against the config file's directory.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
FLOPs are MAC counts (one multiply-accumulate each).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .assets import asset_path
from .compress import compressed_flops, kept_output_channels, layer_compressed_flops
from .engine import EngineConfig, EvolveResult, compute_thresholds, evolve
from .errors import (
    ConfigError,
    DecompositionError,
    EvalError,
    InfeasibleThresholdError,
    ModelFormatError,
    PlanError,
    ProtocolError,
    SchemaError,
)
from .evaluate import (
    BuiltinEvaluator,
    ExternalEvaluatorPool,
    SyntheticEvaluator,
    SyntheticLandscape,
    load_dataset,
)
from .genome import (
    TASK_PRUNE_STRUCTURED,
    TASK_PRUNE_UNSTRUCTURED,
    build_schema,
    decode,
    plan_from_json,
    plan_to_json,
)
from .model import layer_flops, load_model, manifest_dict, model_flops

log = logging.getLogger(__name__)

_ENGINE_FIELDS = {
    "accuracy_floor", "population_size", "iterations", "crossover_prob",
    "swap_prob", "mutation_prob", "tweak_prob", "mutation_sigma",
    "penalty_floor", "elitism", "seed", "init_max_attempts", "init_policy",
}


@dataclass
class RunConfig:
    task: str
    model_path: Path
    dataset_path: Path | None
    dataset_fraction: float
    evaluator: dict
    engine: EngineConfig
    raw: dict


def _resolve_path(ref: str, base: Path) -> Path:
    if ref.startswith("bundled:"):
        return asset_path(ref.split(":", 1)[1])
    path = Path(ref)
    return path if path.is_absolute() else base / path


def load_run_config(path: Path, seed_override: int | None = None) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    for key in ("task", "model", "engine"):
        if key not in raw:
            raise ConfigError(f"run config is missing {key!r}")
    engine_raw = dict(raw["engine"])
    unknown = set(engine_raw) - _ENGINE_FIELDS
    if unknown:
        raise ConfigError(f"unknown engine config keys: {sorted(unknown)}")
    if seed_override is not None:
        engine_raw["seed"] = seed_override
    try:
        engine = EngineConfig(**engine_raw)
    except TypeError as exc:
        raise ConfigError(f"bad engine config: {exc}") from exc
    engine.validate()

    evaluator = raw.get("evaluator", {"type": "builtin"})
    if isinstance(evaluator, str):
        evaluator = {"type": evaluator}
    base = path.parent
    dataset = raw.get("dataset")
    return RunConfig(
        task=str(raw["task"]),
        model_path=_resolve_path(str(raw["model"]), base),
        dataset_path=_resolve_path(str(dataset), base) if dataset else None,
        dataset_fraction=float(raw.get("dataset_fraction", 1.0)),
        evaluator=evaluator,
        engine=engine,
        raw=raw,
    )


def build_evaluator(config: RunConfig, model, tensors, schema, workers: int):
    kind = config.evaluator.get("type", "builtin")
    if kind == "builtin":
        if config.dataset_path is None:
            raise ConfigError("builtin evaluator requires a dataset")
        dataset = load_dataset(config.dataset_path, config.dataset_fraction)
        return BuiltinEvaluator(model, tensors, dataset)
    if kind == "synthetic":
        coefficients = tuple(float(c) for c in config.evaluator["coefficients"])
        if len(coefficients) != schema.length:
            raise ConfigError(
                f"synthetic evaluator has {len(coefficients)} coefficients for "
                f"a schema of length {schema.length}"
            )
        landscape = SyntheticLandscape(
            float(config.evaluator["base_accuracy"]), coefficients
        )
        return SyntheticEvaluator(landscape, schema)
    if kind == "external":
        command = [str(c) for c in config.evaluator["command"]]
        timeout = float(config.evaluator.get("timeout_s", 300.0))
        return ExternalEvaluatorPool(
            command, schema, manifest_dict(model),
            workers=max(1, workers), timeout=timeout,
        )
    raise ConfigError(f"unknown evaluator type {kind!r}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json_atomic(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# flops


def cmd_flops(args) -> int:
    model, tensors = load_model(args.model)
    plan = None
    if args.plan:
        with open(args.plan) as fh:
            payload = json.load(fh)
        if isinstance(payload, dict) and "plan" in payload:
            payload = payload["plan"]  # accept a best_plan.json as-is
        plan = plan_from_json(payload, model.num_layers)
        plan.validate(model)
    per_layer = [layer_flops(l) for l in model.layers]
    total = sum(per_layer)
    print(f"model: {model.name}  layers: {model.num_layers}  (MACs = multiply-accumulates)")
    header = f"{'layer':>5}  {'kind':<16} {'out':>4} {'in':>4} {'k':>2} {'MACs':>12}"
    if plan is not None:
        kept = kept_output_channels(model, plan)
        header += f" {'compressed':>12}"
        compressed_per_layer = []
        for i, layer in enumerate(model.layers):
            kept_in = layer.in_channels if i == 0 else kept[i - 1]
            compressed_per_layer.append(
                layer_compressed_flops(layer, plan[i], kept_in, kept[i])
            )
    print(header)
    for i, layer in enumerate(model.layers):
        row = (
            f"{i:>5}  {layer.kind:<16} {layer.out_channels:>4} "
            f"{layer.in_channels:>4} {layer.kernel:>2} {per_layer[i]:>12}"
        )
        if plan is not None:
            row += f" {compressed_per_layer[i]:>12}"
        print(row)
    print(f"total MACs: {total}")
    if plan is not None:
        compressed_total = compressed_flops(model, plan)
        ratio = compressed_total / total if total else 1.0
        print(f"compressed MACs: {compressed_total}")
        print(f"flops ratio: {ratio:.6f}")
    return 0


# ---------------------------------------------------------------------------
# thresholds


def cmd_thresholds(args) -> int:
    config = load_run_config(args.config, args.seed)
    model, tensors = load_model(config.model_path)
    schema = build_schema(model, config.task)
    evaluator = build_evaluator(config, model, tensors, schema, args.workers)
    try:
        thresholds = compute_thresholds(
            model, schema, evaluator, config.engine.accuracy_floor
        )
    finally:
        evaluator.close()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "task": config.task,
        "accuracy_floor": config.engine.accuracy_floor,
        "theta": [float(t) for t in thresholds],
        "genes": schema.to_json(),
    }
    target = out_dir / "thresholds.json"
    _write_json_atomic(target, payload)
    print(f"wrote {target}")
    return 0


# ---------------------------------------------------------------------------
# search


def _run_search(config: RunConfig, workers: int, record_sink=None):
    model, tensors = load_model(config.model_path)
    schema = build_schema(model, config.task)
    evaluator = build_evaluator(config, model, tensors, schema, workers)
    try:
        result = evolve(
            model, schema, evaluator, config.engine,
            workers=workers, record_sink=record_sink,
        )
    finally:
        evaluator.close()
    return result, model, schema


def _result_summary(config: RunConfig, result: EvolveResult, model, schema) -> dict:
    plan = decode(result.best_genome, schema, model)
    ratio = (
        (result.base_flops - result.best_report.delta_flops) / result.base_flops
        if result.base_flops
        else 1.0
    )
    return {
        "task": config.task,
        "genome": [float(v) for v in result.best_genome],
        "plan": plan_to_json(plan),
        "score": result.best_report.score,
        "accuracy": result.best_report.accuracy,
        "delta_flops": result.best_report.delta_flops,
        "flops_ratio": ratio,
        "below_floor": result.best_report.below_floor,
        "base_accuracy": result.base_accuracy,
        "base_flops": result.base_flops,
    }


def cmd_search(args) -> int:
    config = load_run_config(args.config, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _utc_now()

    history_path = out_dir / "history.jsonl"
    with open(history_path, "w") as history_file:

        def sink(record: dict) -> None:
            history_file.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
            history_file.write("\n")
            history_file.flush()

        result, model, schema = _run_search(config, args.workers, record_sink=sink)

    summary = _result_summary(config, result, model, schema)
    _write_json_atomic(out_dir / "best_plan.json", summary)

    manifest = {
        "config": config.raw,
        "seed": config.engine.seed,
        "workers": args.workers,
        "started": started,
        "finished": _utc_now(),
        "asset_hashes": {
            "model": _sha256(config.model_path),
            "dataset": _sha256(config.dataset_path) if config.dataset_path else None,
        },
        "init_attempts": result.init_attempts,
        "thresholds": (
            None if result.thresholds is None else [float(t) for t in result.thresholds]
        ),
        "result": summary,
    }
    _write_json_atomic(out_dir / "manifest.json", manifest)

    print(
        f"best score {summary['score']:.6g}  accuracy {summary['accuracy']:.4f}  "
        f"flops ratio {summary['flops_ratio']:.4f}"
    )
    print(f"artifacts in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# pareto


def cmd_pareto(args) -> int:
    config = load_run_config(args.config, args.seed)
    if config.task not in (TASK_PRUNE_STRUCTURED, TASK_PRUNE_UNSTRUCTURED):
        raise ConfigError(
            "pareto sweeps compare against uniform pruning and require a "
            f"pruning task, not {config.task!r}"
        )
    thresholds: list[float] = []
    for value in args.thresholds.split(","):
        value = value.strip()
        if not value:
            continue
        floor = float(value)
        if floor in thresholds:
            log.warning("duplicate accuracy threshold %s dropped", value)
            continue
        thresholds.append(floor)
    if len(thresholds) < 2:
        raise ConfigError("pareto needs at least 2 distinct accuracy thresholds")

    model, tensors = load_model(config.model_path)
    schema = build_schema(model, config.task)
    evaluator = build_evaluator(config, model, tensors, schema, args.workers)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "pareto.csv"
    base = model_flops(model)

    try:
        with open(target, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source", "acc_thr", "ratio", "accuracy", "flops_ratio"])
            fh.flush()
            for step in range(65):
                ratio = step / 64.0
                genome = np.full(schema.length, ratio, dtype=np.float64)
                plan = decode(genome, schema, model)
                accuracy = evaluator.accuracy(genome, plan)
                writer.writerow(
                    ["uniform", "", f"{ratio:.6f}", repr(accuracy),
                     repr(compressed_flops(model, plan) / base if base else 1.0)]
                )
                fh.flush()
            for floor in thresholds:
                engine = dataclasses.replace(config.engine, accuracy_floor=floor)
                result = evolve(model, schema, evaluator, engine, workers=args.workers)
                ratio = (
                    (result.base_flops - result.best_report.delta_flops)
                    / result.base_flops
                    if result.base_flops
                    else 1.0
                )
                writer.writerow(
                    ["evolved", repr(floor), "", repr(result.best_report.accuracy),
                     repr(ratio)]
                )
                fh.flush()
    finally:
        evaluator.close()
    print(f"wrote {target}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evocomp",
        description="Evolutionary search for per-layer compression settings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    flops = sub.add_parser("flops", help="per-layer MAC report")
    flops.add_argument("--model", required=True, type=Path)
    flops.add_argument("--plan", type=Path, default=None)
    flops.set_defaults(func=cmd_flops)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path)
    common.add_argument("--out", type=Path, default=Path("evocomp-out"))
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=1)

    thresholds = sub.add_parser(
        "thresholds", parents=[common], help="per-gene compression limits"
    )
    thresholds.set_defaults(func=cmd_thresholds)

    search = sub.add_parser("search", parents=[common], help="full evolution run")
    search.set_defaults(func=cmd_search)

    pareto = sub.add_parser(
        "pareto", parents=[common], help="accuracy/FLOPs frontier sweep"
    )
    pareto.add_argument(
        "--thresholds", required=True,
        help="comma-separated accuracy floors, e.g. 0.85,0.9,0.95",
    )
    pareto.set_defaults(func=cmd_pareto)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelFormatError, SchemaError, PlanError,
            FileNotFoundError, IsADirectoryError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InfeasibleThresholdError, ProtocolError, EvalError,
            DecompositionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

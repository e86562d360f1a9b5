"""Command line entry point: synth, pretrain, finetune, evaluate, analyze,
gradcheck. Config precedence is defaults < config file < --set overrides,
every override logged; every run writes a run_manifest with the config hash,
seed, and library versions.

Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (
    export_frequency_csv,
    export_report_json,
    export_similarity_csv,
    export_transitions_csv,
    frequency,
    report_path,
    similarity,
    token_streams,
    transitions,
)
from .errors import CheckpointError, ConfigError, DataError, MotionPrimError, NumericError
from .ingest import load_dataset, load_manifest, load_synthetic_spec, write_synthetic_dataset
from .metadata import make_provider
from .model import LossWeights, ModelConfig, PreparedBatch, gradient_suite, prepare_windows
from .training import (
    OptimizerConfig,
    checkpoint_hash,
    evaluate,
    finetune,
    load_checkpoint,
    policy_by_name,
    pretrain,
    save_checkpoint,
    tokenize_dataset,
    write_log,
)

logger = logging.getLogger("motionprim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5

_DEFAULT_RUN_CONFIG: dict = {
    "model": {},  # ModelConfig field overrides
    "optimizer": {},  # OptimizerConfig field overrides
    "loss_weights": None,  # None -> stage preset
    "datasets": [],
    "seed": 0,
    "out_dir": "runs",
    "run_id": None,  # None -> derived from command + config hash
    "freeze": "encoder-finetune",
    "split_fraction": 0.2,
    "codebook_init": "kmeans-seeded",
    "provider": {"kind": "deterministic-hash", "dim": 768, "seed": 0, "path": None},
    "workers": 1,
}

_PROVIDER_KEYS = {"kind", "dim", "seed", "path"}
_WEIGHT_KEYS = {"lambda_mae", "lambda_cls", "lambda_vq"}


def _check_keys(raw: dict, allowed: set[str], context: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")


def _dataclass_fields(cls) -> set[str]:
    return set(cls.__dataclass_fields__)  # type: ignore[attr-defined]


def load_run_config(path: str | None, overrides: list[str]) -> tuple[dict, list[str]]:
    """Merged raw config dict plus a log of applied override strings."""
    merged = copy.deepcopy(_DEFAULT_RUN_CONFIG)
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        _check_keys(raw, set(_DEFAULT_RUN_CONFIG), "config")
        for key, value in raw.items():
            if key in ("model", "optimizer", "provider") and value is not None:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
    applied = []
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override {override!r} is not of the form path.to.key=value")
        dotted, _, text = override.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text  # bare strings need no quotes
        target = merged
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigError(f"override path {dotted!r} does not exist")
            target = target[part]
        leaf = parts[-1]
        if len(parts) == 1 and leaf not in merged:
            raise ConfigError(f"unknown config key {leaf!r}")
        old = target.get(leaf, "<unset>")
        target[leaf] = value
        applied.append(f"{dotted}: {old!r} -> {value!r}")
        logger.info("config override %s: %r -> %r", dotted, old, value)
    # validate nested sections
    _check_keys(merged["model"], _dataclass_fields(ModelConfig), "model config")
    _check_keys(merged["optimizer"], _dataclass_fields(OptimizerConfig), "optimizer config")
    _check_keys(merged["provider"], _PROVIDER_KEYS, "provider config")
    if merged["loss_weights"] is not None:
        _check_keys(merged["loss_weights"], _WEIGHT_KEYS, "loss weights")
    return merged, applied


def config_hash(merged: dict) -> str:
    return hashlib.sha256(json.dumps(merged, sort_keys=True).encode()).hexdigest()


def _build_model_config(merged: dict) -> ModelConfig:
    return ModelConfig(**merged["model"])


def _build_optimizer(merged: dict) -> OptimizerConfig:
    return OptimizerConfig(**merged["optimizer"])


def _build_provider(merged: dict):
    section = {**_DEFAULT_RUN_CONFIG["provider"], **merged["provider"]}
    return make_provider(
        section["kind"], dim=section["dim"], seed=section["seed"], path=section["path"]
    )


def _build_weights(merged: dict, stage_default: LossWeights) -> LossWeights:
    if merged["loss_weights"] is None:
        return stage_default
    return LossWeights(**{key: float(v) for key, v in merged["loss_weights"].items()})


def _run_id(merged: dict, command: str) -> str:
    if merged.get("run_id"):
        return str(merged["run_id"])
    return f"{command}-{config_hash(merged)[:8]}"


def _write_run_manifest(out_dir: Path, command: str, merged: dict, applied: list[str], outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(merged),
        "seed": merged.get("seed", 0),
        "overrides": applied,
        "outputs": sorted(outputs),
        "versions": {
            "motionprim": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _prepare_dataset(path: str, model_config: ModelConfig, provider) -> PreparedBatch:
    manifest = load_manifest(path)
    loaded = load_dataset(manifest)
    if not loaded.windows:
        raise DataError(f"dataset {manifest.name} produced no complete windows")
    return prepare_windows(loaded.windows, model_config, provider, source=loaded.name)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_synthetic_spec(args.spec)
    manifest_path = write_synthetic_dataset(spec, args.out_dir)
    _write_run_manifest(
        Path(args.out_dir),
        "synth",
        {"spec": str(args.spec), "seed": spec.seed},
        [],
        [str(manifest_path), str(Path(args.out_dir) / "data.csv")],
    )
    print(f"wrote {manifest_path}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    merged, applied = load_run_config(args.config, args.set or [])
    if not merged["datasets"]:
        raise ConfigError("pretraining needs at least one dataset manifest in 'datasets'")
    model_config = _build_model_config(merged)
    opt = _build_optimizer(merged)
    provider = _build_provider(merged)
    seed = int(merged["seed"])
    out_dir = Path(merged["out_dir"])
    run_id = _run_id(merged, "pretrain")
    datasets = [_prepare_dataset(p, model_config, provider) for p in merged["datasets"]]
    from .model import PRETRAIN_WEIGHTS

    weights = _build_weights(merged, PRETRAIN_WEIGHTS)
    model, records = pretrain(
        model_config,
        datasets,
        opt,
        run_seed=seed,
        codebook_init=merged["codebook_init"],
        weights=weights,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{run_id}.ckpt"
    save_checkpoint(ckpt_path, model, {"stage": "pretrain", "seed": seed})
    log_path = out_dir / f"{run_id}_train.jsonl"
    write_log(log_path, records)
    _write_run_manifest(out_dir, "pretrain", merged, applied, [str(ckpt_path), str(log_path)])
    print(f"checkpoint {ckpt_path}")
    print(f"log {log_path}")
    print(f"checkpoint_hash {checkpoint_hash(ckpt_path)}")
    if records:
        last = records[-1]
        print(
            f"final mae_loss {last['mae_loss']!r} vq_loss {last['vq_loss']!r} "
            f"perplexity {last['perplexity']!r}"
        )
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    merged, applied = load_run_config(args.config, args.set or [])
    if len(merged["datasets"]) != 1:
        raise ConfigError("fine-tuning needs exactly one dataset manifest in 'datasets'")
    model, _ = load_checkpoint(args.checkpoint)
    provider = _build_provider(merged)
    opt = _build_optimizer(merged)
    seed = int(merged["seed"])
    out_dir = Path(merged["out_dir"])
    run_id = _run_id(merged, "finetune")
    batch = _prepare_dataset(merged["datasets"][0], model.config, provider)
    from .model import FINETUNE_WEIGHTS

    weights = _build_weights(merged, FINETUNE_WEIGHTS)
    result = finetune(
        model,
        batch,
        opt,
        policy=policy_by_name(merged["freeze"]),
        split_fraction=float(merged["split_fraction"]),
        run_seed=seed,
        weights=weights,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{run_id}.ckpt"
    save_checkpoint(ckpt_path, result.model, {"stage": "finetune", "seed": seed})
    metrics_path = out_dir / f"{run_id}_metrics.json"
    metrics_path.write_text(json.dumps(result.metrics.to_dict(), indent=2, sort_keys=True))
    log_path = out_dir / f"{run_id}_train.jsonl"
    write_log(log_path, result.records)
    _write_run_manifest(
        out_dir, "finetune", merged, applied, [str(ckpt_path), str(metrics_path), str(log_path)]
    )
    print(f"checkpoint {ckpt_path}")
    print(f"metrics {metrics_path}")
    print(f"accuracy {result.metrics.accuracy!r} macro_f1 {result.metrics.macro_f1!r}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    merged, applied = load_run_config(args.config, args.set or [])
    model, _ = load_checkpoint(args.checkpoint)
    provider = _build_provider(merged)
    batch = _prepare_dataset(args.manifest, model.config, provider)
    metrics = evaluate(model, batch, workers=int(merged["workers"]))
    out_dir = Path(merged["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = _run_id(merged, "evaluate")
    metrics_path = out_dir / f"{run_id}_metrics.json"
    metrics_path.write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    _write_run_manifest(out_dir, "evaluate", merged, applied, [str(metrics_path)])
    print(f"metrics {metrics_path}")
    print(f"accuracy {metrics.accuracy!r} macro_f1 {metrics.macro_f1!r}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    merged, applied = load_run_config(args.config, args.set or [])
    wanted = [r.strip() for r in args.reports.split(",") if r.strip()]
    known = {"similarity", "frequency", "transitions"}
    unknown = set(wanted) - known
    if unknown:
        raise ConfigError(f"unknown reports: {sorted(unknown)}; known: {sorted(known)}")
    model, _ = load_checkpoint(args.checkpoint)
    provider = _build_provider(merged)
    batch = _prepare_dataset(args.manifest, model.config, provider)
    indices = tokenize_dataset(model, batch)
    out_dir = Path(merged["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = _run_id(merged, "analyze")
    outputs = []
    K = model.config.codebook_size

    if "similarity" in wanted:
        flat = indices.reshape(-1)
        counts = np.bincount(flat, minlength=K)
        observed = np.flatnonzero(counts)
        order = observed[np.lexsort((observed, -counts[observed]))]
        ids = np.sort(order[: min(args.sim_tokens, order.size)])
        matrix = similarity(ids, model)
        csv_path = report_path(out_dir, run_id, "similarity", "csv")
        json_path = report_path(out_dir, run_id, "similarity", "json")
        export_similarity_csv(matrix, csv_path)
        export_report_json(matrix, json_path)
        outputs += [str(csv_path), str(json_path)]

    streams = token_streams(indices, batch.labels)
    if "frequency" in wanted:
        if batch.labels is None:
            raise DataError("frequency report needs labeled windows")
        report = frequency(
            streams, top_n=args.top_n, num_classes=model.config.num_classes, codebook_size=K
        )
        csv_path = report_path(out_dir, run_id, "frequency", "csv")
        json_path = report_path(out_dir, run_id, "frequency", "json")
        export_frequency_csv(report, csv_path)
        export_report_json(report, json_path)
        outputs += [str(csv_path), str(json_path)]

    if "transitions" in wanted:
        matrix = transitions([tokens for tokens, _ in streams], K)
        csv_path = report_path(out_dir, run_id, "transitions", "csv")
        json_path = report_path(out_dir, run_id, "transitions", "json")
        export_transitions_csv(matrix, csv_path)
        export_report_json(matrix, json_path)
        outputs += [str(csv_path), str(json_path)]

    _write_run_manifest(out_dir, "analyze", merged, applied, outputs)
    for path in outputs:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.scale != "tiny":
        raise ConfigError(f"unknown gradcheck scale {args.scale!r}")
    reports = gradient_suite(seed=args.seed)
    payload = {}
    all_pass = True
    for name, report in sorted(reports.items()):
        payload[name] = {
            "max_rel_err": report.max_rel_err,
            "tolerance": report.tolerance,
            "passed": report.passed,
            "worst_tensor": report.worst.name if report.worst else None,
            "worst_coordinate": [int(c) for c in report.worst.coordinate] if report.worst else None,
            "coords_checked": len(report.entries),
        }
        all_pass = all_pass and report.passed
        print(
            f"{name}: max rel err {report.max_rel_err:.3e} "
            f"(tolerance {report.tolerance:.0e}) {'PASS' if report.passed else 'FAIL'}"
        )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
        print(f"report {args.out}")
    return EXIT_OK if all_pass else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionprim",
        description="Motion-primitive tokenization, pretraining, fine-tuning, and analysis.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize a synthetic dataset from a waveform spec")
    p.add_argument("spec", help="synthetic spec JSON")
    p.add_argument("out_dir", help="output directory for CSV + manifest")
    p.set_defaults(fn=cmd_synth)

    def common(p: argparse.ArgumentParser, config_required: bool) -> None:
        p.add_argument(
            "--config", required=config_required, default=None, help="run config JSON"
        )
        p.add_argument(
            "--set",
            action="append",
            metavar="PATH=VALUE",
            help="override a config value (repeatable), e.g. --set model.depth=2",
        )

    p = sub.add_parser("pretrain", help="stage 1: masked-reconstruction training")
    common(p, config_required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: supervised fine-tuning from a checkpoint")
    common(p, config_required=True)
    p.add_argument("checkpoint", help="pretraining checkpoint path")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a labeled dataset")
    common(p, config_required=False)
    p.add_argument("checkpoint")
    p.add_argument("manifest", help="dataset manifest JSON")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("analyze", help="interpretability reports from a checkpoint")
    common(p, config_required=False)
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument(
        "--reports", default="similarity,frequency,transitions", help="comma-separated subset"
    )
    p.add_argument("--top-n", type=int, default=32, help="frequency report row count")
    p.add_argument("--sim-tokens", type=int, default=64, help="max tokens in the similarity matrix")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--scale", default="tiny", help="check size (only 'tiny')")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except ConfigError as exc:
        _report_error("config", exc)
        return EXIT_CONFIG
    except CheckpointError as exc:
        _report_error("checkpoint", exc)
        return EXIT_CHECKPOINT
    except NumericError as exc:
        _report_error("numeric", exc)
        return EXIT_NUMERIC
    except DataError as exc:
        _report_error("data", exc)
        return EXIT_DATA
    except MotionPrimError as exc:  # pragma: no cover - catch-all for new subtypes
        _report_error("error", exc)
        return EXIT_CONFIG


def _report_error(kind: str, exc: Exception) -> None:
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

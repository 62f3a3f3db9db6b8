"""Batch command-line entry points.

Every command reads one JSON run config (``--config``), writes its
artifacts under ``--out`` and logs progress to stderr as one JSON object
per line. Exit codes: 0 success, 1 failed gradient check or integrity
check, 2 invalid config, 3 data error, 4 training failure.

Run config fields (unknown keys are rejected)::

    {
      "seed": 0,
      "setting": "LFS" | "DT",                 # train command only
      "datasets": [{"path": "...", "name": "A", "role": "source" | "target",
                    "records": [...], "channels": [...], "modalities": [...]}],
      "n_folds": 5,
      "finetune_records": null,                # FT: records drawn per fold
      "model": {...}, "train": {...}, "preprocess": {...},
      "sweep": {"kind": "training-size", "grid": [2, 4], "repetitions": 3,
                "lfs_f1": null}
    }

Relative dataset paths are resolved against ``$ROBUSTSLEEPNET_DATA`` when
it is set, else against the working directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import jsonschema

from . import dsp
from .data import RecordLoadError, open_dataset
from .gradcheck import run_gradcheck_suite, worst_case
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .protocols import (
    SWEEP_KINDS,
    HarnessIntegrityError,
    HygieneLog,
    evaluate_records,
    run_dt,
    run_ft,
    run_lfs,
    run_sweep,
    run_transfer_matrix,
    score,
    train_direct_transfer,
)
from .reports import run_report, write_hypnograms, write_json, write_transfer_report
from .synthetic import SyntheticSpec, SyntheticSpecError, generate_synthetic_dataset
from .tensor import ContractError
from .training import FINETUNE_LR, PreparedRecord, TrainConfig, TrainingError, prepare_records

DATA_ROOT_ENV = "ROBUSTSLEEPNET_DATA"

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3, 4

log = logging.getLogger("robustsleepnet")

_DATASET_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["path"],
    "properties": {
        "path": {"type": "string"},
        "name": {"type": "string"},
        "role": {"enum": ["source", "target"]},
        "records": {"type": "array", "items": {"type": "string"}},
        "channels": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "modalities": {"type": "array", "items": {"enum": ["EEG", "EOG", "EMG", "OTHER"]}, "minItems": 1},
    },
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "setting": {"enum": ["LFS", "DT", "FT"]},
        "datasets": {"type": "array", "items": _DATASET_SCHEMA},
        "n_folds": {"type": "integer", "minimum": 2},
        "finetune_records": {"type": ["integer", "null"], "minimum": 0},
        "model": {"type": "object"},
        "train": {"type": "object"},
        "preprocess": {"type": "object"},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "grid"],
            "properties": {
                "kind": {"enum": list(SWEEP_KINDS)},
                "grid": {"type": "array", "minItems": 1},
                "repetitions": {"type": "integer", "minimum": 1},
                "lfs_f1": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class _JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.msg if isinstance(record.msg, dict) else {"message": record.getMessage()}
        return json.dumps({"time": round(record.created, 3), "level": record.levelname.lower(), **msg},
                          default=str)


def _setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    root = logging.getLogger("robustsleepnet")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def _event(**fields) -> None:
    log.info(fields)


# ---------------------------------------------------------------------------
# config


def load_run_config(path, seed: int | None = None, setting: str | None = None) -> dict:
    """Read, validate and resolve a run config; every default is filled in."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    if setting is not None and isinstance(raw, dict):
        raw["setting"] = setting
    return resolve_run_config(raw, seed)


def resolve_run_config(raw: dict, seed: int | None = None) -> dict:
    try:
        jsonschema.validate(raw, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {err.message}") from None
    cfg = json.loads(json.dumps(raw))
    cfg["seed"] = int(seed if seed is not None else cfg.get("seed", 0))
    cfg.setdefault("setting", "LFS")
    cfg.setdefault("datasets", [])
    cfg.setdefault("n_folds", 5)
    cfg.setdefault("finetune_records", None)
    try:
        cfg["model"] = ModelConfig.from_dict(cfg.get("model", {})).to_dict()
        train = {"lr": FINETUNE_LR} if cfg["setting"] == "FT" else {}
        train.update(cfg.get("train", {}))
        train["seed"] = cfg["seed"]
        cfg["train"] = TrainConfig.from_dict(train).to_dict()
        pre = cfg.get("preprocess", {})
        unknown = set(pre) - set(dsp.PreprocessConfig().to_dict())
        if unknown:
            raise ValueError(f"unknown preprocess keys: {sorted(unknown)}")
        cfg["preprocess"] = dsp.PreprocessConfig(**pre).to_dict()
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    pre, mod = cfg["preprocess"], cfg["model"]
    if pre["epoch_seconds"] * pre["target_fs"] != mod["L"] or (pre["n_fft"], pre["n_stride"]) != (
            mod["n_fft"], mod["n_stride"]):
        raise ConfigError("model L, n_fft and n_stride must match the preprocessing settings")
    root = os.environ.get(DATA_ROOT_ENV)
    for ds in cfg["datasets"]:
        p = Path(ds["path"])
        if not p.is_absolute() and root:
            p = Path(root) / p
        ds["path"] = str(p.resolve())
        ds.setdefault("role", "target")
        ds.setdefault("name", p.name)
    if "sweep" in cfg:
        cfg["sweep"].setdefault("repetitions", 3)
        cfg["sweep"].setdefault("lfs_f1", None)
    return cfg


def _datasets(cfg: dict, role: str | None = None) -> list[dict]:
    return [d for d in cfg["datasets"] if role is None or d["role"] == role]


def load_prepared(ds: dict, pcfg: dsp.PreprocessConfig, workers: int) -> list[PreparedRecord]:
    try:
        dataset = open_dataset(ds["path"], ds.get("records"), ds["name"])
        records = []
        for rec in dataset:
            if "channels" in ds:
                rec = rec.select_channel_names(ds["channels"])
            if "modalities" in ds:
                rec = rec.select_modalities(ds["modalities"])
            records.append(rec)
        prepared = prepare_records(records, ds["name"], pcfg, workers)
    except (RecordLoadError, ContractError, OSError) as err:
        raise DataError(f"dataset {ds['name']}: {err}") from None
    _event(event="dataset_loaded", dataset=ds["name"], n_records=len(prepared),
           n_channels=sorted({r.n_channels for r in prepared}))
    return prepared


def _load_group(cfg, role, pcfg, workers) -> dict[str, list[PreparedRecord]]:
    return {d["name"]: load_prepared(d, pcfg, workers) for d in _datasets(cfg, role)}


def _one_target(cfg, pcfg, workers) -> list[PreparedRecord]:
    targets = _datasets(cfg, "target")
    if len(targets) != 1:
        raise ConfigError(f"exactly one dataset with role 'target' is required, got {len(targets)}")
    return load_prepared(targets[0], pcfg, workers)


def _on_pass(event: dict) -> None:
    _event(event="pass", **event)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    try:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.config).read_text()))
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {args.config}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{args.config}: invalid JSON ({err})") from None
    except SyntheticSpecError as err:
        raise ConfigError(f"synthetic spec: {err}") from None
    if args.seed is not None:
        spec.seed = args.seed
    out = generate_synthetic_dataset(spec, args.out)
    _event(event="generated", path=str(out), n_records=spec.n_records)
    return EXIT_OK


def _write_evaluation(out: Path, cfg: dict, result, extra: dict | None = None) -> None:
    report = run_report(cfg, result.f1, result.histories,
                        {"setting": result.setting, "target": result.target, "hygiene": result.hygiene.events,
                         **(extra or {})})
    write_json(out / "report.json", report)
    write_hypnograms(out / "hypnograms", result.predictions, result.references)
    _event(event="result", setting=result.setting, target=result.target, macro_f1=result.macro_f1)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = Path(args.out)
    pcfg = dsp.PreprocessConfig(**cfg["preprocess"])
    mcfg = ModelConfig.from_dict(cfg["model"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    if cfg["setting"] == "LFS":
        target = _one_target(cfg, pcfg, args.workers)
        result = run_lfs(target, cfg["n_folds"], mcfg, tcfg, _on_pass)
        for k, model in enumerate(result.models):
            save_checkpoint(model, out / "checkpoints" / f"fold{k}", pcfg, {"run_config": cfg, "fold": k})
        _write_evaluation(out, cfg, result)
    elif cfg["setting"] == "DT":
        sources = _load_group(cfg, "source", pcfg, args.workers)
        if not sources:
            raise ConfigError("DT needs at least one dataset with role 'source'")
        targets = _datasets(cfg, "target")
        target = load_prepared(targets[0], pcfg, args.workers) if targets else None
        hygiene = HygieneLog()
        trained = train_direct_transfer(sources, mcfg, tcfg, targets[0]["name"] if targets else None,
                                        target, _on_pass, hygiene)
        save_checkpoint(trained.model, out / "checkpoint", pcfg, {"run_config": cfg})
        if target is not None:
            result = run_dt(sources, target, model=trained.model)
            result.histories = [trained.history]
            result.hygiene.events[:0] = hygiene.events
            _write_evaluation(out, cfg, result)
        else:
            write_json(out / "report.json", {"config": cfg, "history": trained.history,
                                             "hygiene": hygiene.events, "setting": "DT"})
    else:
        raise ConfigError("the train command runs LFS or DT; use finetune for FT")
    return EXIT_OK


def _checkpoint(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    try:
        return load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as err:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {err}") from None


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config, args.seed, setting="FT")
    model, pcfg = _checkpoint(args)
    cfg["model"] = model.config.to_dict()
    cfg["preprocess"] = pcfg.to_dict()
    target = _one_target(cfg, pcfg, args.workers)
    result = run_ft(model, target, cfg["n_folds"], cfg["finetune_records"], TrainConfig.from_dict(cfg["train"]),
                    _on_pass)
    out = Path(args.out)
    for k, m in enumerate(result.models):
        save_checkpoint(m, out / "checkpoints" / f"fold{k}", pcfg, {"run_config": cfg, "fold": k})
    _write_evaluation(out, cfg, result, {"checkpoint": str(Path(args.checkpoint).resolve())})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    model, pcfg = _checkpoint(args)
    cfg["model"] = model.config.to_dict()
    cfg["preprocess"] = pcfg.to_dict()
    records = [r for d in _datasets(cfg, "target") for r in load_prepared(d, pcfg, args.workers)]
    if not records:
        raise ConfigError("evaluate needs at least one dataset with role 'target'")
    predictions = evaluate_records(model, records)
    f1 = score(predictions, records)
    out = Path(args.out)
    write_json(out / "report.json", run_report(cfg, f1, [], {
        "setting": "evaluate", "records": sorted(predictions), "checkpoint": str(Path(args.checkpoint).resolve())}))
    write_hypnograms(out / "hypnograms", predictions, {r.key: r.labels for r in records})
    _event(event="result", setting="evaluate", macro_f1=f1.macro)
    return EXIT_OK


def cmd_transfer_matrix(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    pcfg = dsp.PreprocessConfig(**cfg["preprocess"])
    datasets = _load_group(cfg, None, pcfg, args.workers)
    if len(datasets) < 2:
        raise ConfigError("transfer-matrix needs at least two datasets")
    report, hygiene = run_transfer_matrix(datasets, cfg["n_folds"], ModelConfig.from_dict(cfg["model"]),
                                          TrainConfig.from_dict(cfg["train"]), _on_pass)
    write_transfer_report(Path(args.out), report, {"config": cfg, "hygiene": hygiene.events})
    _event(event="result", setting="transfer-matrix", f1=report.f1.tolist())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    if "sweep" not in cfg:
        raise ConfigError("sweep command needs a 'sweep' block")
    sw = cfg["sweep"]
    pretrained = None
    if args.checkpoint:
        pretrained, pcfg = _checkpoint(args)
        cfg["model"], cfg["preprocess"] = pretrained.config.to_dict(), pcfg.to_dict()
    pcfg = dsp.PreprocessConfig(**cfg["preprocess"])
    sources = _load_group(cfg, "source", pcfg, args.workers)
    target = _one_target(cfg, pcfg, args.workers)
    report = run_sweep(sw["kind"], sw["grid"], sources, target, sw["repetitions"], ModelConfig.from_dict(cfg["model"]),
                       TrainConfig.from_dict(cfg["train"]), sw["lfs_f1"], pretrained, cfg["n_folds"], _on_pass)
    out = Path(args.out)
    write_json(out / "sweep.json", {"config": cfg, **report.to_dict()})
    rows = [r.to_dict() for r in report.rows]
    cols = [k for k in rows[0] if k != "f1"]
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([json.dumps(r[c]) if isinstance(r[c], list) else r[c] for c in cols])
    _event(event="result", setting="sweep", kind=sw["kind"], n_runs=report.n_runs)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    start = time.time()
    cases = run_gradcheck_suite(seed)
    worst = worst_case(cases)
    payload = {"seed": seed, "tolerance": worst.report.tol, "cases": [c.to_dict() for c in cases],
               "worst": worst.to_dict(), "passed": all(c.report.passed for c in cases),
               "seconds": round(time.time() - start, 2)}
    if args.out:
        write_json(Path(args.out) / "gradcheck.json", payload)
    _event(event="gradcheck", worst_case=worst.name, max_rel_error=worst.report.max_rel_error,
           passed=payload["passed"])
    return EXIT_OK if payload["passed"] else EXIT_FAILED


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "transfer-matrix": cmd_transfer_matrix,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustsleepnet", description="Montage-agnostic sleep staging.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "gradcheck", help="JSON run config (synthetic spec for generate)")
        p.add_argument("--out", required=name != "gradcheck", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="preprocessing threads")
        p.add_argument("--checkpoint", default=None, help="checkpoint directory (finetune, evaluate, sweep)")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        _event(event="error", kind="config", message=str(err))
        return EXIT_CONFIG
    except DataError as err:
        _event(event="error", kind="data", message=str(err))
        return EXIT_DATA
    except (RecordLoadError, ContractError) as err:
        _event(event="error", kind="data", message=str(err))
        return EXIT_DATA
    except TrainingError as err:
        _event(event="error", kind="training", message=str(err))
        return EXIT_TRAINING
    except HarnessIntegrityError as err:
        _event(event="error", kind="integrity", message=str(err))
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())

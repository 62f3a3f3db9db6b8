"""JSON and CSV artifacts written by the harness commands."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .inference import StagePrediction
from .metrics import STAGES, F1Result, TransferReport


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_default))
    return path


def run_report(config: dict, f1: F1Result, history=None, extra: dict | None = None) -> dict:
    """Config echo plus scores; ``history`` is the per-pass training log."""
    out = {"config": config, **f1.to_dict(), "stages": list(STAGES), "history": history or []}
    if extra:
        out.update(extra)
    return out


def write_hypnogram_csv(path, prediction: StagePrediction, reference) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ref = np.asarray(reference)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "reference", "predicted", *[f"p_{s}" for s in STAGES]])
        for e, (r, p, probs) in enumerate(zip(ref, prediction.labels, prediction.probabilities)):
            w.writerow([e, int(r), int(p), *[f"{v:.6g}" for v in probs]])
    return path


def read_hypnogram_csv(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "reference": np.array([int(r["reference"]) for r in rows]),
        "predicted": np.array([int(r["predicted"]) for r in rows]),
        "probabilities": np.array([[float(r[f"p_{s}"]) for s in STAGES] for r in rows]),
    }


def write_hypnograms(directory, predictions: dict[str, StagePrediction], references: dict[str, np.ndarray]) -> list[Path]:
    """One CSV per record, named ``<dataset>__<record>.csv``."""
    directory = Path(directory)
    return [
        write_hypnogram_csv(directory / (key.replace("/", "__") + ".csv"), predictions[key], references[key])
        for key in sorted(predictions)
    ]


def write_transfer_report(directory, report: TransferReport, extra: dict | None = None) -> tuple[Path, Path]:
    """``transfer.json`` plus ``transfer_matrix.csv`` (F1 rows = training set, with summary columns)."""
    directory = Path(directory)
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    js = write_json(directory / "transfer.json", payload)
    path = directory / "transfer_matrix.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trained_on", *report.names, "generalization", "easiness", "lfs_f1"])
        for i, name in enumerate(report.names):
            w.writerow([name, *[f"{v:.6f}" for v in report.f1[i]], f"{report.generalization[i]:.6f}",
                        f"{report.easiness[i]:.6f}", f"{report.lfs[i]:.6f}"])
    return js, path

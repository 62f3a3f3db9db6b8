"""Epoch-level scores and cross-dataset transfer summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

STAGES = ("W", "N1", "N2", "N3", "REM")


def confusion_matrix(pred, ref, n_classes: int = 5) -> np.ndarray:
    """Counts ``cm[true, predicted]`` over epochs whose reference is scored."""
    pred = np.asarray(pred, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    if pred.shape != ref.shape:
        raise ContractError(f"prediction/reference lengths differ: {pred.shape} vs {ref.shape}")
    keep = ref >= 0
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (ref[keep], pred[keep]), 1)
    return cm


@dataclass
class F1Result:
    macro: float
    per_class: dict[str, float]
    confusion: np.ndarray
    n_epochs: int

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro,
            "per_class_f1": self.per_class,
            "confusion_matrix": self.confusion.tolist(),
            "n_epochs": self.n_epochs,
        }


def macro_f1(pred, ref, n_classes: int = 5) -> F1Result:
    """Macro-averaged F1 over the classes present in reference or prediction.

    Per class ``F1 = 2PR / (P + R)`` (the harmonic mean, 0 when ``P + R = 0``).
    Unscored reference epochs (``-1``) are ignored. Classes absent from both
    reference and prediction are left out of the mean.
    """
    cm = confusion_matrix(pred, ref, n_classes)
    total = int(cm.sum())
    if total == 0:
        raise ContractError("no scored epochs to evaluate")
    tp = np.diag(cm).astype(float)
    n_pred = cm.sum(axis=0).astype(float)
    n_true = cm.sum(axis=1).astype(float)
    per_class = {}
    for k in range(n_classes):
        if n_pred[k] == 0 and n_true[k] == 0:
            continue
        precision = tp[k] / n_pred[k] if n_pred[k] else 0.0
        recall = tp[k] / n_true[k] if n_true[k] else 0.0
        denom = precision + recall
        per_class[STAGES[k] if n_classes == 5 else str(k)] = 2 * precision * recall / denom if denom else 0.0
    return F1Result(float(np.mean(list(per_class.values()))), per_class, cm, total)


def accuracy(pred, ref) -> float:
    pred, ref = np.asarray(pred), np.asarray(ref)
    keep = ref >= 0
    if not keep.any():
        raise ContractError("no scored epochs to evaluate")
    return float((pred[keep] == ref[keep]).mean())


@dataclass
class TransferReport:
    names: list[str]
    f1: np.ndarray
    lfs: np.ndarray
    relative: np.ndarray
    easiness: np.ndarray
    generalization: np.ndarray

    def to_dict(self) -> dict:
        return {
            "datasets": self.names,
            "f1_matrix": self.f1.tolist(),
            "lfs_f1": self.lfs.tolist(),
            "relative_f1": self.relative.tolist(),
            "easiness": dict(zip(self.names, self.easiness.tolist())),
            "generalization": dict(zip(self.names, self.generalization.tolist())),
        }


def transfer_metrics(f1_matrix, lfs, names=None) -> TransferReport:
    """Relative F1 plus per-dataset easiness and generalization.

    ``f1_matrix[i, j]`` is the F1 of a model trained on dataset ``i`` and
    evaluated on dataset ``j``; ``lfs[j]`` is dataset ``j``'s from-scratch F1.
    Generalization averages row ``i`` of the relative matrix, easiness
    column ``j``; the diagonal is excluded from both.
    """
    f1 = np.asarray(f1_matrix, dtype=float)
    lfs = np.asarray(lfs, dtype=float)
    n = f1.shape[0]
    if f1.shape != (n, n) or lfs.shape != (n,):
        raise ContractError(f"need a square F1 matrix and one baseline per dataset, got {f1.shape}, {lfs.shape}")
    if n < 2:
        raise ContractError("transfer metrics need at least two datasets")
    if np.any(lfs <= 0):
        raise ContractError("LFS baselines must be positive")
    rel = f1 / lfs[None, :]
    off = ~np.eye(n, dtype=bool)
    gen = np.array([rel[i, off[i]].mean() for i in range(n)])
    eas = np.array([rel[off[:, j], j].mean() for j in range(n)])
    names = list(names) if names is not None else [f"D{i + 1}" for i in range(n)]
    return TransferReport(names, f1, lfs, rel, eas, gen)

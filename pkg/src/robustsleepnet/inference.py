"""Stride-1 inference with geometric aggregation of overlapping windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import window_batches
from .model import RobustSleepNet
from .tensor import ContractError, Tensor, no_grad
from .training import PreparedRecord, gather_windows


@dataclass
class StagePrediction:
    window_starts: np.ndarray  # (n_windows,)
    window_probs: np.ndarray  # (n_windows, T_w, 5)
    probabilities: np.ndarray  # (n_epochs, 5), aggregated and renormalised
    labels: np.ndarray  # (n_epochs,)


def geometric_aggregate(window_probs: np.ndarray, starts, n_epochs: int) -> np.ndarray:
    """Per-epoch geometric mean of every window prediction covering it.

    The exponent is ``1/m`` with ``m`` the number of covering windows; the
    result is renormalised to sum to one.
    """
    window_probs = np.asarray(window_probs, dtype=np.float64)
    n_classes = window_probs.shape[-1]
    acc = np.zeros((n_epochs, n_classes))
    count = np.zeros(n_epochs)
    for s, probs in zip(starts, window_probs):
        stop = min(s + len(probs), n_epochs)
        acc[s:stop] += np.log(np.clip(probs[: stop - s], 1e-300, None))
        count[s:stop] += 1
    if np.any(count == 0):
        raise ContractError("some epochs are not covered by any window")
    g = np.exp(acc / count[:, None])
    return g / g.sum(axis=1, keepdims=True)


def predict_windows(model: RobustSleepNet, rec: PreparedRecord, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    T = model.config.T
    n = rec.n_epochs
    if n < 1:
        raise ContractError(f"{rec.key} is shorter than one epoch")
    with no_grad():
        if n < T:
            # one left-aligned window; the padding is dropped before the model
            x = gather_windows(rec, [0], n)
            return np.array([0]), model.forward(Tensor(x)).data.astype(np.float64)
        starts = np.array([w.start for w in window_batches(np.zeros(n, dtype=int), T, "inference")])
        out = []
        for i in range(0, len(starts), batch_size):
            x = gather_windows(rec, starts[i:i + batch_size], T)
            out.append(model.forward(Tensor(x)).data.astype(np.float64))
    return starts, np.concatenate(out)


def predict_record(model: RobustSleepNet, rec: PreparedRecord, batch_size: int = 32) -> StagePrediction:
    starts, probs = predict_windows(model, rec, batch_size)
    agg = geometric_aggregate(probs, starts, rec.n_epochs)
    return StagePrediction(starts, probs, agg, agg.argmax(axis=1))

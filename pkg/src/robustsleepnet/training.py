"""Record preparation, batching and the early-stopped training loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import dsp
from .data import Record, window_batches
from .layers import Adam, cross_entropy
from .model import ModelConfig, RobustSleepNet, sample_channel_count, select_channels
from .tensor import ContractError, Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged or could not start."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    validation_fraction: float = 0.3
    channel_sampling: bool | None = None  # None: on when sources have different montages

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


FINETUNE_LR = 1e-4


@dataclass
class PreparedRecord:
    """A record after preprocessing: one log-STFT per epoch and channel."""

    dataset: str
    record_id: str
    subject_id: str
    specs: np.ndarray  # (n_epochs, C, L_fft, F_fft), float32
    labels: np.ndarray  # (n_epochs,)
    channel_names: list[str] = field(default_factory=list)
    modalities: list[str] = field(default_factory=list)
    hypnograms: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def key(self) -> str:
        return f"{self.dataset}/{self.record_id}"

    @property
    def subject_key(self) -> str:
        return f"{self.dataset}/{self.subject_id}"

    @property
    def n_epochs(self) -> int:
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return self.specs.shape[1]

    def select(self, channel_idx) -> "PreparedRecord":
        idx = list(channel_idx)
        return PreparedRecord(self.dataset, self.record_id, self.subject_id, self.specs[:, idx], self.labels,
                              [self.channel_names[i] for i in idx], [self.modalities[i] for i in idx],
                              self.hypnograms)

    def select_modalities(self, modalities) -> "PreparedRecord":
        idx = [i for i, m in enumerate(self.modalities) if m in set(modalities)]
        if not idx:
            raise ContractError(f"{self.key}: no channel with modality in {sorted(modalities)}")
        return self.select(idx)


def prepare_record(record: Record, dataset: str, pcfg: dsp.PreprocessConfig | None = None) -> PreparedRecord:
    """Filter, resample, scale and transform every channel of a record."""
    pcfg = pcfg or dsp.PreprocessConfig()
    n_epochs = record.n_epochs
    if n_epochs < 1:
        raise ContractError(f"record {record.record_id} is shorter than one epoch")
    L = pcfg.epoch_samples
    per_channel = []
    for ch in record.channels:
        y = dsp.preprocess_signal(ch.data, ch.fs, pcfg)
        if len(y) < n_epochs * L:
            y = np.pad(y, (0, n_epochs * L - len(y)))
        epochs = y[: n_epochs * L].reshape(n_epochs, L)
        per_channel.append(dsp.stft(epochs, pcfg))  # (n, F, L_fft)
    specs = np.stack(per_channel, axis=1).transpose(0, 1, 3, 2).astype(np.float32)
    return PreparedRecord(
        dataset,
        record.record_id,
        record.subject_id,
        np.ascontiguousarray(specs),
        np.asarray(record.hypnogram, dtype=np.int64),
        [c.name for c in record.channels],
        [c.modality for c in record.channels],
        dict(record.hypnograms),
    )


def prepare_records(records, dataset: str, pcfg: dsp.PreprocessConfig | None = None,
                    workers: int = 1) -> list[PreparedRecord]:
    records = list(records)
    if workers <= 1:
        return [prepare_record(r, dataset, pcfg) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: prepare_record(r, dataset, pcfg), records))


# ---------------------------------------------------------------------------
# batching


def gather_windows(rec: PreparedRecord, starts, T: int, channels=None) -> np.ndarray:
    """Normalised windows ``(B, T, C, L_fft, F)`` for the given start epochs."""
    out = []
    for i, s in enumerate(starts):
        block = rec.specs[s:s + T]
        out.append(block if channels is None else block[:, channels[i]])
    return dsp.normalize_windows(np.stack(out))


@dataclass
class _Item:
    rec: PreparedRecord
    start: int
    labels: np.ndarray


def _training_batches(groups: dict[str, list[PreparedRecord]], T: int, batch_size: int,
                      rng: np.random.Generator) -> list[list[_Item]]:
    per_group: dict[str, list[list[_Item]]] = {}
    for name, recs in groups.items():
        items = [
            _Item(r, w.start, w.labels)
            for r in recs
            for w in window_batches(r.labels, T, "train", rng)
            if w.mask.any() and r.n_epochs >= T
        ]
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        per_group[name] = [items[i:i + batch_size] for i in range(0, len(items), batch_size)]
    batches = []
    # each batch comes from one dataset chosen uniformly among those with batches left
    remaining = {k: list(v) for k, v in per_group.items() if v}
    while remaining:
        names = sorted(remaining)
        pick = names[int(rng.integers(len(names)))]
        batches.append(remaining[pick].pop(0))
        if not remaining[pick]:
            del remaining[pick]
    return batches


class EarlyStopping:
    """Stop once the monitored value has not strictly improved for ``patience`` passes."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_value = -math.inf
        self.best_pass: int | None = None

    def update(self, pass_index: int, value: float) -> bool:
        """Record a pass; return ``True`` when training should stop."""
        if value > self.best_value:
            self.best_value = value
            self.best_pass = pass_index
            return False
        return pass_index - (self.best_pass if self.best_pass is not None else 0) >= self.patience


def simulate_early_stopping(values, patience: int) -> tuple[int, int]:
    """Replay a sequence of validation values; returns ``(stop_pass, best_pass)`` (1-based)."""
    es = EarlyStopping(patience)
    for i, v in enumerate(values, start=1):
        if es.update(i, v):
            return i, es.best_pass
    return len(values), es.best_pass


def validation_accuracy(model: RobustSleepNet, records: list[PreparedRecord], batch_size: int = 32) -> float:
    """Hard-label accuracy over stride-T (phase 0) windows, all channels, no aggregation."""
    correct = total = 0
    T = model.config.T
    with no_grad():
        for rec in records:
            wins = [w for w in window_batches(rec.labels, T, "train") if w.mask.any()]
            if rec.n_epochs < T:
                wins = []
            for i in range(0, len(wins), batch_size):
                chunk = wins[i:i + batch_size]
                x = gather_windows(rec, [w.start for w in chunk], T)
                pred = model.forward(Tensor(x)).data.argmax(axis=-1)
                lab = np.stack([w.labels for w in chunk])
                valid = lab >= 0
                correct += int((pred[valid] == lab[valid]).sum())
                total += int(valid.sum())
    return correct / total if total else 0.0


@dataclass
class TrainResult:
    model: RobustSleepNet
    history: list[dict]
    best_pass: int
    best_validation_accuracy: float
    train_keys: list[str]
    validation_keys: list[str]


def train_model(
    train_groups: dict[str, list[PreparedRecord]],
    validation: list[PreparedRecord],
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    init_model: RobustSleepNet | None = None,
    on_pass: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam over masked sequence cross-entropy with early stopping on validation accuracy.

    ``train_groups`` maps a dataset name to its training records; each batch
    is drawn from a single dataset. With channel sampling every batch uses
    ``C_batch`` channels drawn from the harmonic law, channels being picked
    per window. When ``init_model`` is given its weights are the starting
    point and its validation accuracy is recorded as pass 0.
    """
    train_cfg = train_cfg or TrainConfig()
    if init_model is not None:
        model_cfg = init_model.config
    model_cfg = model_cfg or ModelConfig()
    if not any(train_groups.values()):
        raise TrainingError("empty training set")
    T = model_cfg.T
    usable = [r for recs in train_groups.values() for r in recs if r.n_epochs >= T]
    if not usable:
        raise TrainingError(f"no training record has at least T={T} epochs")
    if not validation:
        raise TrainingError("empty validation set")

    rng = np.random.default_rng(train_cfg.seed)
    model = RobustSleepNet(model_cfg, seed=train_cfg.seed)
    if init_model is not None:
        model.load_state_dict(init_model.state_dict())
    opt = Adam(model.parameters(), lr=train_cfg.lr)

    n_channels = {r.n_channels for recs in train_groups.values() for r in recs}
    sampling = train_cfg.channel_sampling
    if sampling is None:
        sampling = len(n_channels) > 1
    c_max = max(n_channels)

    history: list[dict] = []
    stopper = EarlyStopping(train_cfg.patience)
    best_state = model.state_dict()
    if init_model is not None:
        acc0 = validation_accuracy(model, validation, train_cfg.batch_size)
        stopper.update(0, acc0)
        history.append({"pass": 0, "train_loss": None, "val_accuracy": acc0})
        if on_pass:
            on_pass(history[-1])

    for pass_index in range(1, train_cfg.max_epochs + 1):
        losses = []
        for batch in _training_batches(train_groups, T, train_cfg.batch_size, rng):
            if sampling:
                c_batch = sample_channel_count(c_max, rng)
                chans = [select_channels(it.rec.n_channels, c_batch, rng) for it in batch]
                x = np.concatenate([gather_windows(it.rec, [it.start], T, [ch]) for it, ch in zip(batch, chans)])
            else:
                x = np.concatenate([gather_windows(it.rec, [it.start], T) for it in batch])
            labels = np.stack([it.labels for it in batch])
            probs = model.forward(Tensor(x), train=True, rng=rng)
            loss = cross_entropy(probs, labels)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at pass {pass_index}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        acc = validation_accuracy(model, validation, train_cfg.batch_size)
        stop = stopper.update(pass_index, acc)
        if stopper.best_pass == pass_index:
            best_state = model.state_dict()
        history.append({"pass": pass_index, "train_loss": float(np.mean(losses)) if losses else None,
                        "val_accuracy": acc, "steps": len(losses)})
        if on_pass:
            on_pass(history[-1])
        if stop:
            break

    model.load_state_dict(best_state)
    return TrainResult(
        model,
        history,
        int(stopper.best_pass),
        float(stopper.best_value),
        sorted(r.key for recs in train_groups.values() for r in recs),
        sorted(r.key for r in validation),
    )

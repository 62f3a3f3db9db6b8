"""Record container, datasets, subject-wise folds and windowing.

On disk a record is a directory::

    <record>/manifest.json
    <record>/<channel>.f32          raw float32 little-endian samples
    <record>/hypnogram_<scorer>.txt one integer per line, -1 = unscored

``manifest.json`` fields:

``record_id`` (str), ``subject_id`` (str), ``duration`` (seconds, float),
``channels`` (list of ``{"name", "modality", "fs", "file", "n_samples"}``,
modality one of EEG/EOG/EMG/OTHER), ``hypnograms`` (list of
``{"scorer", "file"}``). The hypnogram length is ``floor(duration / 30)``.

A dataset is a directory whose sub-directories are records; an optional
``dataset.json`` carries ``{"name": ...}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .tensor import ContractError

MODALITIES = ("EEG", "EOG", "EMG", "OTHER")
STAGE_CODES = {-1, 0, 1, 2, 3, 4}
EPOCH_SECONDS = 30.0


class RecordLoadError(Exception):
    """A record directory is malformed or inconsistent."""


@dataclass
class Channel:
    name: str
    modality: str
    fs: float
    data: np.ndarray


@dataclass
class Record:
    record_id: str
    subject_id: str
    duration: float
    channels: list[Channel]
    hypnograms: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_epochs(self) -> int:
        return int(self.duration // EPOCH_SECONDS)

    @property
    def hypnogram(self) -> np.ndarray:
        """The first listed hypnogram (the reference when there is one scorer)."""
        if not self.hypnograms:
            raise ContractError(f"record {self.record_id} has no hypnogram")
        return next(iter(self.hypnograms.values()))

    def map_channels(self, fn: Callable[[np.ndarray], np.ndarray]) -> "Record":
        chans = [replace(c, data=fn(c.data)) for c in self.channels]
        return replace(self, channels=chans)

    def select_modalities(self, modalities) -> "Record":
        keep = [c for c in self.channels if c.modality in set(modalities)]
        if not keep:
            raise ContractError(f"record {self.record_id} has no channel with modality in {sorted(modalities)}")
        return replace(self, channels=keep)

    def select_channel_names(self, names) -> "Record":
        keep = [c for c in self.channels if c.name in set(names)]
        if not keep:
            raise ContractError(f"record {self.record_id} has none of the channels {sorted(names)}")
        return replace(self, channels=keep)


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def save_record(record: Record, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chans = []
    for c in record.channels:
        if c.modality not in MODALITIES:
            raise ValueError(f"unknown modality {c.modality!r}")
        fname = f"{_safe_name(c.name)}.f32"
        (directory / fname).write_bytes(np.ascontiguousarray(c.data, dtype="<f4").tobytes())
        chans.append({"name": c.name, "modality": c.modality, "fs": float(c.fs), "file": fname,
                      "n_samples": int(len(c.data))})
    hyps = []
    for scorer, labels in record.hypnograms.items():
        fname = f"hypnogram_{_safe_name(scorer)}.txt"
        (directory / fname).write_text("".join(f"{int(v)}\n" for v in labels))
        hyps.append({"scorer": scorer, "file": fname})
    manifest = {
        "record_id": record.record_id,
        "subject_id": record.subject_id,
        "duration": float(record.duration),
        "channels": chans,
        "hypnograms": hyps,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_record(path) -> Record:
    """Load a record from its directory (or its ``manifest.json``)."""
    path = Path(path)
    directory = path.parent if path.name == "manifest.json" else path
    mpath = directory / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise RecordLoadError(f"missing manifest: {mpath}") from None
    except json.JSONDecodeError as err:
        raise RecordLoadError(f"invalid JSON in {mpath}: {err}") from None
    for key in ("record_id", "subject_id", "duration", "channels", "hypnograms"):
        if key not in manifest:
            raise RecordLoadError(f"{mpath}: missing field {key!r}")
    if not manifest["channels"]:
        raise RecordLoadError(f"{mpath}: record has no channels")
    duration = float(manifest["duration"])
    channels = []
    for entry in manifest["channels"]:
        fpath = directory / entry["file"]
        if not fpath.exists():
            raise RecordLoadError(f"{mpath}: channel file {entry['file']} not found")
        raw = fpath.read_bytes()
        if len(raw) % 4:
            raise RecordLoadError(f"{fpath}: size {len(raw)} is not a multiple of 4 bytes")
        data = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        if len(data) != int(entry["n_samples"]):
            raise RecordLoadError(
                f"{fpath}: length mismatch, manifest declares {entry['n_samples']} samples, file has {len(data)}"
            )
        expected = duration * float(entry["fs"])
        if abs(len(data) - expected) > 1.0:
            raise RecordLoadError(f"{fpath}: {len(data)} samples inconsistent with {duration}s at {entry['fs']} Hz")
        modality = entry.get("modality", "OTHER")
        if modality not in MODALITIES:
            raise RecordLoadError(f"{mpath}: unknown modality {modality!r}")
        channels.append(Channel(entry["name"], modality, float(entry["fs"]), data))
    n_epochs = int(duration // EPOCH_SECONDS)
    hypnograms = {}
    for entry in manifest["hypnograms"]:
        fpath = directory / entry["file"]
        if not fpath.exists():
            raise RecordLoadError(f"{mpath}: hypnogram file {entry['file']} not found")
        try:
            labels = np.array([int(v) for v in fpath.read_text().split()], dtype=np.int64)
        except ValueError as err:
            raise RecordLoadError(f"{fpath}: {err}") from None
        bad = set(np.unique(labels).tolist()) - STAGE_CODES
        if bad:
            raise RecordLoadError(f"{fpath}: unknown stage values {sorted(bad)}")
        if len(labels) != n_epochs:
            raise RecordLoadError(f"{fpath}: {len(labels)} labels, expected {n_epochs}")
        hypnograms[entry["scorer"]] = labels
    return Record(manifest["record_id"], manifest["subject_id"], duration, channels, hypnograms)


@dataclass
class Dataset:
    name: str
    path: Path
    record_dirs: list[Path]

    def __len__(self) -> int:
        return len(self.record_dirs)

    def record_ids(self) -> list[str]:
        return [p.name for p in self.record_dirs]

    def load(self, record_id: str) -> Record:
        return load_record(self.path / record_id)

    def __iter__(self) -> Iterator[Record]:
        for p in self.record_dirs:
            yield load_record(p)


def open_dataset(path, records: list[str] | None = None, name: str | None = None) -> Dataset:
    """List the record directories of a dataset, optionally restricted to ``records``."""
    path = Path(path)
    if not path.is_dir():
        raise RecordLoadError(f"dataset directory not found: {path}")
    meta = path / "dataset.json"
    if name is None and meta.exists():
        name = json.loads(meta.read_text()).get("name")
    dirs = sorted(p for p in path.iterdir() if (p / "manifest.json").exists())
    if records is not None:
        by_name = {p.name: p for p in dirs}
        missing = [r for r in records if r not in by_name]
        if missing:
            raise RecordLoadError(f"records not found in {path}: {missing}")
        dirs = [by_name[r] for r in records]
    if not dirs:
        raise RecordLoadError(f"no records in {path}")
    return Dataset(name or path.name, path, dirs)


# ---------------------------------------------------------------------------
# folds


@dataclass
class DatasetSplit:
    folds: dict[str, int]
    n_folds: int

    def subjects_in(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.folds.items() if f == fold)

    def fold_of(self, subject_id: str) -> int:
        return self.folds[subject_id]


def kfold_split(subject_ids, k: int, seed: int) -> DatasetSplit:
    """Shuffle unique subjects with ``seed`` and deal them round-robin into ``k`` folds."""
    subjects = sorted(set(subject_ids))
    if k < 1 or k > len(subjects):
        raise ContractError(f"cannot make {k} folds from {len(subjects)} subjects")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return DatasetSplit({subjects[j]: i % k for i, j in enumerate(order)}, k)


def split_train_validation(subject_ids, fraction: float, seed: int) -> tuple[set[str], set[str]]:
    """Subject-wise split with ``round(fraction * n)`` (at least one) validation subjects."""
    subjects = sorted(set(subject_ids))
    if not 0 < fraction < 1:
        raise ContractError("validation fraction must lie in (0, 1)")
    if len(subjects) < 2:
        raise ContractError("need at least two subjects to hold out a validation set")
    n_val = min(len(subjects) - 1, max(1, int(round(fraction * len(subjects)))))
    order = np.random.default_rng(seed).permutation(len(subjects))
    val = {subjects[i] for i in order[:n_val]}
    return set(subjects) - val, val


# ---------------------------------------------------------------------------
# windows


@dataclass
class Window:
    """``indices`` into the record's epochs; ``-1`` marks padding."""

    start: int
    indices: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return int((self.indices >= 0).sum())


def window_batches(labels: np.ndarray, T: int, mode: str = "inference",
                   rng: np.random.Generator | None = None) -> list[Window]:
    """Cut a record's epochs into windows of ``T`` consecutive epochs.

    ``inference``: every start at stride 1 (``n - T + 1`` windows); a
    record shorter than ``T`` gives one left-aligned window padded with
    ``-1`` indices and a false mask. ``train``: non-overlapping windows at
    stride ``T`` from a random phase in ``[0, T)`` (phase 0 without ``rng``).
    Unscored epochs are masked out.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if not np.any(labels >= 0):
        raise ContractError("record has no scored epoch")
    if mode == "inference":
        if n < T:
            starts = [0]
        else:
            starts = range(n - T + 1)
    elif mode == "train":
        if n <= T:
            starts = [0]
        else:
            phase = int(rng.integers(0, min(T, n - T + 1))) if rng is not None else 0
            starts = range(phase, n - T + 1, T)
    else:
        raise ValueError(f"unknown window mode {mode!r}")
    out = []
    for s in starts:
        idx = np.arange(s, s + T)
        idx[idx >= n] = -1
        lab = np.where(idx >= 0, labels[np.clip(idx, 0, n - 1)], -1)
        out.append(Window(int(s), idx, lab, lab >= 0))
    return out

"""The three learning settings (LFS, DT, FT), the transfer matrix and sweeps.

Every protocol records integrity checks in a :class:`HygieneLog`; a failed
check raises :class:`HarnessIntegrityError` immediately.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import kfold_split, split_train_validation
from .inference import StagePrediction, predict_record
from .metrics import F1Result, macro_f1, transfer_metrics, TransferReport
from .model import ModelConfig, RobustSleepNet
from .tensor import ContractError
from .training import FINETUNE_LR, PreparedRecord, TrainConfig, TrainResult, train_model

log = logging.getLogger(__name__)


class HarnessIntegrityError(AssertionError):
    """A leakage or coverage check failed."""


@dataclass
class HygieneLog:
    events: list[dict] = field(default_factory=list)

    def check(self, name: str, passed: bool, **details) -> None:
        event = {"check": name, "passed": bool(passed), **details}
        self.events.append(event)
        log.info({"event": "hygiene", **event})
        if not passed:
            raise HarnessIntegrityError(f"{name} failed: {details}")

    @property
    def all_passed(self) -> bool:
        return all(e["passed"] for e in self.events)

    def extend(self, other: "HygieneLog") -> None:
        self.events.extend(other.events)


@dataclass
class EvaluationResult:
    setting: str
    target: str
    f1: F1Result
    predictions: dict[str, StagePrediction]
    references: dict[str, np.ndarray]
    histories: list[list[dict]]
    hygiene: HygieneLog
    models: list[RobustSleepNet] = field(default_factory=list)
    fold_of: dict[str, int] = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        return self.f1.macro

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "target": self.target,
            **self.f1.to_dict(),
            "histories": self.histories,
            "hygiene": self.hygiene.events,
            "records": sorted(self.predictions),
        }


def evaluate_records(model: RobustSleepNet, records: list[PreparedRecord]) -> dict[str, StagePrediction]:
    return {r.key: predict_record(model, r) for r in records}


def score(predictions: dict[str, StagePrediction], records: list[PreparedRecord]) -> F1Result:
    by_key = {r.key: r for r in records}
    keys = sorted(predictions)
    pred = np.concatenate([predictions[k].labels for k in keys])
    ref = np.concatenate([by_key[k].labels for k in keys])
    return macro_f1(pred, ref)


def _by_subject(records: list[PreparedRecord]) -> dict[str, list[PreparedRecord]]:
    out: dict[str, list[PreparedRecord]] = {}
    for r in records:
        out.setdefault(r.subject_key, []).append(r)
    return out


def _split_validation(records: list[PreparedRecord], fraction: float, seed: int):
    train_subj, val_subj = split_train_validation([r.subject_key for r in records], fraction, seed)
    return [r for r in records if r.subject_key in train_subj], [r for r in records if r.subject_key in val_subj]


def _check_fold_coverage(hygiene: HygieneLog, setting: str, target: list[PreparedRecord],
                         counts: dict[str, int], fold_of: dict[str, int],
                         trained_subjects: dict[int, set[str]]) -> None:
    keys = sorted(r.key for r in target)
    bad = [k for k in keys if counts.get(k, 0) != 1] + sorted(set(counts) - set(keys))
    hygiene.check(f"{setting}_each_record_evaluated_once", not bad, n_records=len(keys),
                  n_evaluations=sum(counts.values()), bad=bad)
    subject_of = {r.key: r.subject_key for r in target}
    leaks = [k for k, f in fold_of.items() if subject_of[k] in trained_subjects[f]]
    hygiene.check(f"{setting}_no_subject_in_own_training_folds", not leaks, leaks=leaks)


# ---------------------------------------------------------------------------
# settings


def run_lfs(
    target: list[PreparedRecord],
    n_folds: int = 5,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    on_pass: Callable[[dict], None] | None = None,
) -> EvaluationResult:
    """Learning from scratch: subject-wise k-fold cross-validation on the target."""
    train_cfg = train_cfg or TrainConfig()
    if not target:
        raise ContractError("LFS needs target records")
    name = target[0].dataset
    split = kfold_split([r.subject_key for r in target], n_folds, train_cfg.seed)
    hygiene = HygieneLog()
    predictions: dict[str, StagePrediction] = {}
    evaluated: dict[str, int] = {}
    fold_of: dict[str, int] = {}
    trained: dict[int, set[str]] = {}
    histories = []
    models = []
    for fold in range(n_folds):
        test = [r for r in target if split.fold_of(r.subject_key) == fold]
        pool = [r for r in target if split.fold_of(r.subject_key) != fold]
        cfg = _fold_cfg(train_cfg, fold)
        tr, val = _split_validation(pool, cfg.validation_fraction, cfg.seed)
        result = train_model({name: tr}, val, model_cfg, cfg, on_pass=_tag(on_pass, setting="LFS", fold=fold))
        trained[fold] = {r.subject_key for r in tr + val}
        for k, p in evaluate_records(result.model, test).items():
            predictions[k] = p
            evaluated[k] = evaluated.get(k, 0) + 1
            fold_of[k] = fold
        histories.append(result.history)
        models.append(result.model)
    _check_fold_coverage(hygiene, "LFS", target, evaluated, fold_of, trained)
    return EvaluationResult("LFS", name, score(predictions, target), predictions,
                            {r.key: r.labels for r in target}, histories, hygiene, models, fold_of)


def _fold_cfg(cfg: TrainConfig, fold: int) -> TrainConfig:
    d = cfg.to_dict()
    d["seed"] = cfg.seed * 1000 + fold + 1
    return TrainConfig(**d)


def _tag(fn, **tags):
    if fn is None:
        return None
    return lambda event: fn({**tags, **event})


def train_direct_transfer(
    sources: dict[str, list[PreparedRecord]],
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    target_name: str | None = None,
    target_records: list[PreparedRecord] | None = None,
    on_pass: Callable[[dict], None] | None = None,
    hygiene: HygieneLog | None = None,
) -> TrainResult:
    """Train on the pooled sources, holding out a subject-wise validation share per dataset."""
    train_cfg = train_cfg or TrainConfig()
    hygiene = hygiene if hygiene is not None else HygieneLog()
    if target_name is not None:
        hygiene.check("DT_target_not_a_source", target_name not in sources, target=target_name,
                      sources=sorted(sources))
    train_groups, validation = {}, []
    for i, (name, recs) in enumerate(sorted(sources.items())):
        tr, val = _split_validation(recs, train_cfg.validation_fraction, train_cfg.seed + 17 * i)
        train_groups[name] = tr
        validation.extend(val)
    result = train_model(train_groups, validation, model_cfg, train_cfg, on_pass=_tag(on_pass, setting="DT"))
    if target_records is not None:
        target_keys = {r.key for r in target_records}
        target_subjects = {r.subject_key for r in target_records}
        seen = set(result.train_keys) | set(result.validation_keys)
        leaked = sorted(seen & target_keys)
        hygiene.check("DT_no_target_record_in_training_or_validation", not leaked, leaked=leaked,
                      n_train=len(result.train_keys), n_validation=len(result.validation_keys))
        seen_subjects = {r.subject_key for recs in sources.values() for r in recs}
        hygiene.check("DT_no_target_subject_in_sources", not (seen_subjects & target_subjects))
    return result


def run_dt(
    sources: dict[str, list[PreparedRecord]],
    target: list[PreparedRecord],
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    on_pass: Callable[[dict], None] | None = None,
    model: RobustSleepNet | None = None,
) -> EvaluationResult:
    """Direct transfer: train on the sources (unless ``model`` is given), score every target record."""
    hygiene = HygieneLog()
    name = target[0].dataset
    histories = []
    if model is None:
        result = train_direct_transfer(sources, model_cfg, train_cfg, name, target, on_pass, hygiene)
        model = result.model
        histories.append(result.history)
    predictions = evaluate_records(model, target)
    hygiene.check("DT_each_target_record_evaluated_once", sorted(predictions) == sorted(r.key for r in target))
    return EvaluationResult("DT", name, score(predictions, target), predictions,
                            {r.key: r.labels for r in target}, histories, hygiene, [model])


def run_ft(
    pretrained: RobustSleepNet,
    target: list[PreparedRecord],
    n_folds: int = 5,
    n_records: int | None = None,
    train_cfg: TrainConfig | None = None,
    on_pass: Callable[[dict], None] | None = None,
) -> EvaluationResult:
    """Finetuning: k-fold on the target starting from ``pretrained``.

    Per fold, ``n_records`` records (all when ``None``) are drawn from the
    training folds and split subject-wise into training and validation.
    ``n_records == 0`` scores the pretrained model itself.
    """
    base = train_cfg or TrainConfig(lr=FINETUNE_LR)
    name = target[0].dataset
    split = kfold_split([r.subject_key for r in target], n_folds, base.seed)
    hygiene = HygieneLog()
    predictions: dict[str, StagePrediction] = {}
    evaluated: dict[str, int] = {}
    fold_of: dict[str, int] = {}
    trained: dict[int, set[str]] = {}
    histories = []
    models = []
    for fold in range(n_folds):
        test = [r for r in target if split.fold_of(r.subject_key) == fold]
        pool = [r for r in target if split.fold_of(r.subject_key) != fold]
        cfg = _fold_cfg(base, fold)
        rng = np.random.default_rng(cfg.seed)
        if n_records is not None:
            pick = rng.permutation(len(pool))[: n_records]
            pool = [pool[i] for i in sorted(pick)]
        if n_records == 0 or not pool:
            model = pretrained
            trained[fold] = set()
            histories.append([])
        else:
            tr, val = _split_validation(pool, cfg.validation_fraction, cfg.seed)
            result = train_model({name: tr}, val, train_cfg=cfg, init_model=pretrained,
                                 on_pass=_tag(on_pass, setting="FT", fold=fold))
            model = result.model
            trained[fold] = {r.subject_key for r in tr + val}
            histories.append(result.history)
        models.append(model)
        for k, p in evaluate_records(model, test).items():
            predictions[k] = p
            evaluated[k] = evaluated.get(k, 0) + 1
            fold_of[k] = fold
    _check_fold_coverage(hygiene, "FT", target, evaluated, fold_of, trained)
    return EvaluationResult("FT", name, score(predictions, target), predictions,
                            {r.key: r.labels for r in target}, histories, hygiene, models, fold_of)


# ---------------------------------------------------------------------------
# transfer matrix


def run_transfer_matrix(
    datasets: dict[str, list[PreparedRecord]],
    n_folds: int = 5,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    on_pass: Callable[[dict], None] | None = None,
) -> tuple[TransferReport, HygieneLog]:
    """Single-source DT between every ordered pair plus LFS on the diagonal."""
    names = sorted(datasets)
    n = len(names)
    f1 = np.zeros((n, n))
    lfs = np.zeros(n)
    hygiene = HygieneLog()
    for j, name in enumerate(names):
        res = run_lfs(datasets[name], n_folds, model_cfg, train_cfg, _tag(on_pass, target=name))
        lfs[j] = res.macro_f1
        f1[j, j] = res.macro_f1
        hygiene.extend(res.hygiene)
    for i, src in enumerate(names):
        others = [nm for nm in names if nm != src]
        model = None
        for nm in others:
            res = run_dt({src: datasets[src]}, datasets[nm], model_cfg, train_cfg,
                         _tag(on_pass, source=src, target=nm), model=model)
            if model is None:
                model = res.models[0]
            f1[i, names.index(nm)] = res.macro_f1
            hygiene.extend(res.hygiene)
    return transfer_metrics(f1, lfs, names), hygiene


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    point: object
    f1: list[float]
    lfs: float | None

    @property
    def mean(self) -> float:
        return float(np.mean(self.f1))

    def to_dict(self) -> dict:
        out = {"point": self.point, "f1": self.f1, "f1_mean": self.mean,
               "f1_min": float(np.min(self.f1)), "f1_max": float(np.max(self.f1))}
        if self.lfs:
            out.update({f"pct_lfs_{k}": 100.0 * v / self.lfs
                        for k, v in (("mean", self.mean), ("min", min(self.f1)), ("max", max(self.f1)))})
        return out


@dataclass
class SweepReport:
    kind: str
    rows: list[SweepRow]
    n_runs: int
    hygiene: HygieneLog

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_runs": self.n_runs, "rows": [r.to_dict() for r in self.rows],
                "hygiene": self.hygiene.events}


SWEEP_KINDS = ("training-size", "channel-ablation", "finetune-size")


def _subsample_sources(sources, per_dataset: int, rng) -> dict[str, list[PreparedRecord]]:
    """``per_dataset`` records from each source; shortfalls are filled from the other datasets."""
    chosen, spare = {}, []
    for name in sorted(sources):
        recs = sources[name]
        order = rng.permutation(len(recs))
        chosen[name] = [recs[i] for i in order[:per_dataset]]
        spare.extend(recs[i] for i in order[per_dataset:])
    shortfall = sum(max(0, per_dataset - len(sources[n])) for n in sources)
    if shortfall and spare:
        extra = [spare[i] for i in rng.permutation(len(spare))[:shortfall]]
        for r in extra:
            chosen[r.dataset].append(r)
    return chosen


def run_sweep(
    kind: str,
    grid: list,
    sources: dict[str, list[PreparedRecord]],
    target: list[PreparedRecord],
    repetitions: int = 3,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    lfs_f1: float | None = None,
    pretrained: RobustSleepNet | None = None,
    n_folds: int = 5,
    on_pass: Callable[[dict], None] | None = None,
) -> SweepReport:
    """Repeat train/evaluate runs over a grid.

    * ``training-size``: grid of records per source dataset; a DT model is
      trained for every (point, repetition).
    * ``channel-ablation``: grid of modality subsets (e.g. ``["EEG"]``);
      one DT model per repetition is scored on the target restricted to
      each subset.
    * ``finetune-size``: grid of finetuning record counts; point 0 is the
      pretrained (DT) model itself.
    """
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    if not grid:
        raise ContractError("sweep grid is empty")
    base = train_cfg or TrainConfig()
    hygiene = HygieneLog()
    scores: dict[int, list[float]] = {i: [] for i in range(len(grid))}
    n_runs = 0

    def rep_cfg(point_index: int, rep: int, lr: float | None = None) -> TrainConfig:
        d = base.to_dict()
        d["seed"] = base.seed * 10007 + point_index * 101 + rep
        if lr is not None:
            d["lr"] = lr
        return TrainConfig(**d)

    if kind == "training-size":
        for pi, per_ds in enumerate(grid):
            for rep in range(repetitions):
                cfg = rep_cfg(pi, rep)
                subset = _subsample_sources(sources, int(per_ds), np.random.default_rng(cfg.seed))
                res = run_dt(subset, target, model_cfg, cfg, _tag(on_pass, point=per_ds, rep=rep))
                scores[pi].append(res.macro_f1)
                hygiene.extend(res.hygiene)
                n_runs += 1
    elif kind == "channel-ablation":
        for rep in range(repetitions):
            cfg = rep_cfg(0, rep)
            model = pretrained
            if model is None:
                model = train_direct_transfer(sources, model_cfg, cfg, target[0].dataset, target,
                                              _tag(on_pass, rep=rep), hygiene).model
            for pi, mods in enumerate(grid):
                restricted = [r.select_modalities(mods) for r in target]
                res = run_dt(sources, restricted, model=model)
                scores[pi].append(res.macro_f1)
                hygiene.extend(res.hygiene)
                n_runs += 1
    else:
        if pretrained is None:
            pretrained = train_direct_transfer(sources, model_cfg, rep_cfg(0, 0), target[0].dataset, target,
                                               _tag(on_pass, stage="pretrain"), hygiene).model
        for pi, k in enumerate(grid):
            for rep in range(repetitions):
                cfg = rep_cfg(pi, rep, lr=FINETUNE_LR)
                res = run_ft(pretrained, target, n_folds, int(k), cfg, _tag(on_pass, point=k, rep=rep))
                scores[pi].append(res.macro_f1)
                hygiene.extend(res.hygiene)
                n_runs += 1
    rows = [SweepRow(_jsonable(p), scores[i], lfs_f1) for i, p in enumerate(grid)]
    return SweepReport(kind, rows, n_runs, hygiene)


def _jsonable(point):
    if isinstance(point, (list, tuple)):
        return list(point)
    if isinstance(point, np.generic):
        return point.item()
    return point

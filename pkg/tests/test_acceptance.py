"""Acceptance criteria, each run at its stated tolerance and time budget.

Every test appends one PASS/FAIL line to ``conftest.ACCEPTANCE_LINES``;
the lines are printed together at the end of the session.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from robustsleepnet.data import open_dataset
from robustsleepnet.dsp import PreprocessConfig, stft
from robustsleepnet.gradcheck import run_gradcheck_suite, worst_case
from robustsleepnet.inference import geometric_aggregate
from robustsleepnet.metrics import macro_f1
from robustsleepnet.model import RobustSleepNet, count_parameters, model_forward, sample_channel_count
from robustsleepnet.protocols import HygieneLog, run_dt, run_ft, run_lfs, run_sweep
from robustsleepnet.synthetic import SyntheticSpec, generate_synthetic_dataset
from robustsleepnet.tensor import no_grad
from robustsleepnet.training import FINETUNE_LR, TrainConfig, prepare_records

PUBLISHED_COUNT = 180_343

# hygiene events of the end-to-end runs, checked together by criterion 10
HYGIENE: dict[str, HygieneLog] = {}


def report(number, name, passed, detail, seconds, limit):
    ok = passed and seconds <= limit
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail} ({seconds:.1f}s, limit {limit:.0f}s)")
    assert passed, detail
    assert seconds <= limit, f"took {seconds:.1f}s, limit {limit}s"


def load_synthetic(root, **spec):
    path = generate_synthetic_dataset(SyntheticSpec(n_epochs=120, **spec), root / spec["name"])
    return prepare_records(list(open_dataset(path)), spec["name"])


# ---------------------------------------------------------------------------
# brute-force oracles (plain Python loops, no shared code with the library)


def oracle_aggregate(window_probs, starts, n_epochs):
    out = []
    for e in range(n_epochs):
        logs, m = [0.0] * 5, 0
        for s, w in zip(starts, window_probs):
            if s <= e < s + len(w):
                m += 1
                logs = [a + float(np.log(p)) for a, p in zip(logs, w[e - s])]
        g = [float(np.exp(v / m)) for v in logs]
        total = sum(g)
        out.append([v / total for v in g])
    return np.array(out)


def oracle_macro_f1(pred, ref):
    f1s = []
    for k in range(5):
        tp = fp = fn = 0
        for p, r in zip(pred, ref):
            if r < 0:
                continue
            tp += p == k and r == k
            fp += p == k and r != k
            fn += p != k and r == k
        if tp + fp + fn:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    return sum(f1s) / len(f1s)


# ---------------------------------------------------------------------------
# fast criteria


def test_c01_parameter_count():
    t = time.perf_counter()
    n = count_parameters(RobustSleepNet(seed=0))
    dt = time.perf_counter() - t
    rel = abs(n - PUBLISHED_COUNT) / PUBLISHED_COUNT
    report(1, "parameter count", rel <= 0.03, f"{n} vs {PUBLISHED_COUNT} ({100 * rel:.2f}% off)", dt, 1)


def test_c02_gradient_suite():
    t = time.perf_counter()
    cases = run_gradcheck_suite(seed=0, tol=1e-4)
    dt = time.perf_counter() - t
    worst = worst_case(cases)
    names = {c.name for c in cases}
    needed = {"linear", "softmax", "dropout", "gru_uni", "gru_bi", "attention", "cross_entropy", "model_reduced"}
    passed = all(c.report.passed for c in cases) and needed <= names
    report(2, "gradient suite", passed,
           f"{len(cases)} cases, worst {worst.name} rel err {worst.report.max_rel_error:.1e} (tol 1e-4)", dt, 120)


def test_c03_montage_invariance():
    model = RobustSleepNet(seed=0)
    rng = np.random.default_rng(3)
    worst = 0.0
    t = time.perf_counter()
    with no_grad():
        for _ in range(50):
            c = int(rng.integers(1, 9))
            z = rng.standard_normal((c, 1800, 21))
            base = model_forward(model, z).data
            perm = model_forward(model, z[rng.permutation(c)]).data
            # every channel repeated k times, in shuffled order
            k = int(rng.integers(2, 4))
            dup = model_forward(model, np.repeat(z, k, axis=0)[rng.permutation(k * c)]).data
            worst = max(worst, float(np.abs(perm - base).max()), float(np.abs(dup - base).max()))
    dt = time.perf_counter() - t
    report(3, "montage invariance", worst <= 1e-6, f"max output change {worst:.1e} over 50 inputs", dt, 60)


def test_c04_channel_sampler():
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for c_max in (2, 4, 8):
        draws = np.array([sample_channel_count(c_max, rng) for _ in range(100_000)])
        freq = np.bincount(draws, minlength=c_max + 1)[1:] / len(draws)
        harmonic = sum(1 / n for n in range(1, c_max + 1))
        expect = np.array([1 / (n * harmonic) for n in range(1, c_max + 1)])
        worst = max(worst, float(np.abs(freq - expect).max()))
    dt = time.perf_counter() - t
    report(4, "channel-count sampler", worst <= 0.005, f"max deviation {100 * worst:.2f} pp", dt, 10)


def test_c05_aggregation_and_f1_oracles():
    rng = np.random.default_rng(5)
    t = time.perf_counter()
    worst_agg = worst_f1 = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 41))
        T = int(rng.integers(1, min(n, 21) + 1))
        starts = list(range(n - T + 1))
        probs = rng.dirichlet(np.ones(5), size=(len(starts), T))
        worst_agg = max(worst_agg, float(np.abs(geometric_aggregate(probs, starts, n)
                                                - oracle_aggregate(probs, starts, n)).max()))
    for _ in range(1000):
        m = int(rng.integers(1, 200))
        ref = rng.integers(-1, 5, size=m)
        ref[0] = rng.integers(0, 5)
        pred = rng.integers(0, 5, size=m)
        worst_f1 = max(worst_f1, abs(macro_f1(pred, ref).macro - oracle_macro_f1(pred.tolist(), ref.tolist())))
    dt = time.perf_counter() - t
    report(5, "aggregation and macro-F1 oracles", max(worst_agg, worst_f1) <= 1e-12,
           f"max error aggregation {worst_agg:.1e}, macro-F1 {worst_f1:.1e}", dt, 30)


def test_c06_stft_contract():
    t = time.perf_counter()
    cfg = PreprocessConfig()
    spec = stft(np.zeros(cfg.epoch_samples), cfg)
    tt = np.arange(cfg.epoch_samples) / cfg.target_fs
    peaks = stft(np.sin(2 * np.pi * 10 * tt), cfg).argmax(axis=0)
    dt = time.perf_counter() - t
    passed = spec.shape == (65, 27) and bool(np.all(peaks == 21))
    report(6, "STFT contract", passed, f"shape {spec.shape}, peak bins {sorted(set(peaks.tolist()))}", dt, 5)


# ---------------------------------------------------------------------------
# end-to-end criteria on synthetic data


@pytest.fixture(scope="module")
def synthetic_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def transfer_runs(synthetic_root):
    """Sources, target, the target's LFS score and the DT run of criterion 8."""
    t = time.perf_counter()
    src4 = load_synthetic(synthetic_root, name="src4", n_records=24, n_channels=4, fs=100.0, seed=11)
    src2 = load_synthetic(synthetic_root, name="src2", n_records=24, n_channels=2, fs=[128.0, 100.0],
                          gain_range=[0.3, 3.0], seed=12)
    target = load_synthetic(synthetic_root, name="tgt3", n_records=20, n_channels=3, fs=[200.0, 128.0, 100.0],
                            gain_range=[0.4, 2.5], noise_level=0.3, seed=13)
    lfs = run_lfs(target, 5, train_cfg=TrainConfig(seed=0))
    dt = run_dt({"src4": src4, "src2": src2}, target, train_cfg=TrainConfig(seed=0))
    HYGIENE["target LFS"] = lfs.hygiene
    HYGIENE["DT"] = dt.hygiene
    return {"sources": {"src4": src4, "src2": src2}, "target": target, "lfs": lfs, "dt": dt,
            "seconds": time.perf_counter() - t}


@pytest.mark.slow
def test_c07_lfs_end_to_end(synthetic_root):
    t = time.perf_counter()
    records = load_synthetic(synthetic_root, name="lfs40", n_records=40, n_channels=4, fs=100.0, seed=7)
    res = run_lfs(records, 5, train_cfg=TrainConfig(seed=0))
    dt = time.perf_counter() - t
    HYGIENE["LFS"] = res.hygiene
    report(7, "LFS end-to-end", res.macro_f1 >= 0.90,
           f"macro-F1 {res.macro_f1:.3f} over {len(records)} records, 5 folds (need >= 0.90)", dt, 15 * 60)


@pytest.mark.slow
def test_c08_direct_transfer(transfer_runs):
    lfs, dt = transfer_runs["lfs"].macro_f1, transfer_runs["dt"].macro_f1
    ratio = dt / lfs
    report(8, "montage-robust DT", ratio >= 0.75,
           f"DT {dt:.3f} vs target LFS {lfs:.3f}, ratio {ratio:.2f} (need >= 0.75)",
           transfer_runs["seconds"], 30 * 60)


@pytest.mark.slow
def test_c09_finetune_non_regression(transfer_runs):
    t = time.perf_counter()
    dt = transfer_runs["dt"]
    pretrained = dt.models[0]
    ft = run_ft(pretrained, transfer_runs["target"], 5, 10, TrainConfig(lr=FINETUNE_LR, seed=0))
    sweep = run_sweep("finetune-size", [0], transfer_runs["sources"], transfer_runs["target"], repetitions=1,
                      pretrained=pretrained)
    seconds = time.perf_counter() - t
    HYGIENE["FT"] = ft.hygiene
    HYGIENE["FT sweep"] = sweep.hygiene
    k0 = sweep.rows[0].f1[0]
    passed = ft.macro_f1 >= dt.macro_f1 - 0.01 and k0 == dt.macro_f1
    report(9, "FT non-regression", passed,
           f"FT {ft.macro_f1:.3f} vs DT {dt.macro_f1:.3f}; sweep k=0 {k0:.3f} (equal: {k0 == dt.macro_f1})",
           seconds, 20 * 60)


@pytest.mark.slow
def test_c10_harness_hygiene():
    t = time.perf_counter()
    expected = {"LFS", "target LFS", "DT", "FT", "FT sweep"}
    events = [e for log in HYGIENE.values() for e in log.events]
    checks = {e["check"] for e in events}
    needed = {"LFS_each_record_evaluated_once", "LFS_no_subject_in_own_training_folds",
              "DT_no_target_record_in_training_or_validation", "DT_no_target_subject_in_sources",
              "DT_each_target_record_evaluated_once", "FT_each_record_evaluated_once",
              "FT_no_subject_in_own_training_folds"}
    passed = set(HYGIENE) == expected and needed <= checks and all(e["passed"] for e in events)
    missing = sorted(expected - set(HYGIENE)) + sorted(needed - checks)
    detail = f"{len(events)} checks from {len(HYGIENE)} runs, all passed" if passed else f"missing or failed: {missing}"
    report(10, "harness hygiene", passed, detail, time.perf_counter() - t, 1)

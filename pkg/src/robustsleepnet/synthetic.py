"""Synthetic polysomnography datasets with known stage structure.

Hypnograms follow a Markov chain over the five stages. Every epoch's
source signal is a sum of band-limited noise components chosen by its stage
(N2 adds 12-14 Hz spindle bursts); each channel sees the source through its
own gain plus independent white noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import EPOCH_SECONDS, MODALITIES, Channel, Record, save_record

STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")

DEFAULT_TRANSITIONS = (
    (0.80, 0.12, 0.05, 0.00, 0.03),
    (0.08, 0.55, 0.30, 0.00, 0.07),
    (0.03, 0.05, 0.80, 0.09, 0.03),
    (0.02, 0.01, 0.12, 0.85, 0.00),
    (0.05, 0.05, 0.05, 0.00, 0.85),
)

# (low Hz, high Hz, RMS amplitude) per component
DEFAULT_RECIPES = {
    "W": {"bands": [[8.0, 12.0, 1.0], [16.0, 28.0, 0.4]], "spindles": 0},
    "N1": {"bands": [[4.0, 7.0, 1.0]], "spindles": 0},
    "N2": {"bands": [[4.0, 7.0, 1.0]], "spindles": 2},
    "N3": {"bands": [[0.5, 2.0, 4.0]], "spindles": 0},
    "REM": {"bands": [[4.0, 8.0, 0.4]], "spindles": 0},
}


class SyntheticSpecError(ValueError):
    """A synthetic dataset description is invalid."""


@dataclass
class SyntheticSpec:
    name: str = "synthetic"
    n_records: int = 10
    n_channels: int = 2
    fs: float | list[float] = 100.0
    n_epochs: int = 120
    transitions: list[list[float]] = field(default_factory=lambda: [list(r) for r in DEFAULT_TRANSITIONS])
    recipes: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_RECIPES)))
    noise_level: float = 0.2
    gain_range: list[float] = field(default_factory=lambda: [0.5, 2.0])
    spindle_amplitude: float = 1.5
    modalities: list[str] | None = None
    records_per_subject: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_records < 1 or self.n_channels < 1 or self.n_epochs < 1:
            raise SyntheticSpecError("n_records, n_channels and n_epochs must be >= 1")
        rates = self.channel_rates()
        if any(r <= 60.0 for r in rates):
            raise SyntheticSpecError("sampling rates must exceed 60 Hz (band-pass upper edge is 30 Hz)")
        P = np.asarray(self.transitions, dtype=float)
        if P.shape != (5, 5) or np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
            raise SyntheticSpecError("transitions must be a 5x5 row-stochastic matrix")
        if set(self.recipes) != set(STAGE_NAMES):
            raise SyntheticSpecError(f"recipes must define exactly the stages {STAGE_NAMES}")
        for stage, recipe in self.recipes.items():
            for band in recipe.get("bands", []):
                lo, hi, amp = band
                if not 0 < lo < hi or amp < 0:
                    raise SyntheticSpecError(f"recipe {stage}: invalid band {band}")
        if self.noise_level < 0:
            raise SyntheticSpecError("noise_level must be >= 0")
        if len(self.gain_range) != 2 or not 0 < self.gain_range[0] <= self.gain_range[1]:
            raise SyntheticSpecError("gain_range must be [low, high] with 0 < low <= high")
        mods = self.channel_modalities()
        if any(m not in MODALITIES for m in mods):
            raise SyntheticSpecError(f"modalities must be drawn from {MODALITIES}")
        if self.records_per_subject < 1:
            raise SyntheticSpecError("records_per_subject must be >= 1")

    def channel_rates(self) -> list[float]:
        if isinstance(self.fs, (list, tuple)):
            if len(self.fs) != self.n_channels:
                raise SyntheticSpecError("fs list must have one rate per channel")
            return [float(r) for r in self.fs]
        return [float(self.fs)] * self.n_channels

    def channel_modalities(self) -> list[str]:
        if self.modalities is None:
            return ["EEG"] * self.n_channels
        if len(self.modalities) != self.n_channels:
            raise SyntheticSpecError("modalities must list one tag per channel")
        return list(self.modalities)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        if not isinstance(d, dict):
            raise SyntheticSpecError("synthetic spec must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SyntheticSpecError(f"unknown fields: {unknown}")
        try:
            return cls(**d)
        except TypeError as err:
            raise SyntheticSpecError(str(err)) from None


def stationary_distribution(transitions) -> np.ndarray:
    P = np.asarray(transitions, dtype=float)
    vals, vecs = np.linalg.eig(P.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()


def markov_hypnogram(transitions, n_epochs: int, rng: np.random.Generator, initial=None) -> np.ndarray:
    P = np.asarray(transitions, dtype=float)
    init = stationary_distribution(P) if initial is None else np.asarray(initial, dtype=float)
    states = np.empty(n_epochs, dtype=np.int64)
    cum = np.cumsum(P, axis=1)
    u = rng.random(n_epochs)
    states[0] = min(int(np.searchsorted(np.cumsum(init), u[0], side="right")), 4)
    for i in range(1, n_epochs):
        states[i] = min(int(np.searchsorted(cum[states[i - 1]], u[i], side="right")), 4)
    return states


def band_noise(n: int, fs: float, lo: float, hi: float, rms: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise restricted to ``[lo, hi]`` Hz, scaled to the given RMS."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec = (rng.standard_normal(len(freqs)) + 1j * rng.standard_normal(len(freqs)))
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    cur = np.sqrt(np.mean(x * x))
    return x * (rms / cur) if cur > 0 else x


def spindle_bursts(n: int, fs: float, count: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fs
    out = np.zeros(n)
    span = n / fs
    for _ in range(count):
        centre = rng.uniform(1.0, span - 1.0)
        freq = rng.uniform(12.0, 14.0)
        env = np.exp(-0.5 * ((t - centre) / 0.25) ** 2)
        out += amplitude * env * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return out


def stage_source(stages: np.ndarray, fs: float, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n_ep = int(round(EPOCH_SECONDS * fs))
    out = np.empty(len(stages) * n_ep)
    for i, s in enumerate(stages):
        recipe = spec.recipes[STAGE_NAMES[s]]
        seg = np.zeros(n_ep)
        for lo, hi, amp in recipe.get("bands", []):
            seg += band_noise(n_ep, fs, lo, hi, amp, rng)
        if recipe.get("spindles", 0):
            seg += spindle_bursts(n_ep, fs, int(recipe["spindles"]), spec.spindle_amplitude, rng)
        out[i * n_ep:(i + 1) * n_ep] = seg
    return out


def synthetic_record(spec: SyntheticSpec, index: int) -> Record:
    """Record ``index`` of the dataset; depends only on ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    stages = markov_hypnogram(spec.transitions, spec.n_epochs, rng)
    rates = spec.channel_rates()
    mods = spec.channel_modalities()
    sources = {fs: stage_source(stages, fs, spec, rng) for fs in sorted(set(rates))}
    channels = []
    for c, (fs, mod) in enumerate(zip(rates, mods)):
        gain = rng.uniform(*spec.gain_range)
        src = sources[fs]
        x = gain * src + spec.noise_level * rng.standard_normal(len(src))
        channels.append(Channel(f"{mod}{c + 1}", mod, fs, x.astype(np.float32)))
    rid = f"rec{index:03d}"
    sid = f"subj{index // spec.records_per_subject:03d}"
    return Record(rid, sid, spec.n_epochs * EPOCH_SECONDS, channels, {"consensus": stages})


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """Write ``spec.n_records`` records plus ``dataset.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(spec.n_records):
        save_record(synthetic_record(spec, i), out_dir / f"rec{i:03d}")
    (out_dir / "dataset.json").write_text(json.dumps({"name": spec.name, "synthetic_spec": spec.to_dict()}, indent=2))
    return out_dir

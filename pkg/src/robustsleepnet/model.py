"""The variable-montage sequence-to-sequence sleep stager.

Blocks, in order: spectrogram normalisation (see :mod:`.dsp`), an epoch
encoder that recombines any number of channels into ``n_heads`` channels
with attention, a two-layer bidirectional GRU sequence encoder and a
softmax classifier.

Parameter-count conventions (default config gives 180,143 trainable
scalars, 0.11 % below the published 180,343):

* GRU gates carry separate input and recurrent biases;
* the second sequence GRU reads ``concat(layer-1 input, layer-1 output)``
  (``P + 2*H2`` features) and the classifier reads the second layer's
  ``2*H2`` outputs, so ``Q = 2*H2``;
* each attention head has ``W (K x d)``, ``b (K)`` and context ``u (K)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import dsp
from .layers import GRU, Attention, Linear, Module, dropout_apply, gru_forward, load_parameters, save_parameters
from .tensor import ContractError, ShapeError, Tensor, concat, einsum, softmax, stack

STAGES = ("W", "N1", "N2", "N3", "REM")
N_CLASSES = 5


@dataclass(frozen=True)
class ModelConfig:
    T: int = 21
    L: int = 1800
    n_fft: int = 128
    n_stride: int = 60
    f_red: int = 32
    n_heads: int = 4
    k1: int = 30
    h1: int = 64
    p1: float = 0.5
    p: int = 50
    k2: int = 25
    h2: int = 50
    p2: float = 0.5
    n_classes: int = N_CLASSES

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0 or (f.name not in ("p1", "p2") and getattr(self, f.name) <= 0):
                raise ValueError(f"model config field {f.name} must be positive")
        if self.n_classes != N_CLASSES:
            raise ValueError("the classifier always has 5 classes")
        if not (0 <= self.p1 < 1 and 0 <= self.p2 < 1):
            raise ValueError("dropout probabilities must lie in [0, 1)")
        if self.L < self.n_fft or dsp.stft_frame_count(self.L, self.n_fft, self.n_stride) < 1:
            raise ValueError("epoch length too short for the STFT settings")

    @property
    def f_fft(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def l_fft(self) -> int:
        return dsp.stft_frame_count(self.L, self.n_fft, self.n_stride)

    @property
    def q(self) -> int:
        return 2 * self.h2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class RobustSleepNet(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        cfg = config or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.freq_reduction = Linear(cfg.f_fft, cfg.f_red, rng)
        self.heads = [Attention(cfg.f_red, cfg.k1, rng) for _ in range(cfg.n_heads)]
        self.epoch_gru = GRU(cfg.n_heads * cfg.f_red, cfg.h1, rng)
        self.projection = Linear(2 * cfg.h1, cfg.p, rng)
        self.temporal_attention = Attention(cfg.p, cfg.k2, rng)
        self.seq_gru1 = GRU(cfg.p, cfg.h2, rng)
        self.seq_gru2 = GRU(cfg.p + 2 * cfg.h2, cfg.h2, rng)
        self.classifier = Linear(cfg.q, cfg.n_classes, rng)

    # -- blocks ---------------------------------------------------------------
    def recombine(self, x_red: Tensor) -> tuple[Tensor, Tensor]:
        """``(..., C, L, F_red)`` -> ``(..., L, n_heads, F_red)`` plus weights ``(..., C, n_heads)``.

        Each head scores every channel from its time-averaged reduced
        spectrum and averages the channels with the softmax of the scores.
        """
        if x_red.shape[-3] < 1:
            raise ContractError("channel recombination needs at least one channel")
        desc = x_red.mean(axis=-2)  # (..., C, F_red)
        weights = stack([head.weights(desc) for head in self.heads], axis=-1)
        lead = "abcdefgh"[: x_red.ndim - 3]
        out = einsum(f"{lead}ch,{lead}clf->{lead}lhf", weights, x_red)
        return out, weights

    def encode_epochs(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        """Normalised spectrograms ``(N, C, L_fft, F_fft)`` -> epoch features ``(N, P)``."""
        cfg = self.config
        if x.ndim != 4 or x.shape[-1] != cfg.f_fft or x.shape[-2] != cfg.l_fft:
            raise ShapeError(f"expected (N, C, {cfg.l_fft}, {cfg.f_fft}) spectrograms, got {x.shape}")
        n = x.shape[0]
        x_red = self.freq_reduction(x)  # (N, C, L, F_red)
        x_att, _ = self.recombine(x_red)  # (N, L, H, F_red)
        x_flat = x_att.reshape(n, cfg.l_fft, cfg.n_heads * cfg.f_red).transpose(1, 0, 2)
        x_gru = gru_forward(self.epoch_gru, x_flat, cfg.p1, train, rng)  # (L, N, 2H1)
        x_proj = self.projection(x_gru).transpose(1, 0, 2)  # (N, L, P)
        w = self.temporal_attention.weights(x_proj)
        return einsum("nl,nlp->np", w, x_proj)

    def encode_sequence(self, feats: Tensor, train: bool = False, rng=None) -> Tensor:
        """Epoch features ``(B, T, P)`` -> encoded sequence ``(B, T, Q)``."""
        cfg = self.config
        z = feats.transpose(1, 0, 2)  # (T, B, P)
        out1 = dropout_apply(gru_forward(self.seq_gru1, z), cfg.p2, train, rng)
        out2 = dropout_apply(gru_forward(self.seq_gru2, concat([z, out1], axis=-1)), cfg.p2, train, rng)
        return out2.transpose(1, 0, 2)

    def forward(self, windows, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Class probabilities ``(B, T, 5)`` for normalised windows ``(B, T, C, L_fft, F_fft)``."""
        x = windows if isinstance(windows, Tensor) else Tensor(windows)
        if x.ndim != 5:
            raise ShapeError(f"expected (B, T, C, L_fft, F_fft) windows, got {x.shape}")
        b, t, c = x.shape[:3]
        if train and t != self.config.T:
            raise ContractError(f"training windows must span T={self.config.T} epochs, got {t}")
        if train and rng is None:
            raise ContractError("training forward pass needs a random generator")
        feats = self.encode_epochs(x.reshape(b * t, c, *x.shape[3:]), train, rng).reshape(b, t, self.config.p)
        encoded = self.encode_sequence(feats, train, rng)
        return softmax(self.classifier(encoded), axis=-1)

    __call__ = forward


# ---------------------------------------------------------------------------
# single-example API in the (C, F, L) layout


def channel_recombine(model: RobustSleepNet, x_red) -> Tensor:
    """Recombine ``(C, F_red, L_fft)`` into ``(n_heads, F_red, L_fft)``."""
    x = x_red if isinstance(x_red, Tensor) else Tensor(x_red)
    if x.ndim != 3:
        raise ShapeError(f"expected (C, F_red, L_fft), got {x.shape}")
    if x.shape[0] == 0:
        raise ContractError("channel recombination needs at least one channel")
    out, _ = model.recombine(x.transpose(0, 2, 1))  # (L, H, F_red)
    return out.transpose(1, 2, 0)


def epoch_encode(model: RobustSleepNet, spec, train: bool = False, rng=None) -> Tensor:
    """Encode one normalised epoch ``(C, F_fft, L_fft)`` into a vector of length ``P``."""
    x = spec if isinstance(spec, Tensor) else Tensor(spec)
    if x.ndim != 3:
        raise ShapeError(f"expected (C, F_fft, L_fft), got {x.shape}")
    return model.encode_epochs(x.transpose(0, 2, 1).reshape(1, x.shape[0], x.shape[2], x.shape[1]), train, rng)[0]


def spectrogram_windows(z: np.ndarray, pcfg: dsp.PreprocessConfig) -> np.ndarray:
    """Preprocessed signal ``(C, L, T)`` -> normalised window ``(1, T, C, L_fft, F_fft)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"expected (C, L, T), got {z.shape}")
    specs = dsp.stft(np.moveaxis(z, 2, 0), pcfg)  # (T, C, F, L_fft)
    window = np.swapaxes(specs, -1, -2)[None]  # (1, T, C, L_fft, F)
    return dsp.normalize_windows(window)


def model_forward(model: RobustSleepNet, z, train: bool = False, rng=None, pcfg: dsp.PreprocessConfig | None = None) -> Tensor:
    """Stage probabilities ``(5, T)`` for a preprocessed 60 Hz signal block ``(C, L, T)``."""
    cfg = model.config
    pcfg = pcfg or dsp.PreprocessConfig(n_fft=cfg.n_fft, n_stride=cfg.n_stride)
    window = spectrogram_windows(z, pcfg)
    probs = model.forward(Tensor(window), train, rng)
    return probs[0].transpose(1, 0)


def count_parameters(model: Module) -> int:
    return model.count_parameters()


def parameter_breakdown(model: RobustSleepNet) -> dict[str, int]:
    parts = {
        "freq_reduction": model.freq_reduction,
        "channel_attention_heads": model.heads,
        "epoch_gru": model.epoch_gru,
        "projection": model.projection,
        "temporal_attention": model.temporal_attention,
        "sequence_gru_1": model.seq_gru1,
        "sequence_gru_2": model.seq_gru2,
        "classifier": model.classifier,
    }
    out = {}
    for name, part in parts.items():
        items = part if isinstance(part, list) else [part]
        out[name] = sum(m.count_parameters() for m in items)
    out["total"] = model.count_parameters()
    return out


# ---------------------------------------------------------------------------
# channel sampling


def channel_count_probabilities(c_max: int) -> np.ndarray:
    """``P(n) = 1 / (n * H_cmax)`` for ``n = 1..c_max``."""
    if c_max < 1:
        raise ContractError(f"c_max must be >= 1, got {c_max}")
    n = np.arange(1, c_max + 1, dtype=np.float64)
    return (1.0 / n) / np.sum(1.0 / n)


@lru_cache(maxsize=None)
def _channel_count_cdf(c_max: int) -> np.ndarray:
    return np.cumsum(channel_count_probabilities(c_max))


def sample_channel_count(c_max: int, rng: np.random.Generator) -> int:
    """Draw ``C_batch`` in ``1..c_max`` by inverting the harmonic-law CDF."""
    if c_max < 1:
        raise ContractError(f"c_max must be >= 1, got {c_max}")
    k = int(np.searchsorted(_channel_count_cdf(c_max), rng.random(), side="right"))
    return min(k, c_max - 1) + 1


def select_channels(n_channels: int, c_batch: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform channel indices; drawn with replacement only when ``c_batch > n_channels``."""
    if n_channels < 1:
        raise ContractError("record has no channels")
    if c_batch < 1:
        raise ContractError("c_batch must be >= 1")
    return rng.choice(n_channels, size=c_batch, replace=c_batch > n_channels)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: RobustSleepNet, directory, pcfg: dsp.PreprocessConfig, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_parameters(model, directory / "params")
    meta = {"model": model.config.to_dict(), "preprocess": pcfg.to_dict()}
    if extra:
        meta["extra"] = extra
    (directory / "config.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_checkpoint(directory) -> tuple[RobustSleepNet, dsp.PreprocessConfig]:
    directory = Path(directory)
    meta_path = directory / "config.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    meta = json.loads(meta_path.read_text())
    model = RobustSleepNet(ModelConfig.from_dict(meta["model"]))
    load_parameters(model, directory / "params")
    return model, dsp.PreprocessConfig(**meta["preprocess"])

"""Record conditioning and the spectrogram front-end.

Record order: band-pass, resample, robust scaling with clipping. Each epoch
of each channel then becomes a log-magnitude STFT, and a temporal context of
epochs is standardised per (channel, frequency bin).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .tensor import ContractError

LOG_EPS = 1e-20


@dataclass(frozen=True)
class PreprocessConfig:
    band_low: float = 0.2
    band_high: float = 30.0
    target_fs: float = 60.0
    clip_mult: float = 20.0
    n_fft: int = 128
    n_stride: int = 60
    filter_order: int = 3
    epoch_seconds: float = 30.0

    def __post_init__(self):
        if not 0 < self.band_low < self.band_high < self.target_fs / 2 + 1e-9:
            raise ValueError(
                f"need 0 < band_low < band_high <= target_fs/2, got {self.band_low}, {self.band_high}, {self.target_fs}"
            )
        if not 0 < self.n_stride <= self.n_fft:
            raise ValueError(f"need 0 < n_stride <= n_fft, got {self.n_stride}, {self.n_fft}")

    @property
    def epoch_samples(self) -> int:
        return int(round(self.epoch_seconds * self.target_fs))

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def n_frames(self) -> int:
        return stft_frame_count(self.epoch_samples, self.n_fft, self.n_stride)

    def to_dict(self) -> dict:
        return asdict(self)


def bandpass(x: np.ndarray, fs: float, low: float = 0.2, high: float = 30.0, order: int = 3) -> np.ndarray:
    """Causal Butterworth band-pass (single forward pass, second-order sections)."""
    if fs <= 2 * high:
        raise ContractError(f"sampling rate {fs} Hz too low for a {high} Hz upper band edge")
    sos = sps.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")
    return sps.sosfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


def _rate_ratio(fs_in: float, fs_out: float) -> tuple[int, int]:
    # rates rounded to 3 decimals so non-integer rates give stable factors
    frac = Fraction(round(fs_out * 1000)) / Fraction(round(fs_in * 1000))
    return frac.numerator, frac.denominator


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Rational polyphase resampling; output length is ``round(len * fs_out / fs_in)``."""
    if fs_in <= 0 or fs_out <= 0:
        raise ContractError("sampling rates must be positive")
    x = np.asarray(x, dtype=np.float64)
    up, down = _rate_ratio(fs_in, fs_out)
    if up == down:
        return x.copy()
    y = sps.resample_poly(x, up, down, axis=-1)
    n_out = int(round(x.shape[-1] * fs_out / fs_in))
    if y.shape[-1] >= n_out:
        return y[..., :n_out]
    pad = [(0, 0)] * (y.ndim - 1) + [(0, n_out - y.shape[-1])]
    return np.pad(y, pad)


def robust_scale_channel(x: np.ndarray, clip_mult: float = 20.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    q25, med, q75 = np.percentile(x, [25, 50, 75])
    iqr = q75 - q25
    if iqr < 1e-12:
        return np.zeros_like(x)
    return np.clip((x - med) / iqr, -clip_mult, clip_mult)


def robust_scale(record, clip_mult: float = 20.0):
    """Zero-median, unit-IQR scaling per channel, clipped to ``±clip_mult``.

    Accepts a 2-D array ``(C, n)`` or any object with a ``channels`` list
    whose items carry ``data``; the latter is returned as a modified copy.
    """
    if isinstance(record, np.ndarray):
        return np.stack([robust_scale_channel(ch, clip_mult) for ch in np.atleast_2d(record)])
    return record.map_channels(lambda ch: robust_scale_channel(ch, clip_mult))


def preprocess_signal(x: np.ndarray, fs: float, cfg: PreprocessConfig) -> np.ndarray:
    """Band-pass, resample to the target rate, then scale and clip one channel."""
    y = bandpass(x, fs, cfg.band_low, cfg.band_high, cfg.filter_order)
    y = resample(y, fs, cfg.target_fs)
    return robust_scale_channel(y, cfg.clip_mult)


def stft_frame_count(n_samples: int, n_fft: int, n_stride: int) -> int:
    return (n_samples - n_fft) // n_stride


def stft(epoch: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Log-magnitude STFT of the trailing axis, shaped ``(..., F_fft, L_fft)``.

    Frame ``t`` covers samples ``[t*stride, t*stride + n_fft)`` with a
    periodic Hamming window; the frame count is ``(L - n_fft) // stride``.
    """
    cfg = cfg or PreprocessConfig()
    epoch = np.asarray(epoch, dtype=np.float64)
    n = epoch.shape[-1]
    if n < cfg.n_fft:
        raise ContractError(f"epoch of {n} samples is shorter than n_fft={cfg.n_fft}")
    n_frames = stft_frame_count(n, cfg.n_fft, cfg.n_stride)
    if n_frames < 1:
        raise ContractError(f"epoch of {n} samples yields no complete frame")
    starts = np.arange(n_frames) * cfg.n_stride
    idx = starts[:, None] + np.arange(cfg.n_fft)[None, :]
    frames = epoch[..., idx] * sps.windows.hamming(cfg.n_fft, sym=False)
    mag = np.abs(np.fft.rfft(frames, axis=-1))  # (..., L_fft, F_fft)
    return np.swapaxes(np.log(mag + LOG_EPS), -1, -2)


def normalize_context(specs: np.ndarray) -> np.ndarray:
    """Standardise a context ``(C, F, L_fft, T)`` per (channel, bin).

    Mean and standard deviation are taken over all ``T * L_fft`` frames of
    the context; bins with a standard deviation below 1e-12 become zero.
    """
    specs = np.asarray(specs)
    if specs.ndim != 4 or specs.shape[-1] < 1:
        raise ContractError(f"normalize_context needs (C, F, L_fft, T) with T >= 1, got {specs.shape}")
    return _standardize(specs, axes=(2, 3))


def _standardize(x: np.ndarray, axes) -> np.ndarray:
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    std = np.sqrt((centered * centered).mean(axis=axes, keepdims=True))
    safe = np.where(std < 1e-12, 1.0, std)
    return np.where(std < 1e-12, 0.0, centered / safe).astype(x.dtype)


def normalize_windows(windows: np.ndarray) -> np.ndarray:
    """Standardise batched windows laid out ``(B, T, C, L_fft, F)``.

    Same statistics as :func:`normalize_context`, taken over the epoch and
    frame axes for each (window, channel, bin).
    """
    return _standardize(windows, axes=(1, 3))

"""MFCC front end producing a (channels, coefficients, frames) map per window."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

logger = logging.getLogger(__name__)


class MfccConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MfccConfig:
    """MFCC parameters.

    ``fmax`` is clamped to Nyquist in :meth:`resolved_fmax`, so a request of
    256 Hz at fs=256 behaves like 128 Hz.
    """

    fs: int = 256
    n_banks: int = 13
    n_coeffs: int = 13
    fmin: float = 0.0
    fmax: float = 256.0
    frame_len: int = 160
    hop: int = 12
    fft_size: int = 256
    preemphasis: float = 0.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.fft_size < self.frame_len or self.fft_size & (self.fft_size - 1):
            raise MfccConfigError("fft_size must be a power of two >= frame_len")
        if self.n_coeffs > self.n_banks:
            raise MfccConfigError("n_coeffs cannot exceed n_banks")
        if self.hop <= 0 or self.frame_len <= 0:
            raise MfccConfigError("frame_len and hop must be positive")

    def resolved_fmax(self) -> float:
        return min(self.fmax, self.fs / 2)

    def n_frames(self, length: int) -> int:
        if length < self.frame_len:
            raise ValueError(f"signal length {length} < frame_len {self.frame_len}")
        return (length - self.frame_len) // self.hop + 1


@dataclass
class FeatureMap:
    values: np.ndarray
    window_id: str | None = field(default=None)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=float) / 1127.0)


def frame_signal(x: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Hann-windowed frames of the last axis: (..., n_frames, frame_len)."""
    x = np.asarray(x, dtype=float)
    n = cfg.n_frames(x.shape[-1])
    if cfg.preemphasis:
        x = np.concatenate([x[..., :1], x[..., 1:] - cfg.preemphasis * x[..., :-1]], axis=-1)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len, axis=-1)[..., ::cfg.hop, :][..., :n, :]
    return frames * get_window("hann", cfg.frame_len, fftbins=True)


def mel_filterbank(cfg: MfccConfig = MfccConfig(), fs: int | None = None) -> np.ndarray:
    """Triangular filters (n_banks, fft_size // 2 + 1) equally spaced in mel."""
    fs = cfg.fs if fs is None else fs
    fmax = min(cfg.fmax, fs / 2)
    if not 0 <= cfg.fmin < fmax:
        raise MfccConfigError(f"need 0 <= fmin < fmax, got {cfg.fmin}, {fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_banks + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * fs / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mfcc(x: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """MFCCs of the last axis of ``x``: (..., n_coeffs, n_frames)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite samples")
    frames = frame_signal(x, cfg)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=-1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    logs = np.log(energies + cfg.log_floor)
    coeffs = dct(logs, type=2, norm="ortho", axis=-1)[..., : cfg.n_coeffs]
    return np.swapaxes(coeffs, -1, -2)


def mfcc_map(window: np.ndarray, cfg: MfccConfig = MfccConfig(), window_id: str | None = None) -> FeatureMap:
    window = np.asarray(window)
    if window.ndim != 2:
        raise ValueError(f"expected (channels, samples), got shape {window.shape}")
    return FeatureMap(mfcc(window, cfg), window_id)


def featurize(dataset, cfg: MfccConfig = MfccConfig(), batch: int = 256, dtype=np.float32):
    """Attach MFCC features to ``dataset`` in place and return it."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    first = mfcc(dataset.windows[0].samples, cfg)
    out = np.empty((n,) + first.shape, dtype=dtype)
    for i in range(0, n, batch):
        chunk = np.stack([w.samples for w in dataset.windows[i:i + batch]])
        out[i:i + len(chunk)] = mfcc(chunk, cfg)
    dataset.features = out
    return dataset


def save_feature_cache(dataset, path) -> Path:
    """Store features as one npz entry per window id."""
    if dataset.features is None:
        raise ValueError("dataset has no features")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{w.window_id: f for w, f in zip(dataset.windows, dataset.features)})
    return path


def load_feature_cache(dataset, path):
    """Fill ``dataset.features`` from a cache; raises KeyError on a missing id."""
    with np.load(path) as cache:
        dataset.features = np.stack([cache[w.window_id] for w in dataset.windows])
    return dataset


def export_map_csv(fmap: FeatureMap | np.ndarray, path) -> Path:
    """Rows of (channel, coefficient, frame, value)."""
    values = fmap.values if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "coefficient", "frame", "value"])
        for (c, k, t), v in np.ndenumerate(values):
            w.writerow([c, k, t, repr(float(v))])
    return path

"""Channel attribution, prediction smoothing and the KL biomarker map."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


def _as_fn(model):
    """Wrap a model (``predict_proba``) or a plain callable as batch -> scores."""
    fn = model.predict_proba if hasattr(model, "predict_proba") else model

    def call(batch):
        out = np.asarray(fn(batch), dtype=np.float64).reshape(len(batch))
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("model produced non-finite output under masking")
        return out
    return call


def channel_shapley(model, instance, baseline, n_samples: int = 1000, seed: int = 0,
                    absolute: bool = True, batch_size: int = 256) -> np.ndarray:
    """Monte Carlo permutation estimate of per-channel Shapley values.

    Channels (axis 0 of ``instance``) are the players; an absent channel is
    replaced by the corresponding channel of ``baseline``.  Each permutation
    adds channels one at a time and credits each with the change in the
    model output, so the signed estimates always sum to
    f(instance) - f(baseline).

    Args:
        model: object with ``predict_proba`` or callable on a batch of maps.
        instance: (C, ...) feature map.
        baseline: array broadcastable to ``instance``.
        n_samples: number of permutations; at least C.
        seed: seed for the permutation stream.
        absolute: return |phi| (default) rather than signed values.
        batch_size: upper bound on masked maps per model call.

    Returns:
        (C,) array of contributions.
    """
    f = _as_fn(model)
    x = np.asarray(instance)
    base = np.broadcast_to(np.asarray(baseline, dtype=x.dtype), x.shape)
    c = x.shape[0]
    if n_samples < c:
        raise ValueError(f"n_samples ({n_samples}) must be >= number of channels ({c})")
    rng = np.random.default_rng(seed)
    f_base = f(base[None])[0]
    phi = np.zeros(c)
    done = 0
    while done < n_samples:
        k = min(max(1, batch_size // c), n_samples - done)
        perms = np.stack([rng.permutation(c) for _ in range(k)])
        # step j of permutation i has channels perms[i, :j+1] switched on
        on = np.zeros((k, c, c), dtype=bool)
        ranks = np.argsort(perms, axis=1)
        on[:] = ranks[:, None, :] <= np.arange(c)[None, :, None]
        batch = np.where(on.reshape(k * c, c, *([1] * (x.ndim - 1))), x, base)
        vals = f(batch).reshape(k, c)
        prev = np.concatenate([np.full((k, 1), f_base), vals[:, :-1]], axis=1)
        np.add.at(phi, perms.ravel(), (vals - prev).ravel())
        done += k
    phi /= n_samples
    return np.abs(phi) if absolute else phi


def exact_channel_shapley(model, instance, baseline) -> np.ndarray:
    """Signed Shapley values by enumerating all 2^C coalitions (small C only)."""
    f = _as_fn(model)
    x = np.asarray(instance)
    base = np.broadcast_to(np.asarray(baseline, dtype=x.dtype), x.shape)
    c = x.shape[0]
    if c > 16:
        raise ValueError("exact enumeration is limited to 16 channels")
    masks = np.array(list(itertools.product([False, True], repeat=c)))
    vals = f(np.where(masks.reshape(len(masks), c, *([1] * (x.ndim - 1))), x, base))
    value = {tuple(m): v for m, v in zip(masks, vals)}
    phi = np.zeros(c)
    for m, v in value.items():
        s = sum(m)
        for j in range(c):
            if not m[j]:
                continue
            without = list(m)
            without[j] = False
            w = math.factorial(s - 1) * math.factorial(c - s) / math.factorial(c)
            phi[j] += w * (v - value[tuple(without)])
    return phi


def aggregate_elementwise(shap_map) -> np.ndarray:
    """Per-channel sum of absolute element attributions."""
    m = np.asarray(shap_map, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("attribution map contains non-finite values")
    return np.abs(m).reshape(m.shape[0], -1).sum(axis=1)


def mean_baseline(features) -> np.ndarray:
    return np.asarray(features, dtype=np.float64).mean(axis=0)


def zero_baseline(features) -> np.ndarray:
    return np.zeros(np.asarray(features).shape[1:])


BASELINES = {"mean": mean_baseline, "zero": zero_baseline}


@dataclass
class AttributionMap:
    values: np.ndarray
    window_ids: list[str]
    starts: list[float]
    n_samples: int
    seed: int
    baseline: str


def attribute_windows(model, features, baseline, n_samples: int = 1000, seed: int = 0,
                      window_ids=None, starts=None, baseline_id: str = "mean") -> AttributionMap:
    """Absolute channel Shapley values for each window: (C, N)."""
    features = np.asarray(features)
    n = len(features)
    cols = [channel_shapley(model, features[i], baseline, n_samples, seed=int(seed) + i)
            for i in range(n)]
    values = np.stack(cols, axis=1) if cols else np.zeros((features.shape[1], 0))
    ids = list(window_ids) if window_ids is not None else [str(i) for i in range(n)]
    st = list(starts) if starts is not None else [float(i) for i in range(n)]
    return AttributionMap(values, ids, st, n_samples, seed, baseline_id)


@dataclass
class PredictionTrace:
    raw: np.ndarray
    smoothed: np.ndarray
    final: np.ndarray
    threshold: float
    window_len: int


def hann_kernel(window_len: int) -> np.ndarray:
    w = np.hanning(window_len) if window_len > 1 else np.ones(1)
    return w / w.sum()


def smooth_and_threshold(raw, window_len: int = 21, threshold: float = 0.5) -> PredictionTrace:
    """Hann-smooth a probability sequence and threshold it.

    Near the ends only the overlapping part of the kernel is used, rescaled
    to unit sum, so constant sequences pass through unchanged.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.size
    if window_len < 1 or window_len % 2 == 0:
        raise ValueError("window_len must be odd and >= 1")
    if window_len > 2 * n + 1:
        raise ValueError(f"window_len {window_len} exceeds 2 * {n} + 1")
    w = hann_kernel(window_len)
    h = (window_len - 1) // 2
    num = np.convolve(raw, w, mode="full")[h:h + n]
    den = np.convolve(np.ones(n), w, mode="full")[h:h + n]
    smoothed = num / den
    return PredictionTrace(raw, smoothed, (smoothed >= threshold).astype(int), threshold, window_len)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; terms with p = 0 contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


@dataclass
class KlMap:
    values: np.ndarray
    bins: int
    alpha: float
    ranges: np.ndarray = field(repr=False)


def channel_histograms(features, bins: int = 32, alpha: float = 1e-6):
    """Smoothed per-(window, channel) histograms over a per-channel global range.

    Returns (probs (N, C, bins), ranges (C, 2)).
    """
    x = np.asarray(features, dtype=np.float64)
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    lo = flat.min(axis=(0, 2))
    hi = flat.max(axis=(0, 2))
    span = np.where(hi > lo, hi - lo, 1.0)
    idx = np.floor((flat - lo[None, :, None]) / span[None, :, None] * bins).astype(int)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.zeros((n, c, bins))
    for t in range(n):
        for ch in range(c):
            counts[t, ch] = np.bincount(idx[t, ch], minlength=bins)
    counts += alpha
    return counts / counts.sum(axis=2, keepdims=True), np.stack([lo, hi], axis=1)


def kl_map(features, bins: int = 32, alpha: float = 1e-6) -> KlMap:
    """KL(P_t || P_{t+1}) per channel between consecutive windows: (C, N-1)."""
    x = np.asarray([getattr(f, "values", f) for f in features], dtype=np.float64)
    if len(x) < 2:
        raise ValueError("kl_map needs at least two windows")
    probs, ranges = channel_histograms(x, bins, alpha)
    p, q = probs[:-1], probs[1:]
    values = np.sum(p * np.log(p / q), axis=2).T
    values[ranges[:, 0] == ranges[:, 1]] = 0.0
    return KlMap(np.maximum(values, 0.0), bins, alpha, ranges)


def _write(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _channel_rows(values, labels):
    labels = labels if labels is not None else [str(i) for i in range(values.shape[0])]
    return [[labels[i]] + [repr(float(v)) for v in row] for i, row in enumerate(values)]


def export_attribution_csv(amap: AttributionMap, path, channel_labels=None) -> Path:
    header = ["channel"] + [f"t={s:g}" for s in amap.starts]
    return _write(path, header, _channel_rows(amap.values, channel_labels))


def export_kl_csv(kmap: KlMap, starts, path, channel_labels=None) -> Path:
    """Column t holds KL between the windows starting at starts[t] and starts[t+1]."""
    header = ["channel"] + [f"t={s:g}" for s in list(starts)[:-1]]
    return _write(path, header, _channel_rows(kmap.values, channel_labels))


def export_trace_csv(trace: PredictionTrace, starts, path) -> Path:
    rows = [[f"{s:g}", repr(float(r)), repr(float(m)), int(f)]
            for s, r, m, f in zip(starts, trace.raw, trace.smoothed, trace.final)]
    return _write(path, ["window_start", "raw", "smoothed", "final"], rows)

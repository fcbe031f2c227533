from __future__ import annotations

import math

import numpy as np
import pytest
from helpers import synth_dataset
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seizurecast.mfcc import (
    FeatureMap,
    MfccConfig,
    MfccConfigError,
    export_map_csv,
    featurize,
    frame_signal,
    hz_to_mel,
    load_feature_cache,
    mel_filterbank,
    mfcc,
    mfcc_map,
    save_feature_cache,
)

CFG = MfccConfig()


def reference_mfcc(x, fs=256, frame_len=160, hop=12, nfft=256, n_banks=13, n_coeffs=13, fmax=128.0, eps=1e-10):
    """Slow textbook MFCC of one channel, written from the definitions."""
    n_frames = (len(x) - frame_len) // hop + 1
    window = [0.5 - 0.5 * math.cos(2 * math.pi * n / frame_len) for n in range(frame_len)]
    n_bins = nfft // 2 + 1
    k = np.arange(n_bins)[:, None]
    n = np.arange(frame_len)[None, :]
    cos_t = np.cos(2 * np.pi * k * n / nfft)
    sin_t = np.sin(2 * np.pi * k * n / nfft)

    def mel(f):
        return 1127.0 * math.log(1.0 + f / 700.0)

    def inv(m):
        return 700.0 * (math.exp(m / 1127.0) - 1.0)

    top = mel(fmax)
    edges = [inv(top * i / (n_banks + 1)) for i in range(n_banks + 2)]
    bank = np.zeros((n_banks, n_bins))
    for b in range(n_banks):
        lo, c, hi = edges[b], edges[b + 1], edges[b + 2]
        for j in range(n_bins):
            f = j * fs / nfft
            if lo < f <= c:
                bank[b, j] = (f - lo) / (c - lo)
            elif c < f < hi:
                bank[b, j] = (hi - f) / (hi - c)
    out = np.zeros((n_coeffs, n_frames))
    for t in range(n_frames):
        seg = np.array([x[t * hop + i] * window[i] for i in range(frame_len)])
        re = cos_t @ seg
        im = sin_t @ seg
        power = re * re + im * im
        logs = [math.log(float(bank[b] @ power) + eps) for b in range(n_banks)]
        for q in range(n_coeffs):
            scale = math.sqrt(1.0 / n_banks) if q == 0 else math.sqrt(2.0 / n_banks)
            out[q, t] = scale * sum(logs[m] * math.cos(math.pi * q * (2 * m + 1) / (2 * n_banks))
                                    for m in range(n_banks))
    return out


class TestFrames:
    def test_paper_geometry(self):
        assert CFG.n_frames(2560) == (2560 - 160) // 12 + 1 == 201
        assert frame_signal(np.zeros(2560)).shape == (201, 160)

    def test_single_frame(self):
        assert frame_signal(np.zeros(160)).shape == (1, 160)

    def test_constant_signal_gives_window(self):
        frames = frame_signal(np.ones(400))
        hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(160) / 160)
        assert np.allclose(frames, hann[None, :], atol=1e-15)

    def test_frame_content(self):
        x = np.arange(400.0)
        frames = frame_signal(x)
        hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(160) / 160)
        assert np.allclose(frames[3], x[36:196] * hann)

    def test_too_short(self):
        with pytest.raises(ValueError):
            frame_signal(np.zeros(159))


class TestFilterbank:
    def test_mel_scale(self):
        assert hz_to_mel(0) == 0.0
        assert hz_to_mel(700) == pytest.approx(1127 * math.log(2))
        assert hz_to_mel(700) == pytest.approx(781.17, abs=0.01)

    def test_triangles(self):
        fb = mel_filterbank(CFG)
        assert fb.shape == (13, 129)
        assert np.all(fb >= 0)
        for row in fb:
            nz = np.flatnonzero(row)
            peak = int(np.argmax(row))
            assert 0 < peak < 128 and row[0] == 0 and row[-1] == 0
            # strictly rising to the peak, strictly falling after it, within the support
            assert np.all(np.diff(row[nz[0]:peak + 1]) > 0)
            assert np.all(np.diff(row[peak:nz[-1] + 1]) < 0)

    def test_fmax_clamped_to_nyquist(self):
        assert np.array_equal(mel_filterbank(MfccConfig(fmax=256.0)), mel_filterbank(MfccConfig(fmax=128.0)))
        assert MfccConfig(fmax=256).resolved_fmax() == 128

    def test_bad_range(self):
        with pytest.raises(MfccConfigError):
            mel_filterbank(MfccConfig(fmin=200.0))

    def test_bad_config(self):
        with pytest.raises(MfccConfigError):
            MfccConfig(fft_size=100)
        with pytest.raises(MfccConfigError):
            MfccConfig(n_coeffs=20)


class TestMfcc:
    def test_reference_agreement(self):
        rng = np.random.default_rng(42)
        for scale in (1.0, 30.0):
            x = scale * rng.standard_normal((3, 2560))
            fast = mfcc(x)
            for c in range(3):
                ref = reference_mfcc(x[c])
                rel = np.max(np.abs(fast[c] - ref)) / np.max(np.abs(ref))
                assert rel < 1e-9

    def test_shape(self):
        fmap = mfcc_map(np.random.default_rng(0).normal(size=(23, 2560)), window_id="w")
        assert isinstance(fmap, FeatureMap) and fmap.values.shape == (23, 13, 201)

    def test_silence(self):
        out = mfcc(np.zeros((23, 2560)))
        expected = np.zeros(13)
        expected[0] = math.sqrt(13) * math.log(1e-10)
        assert np.allclose(out, expected[None, :, None], rtol=0, atol=1e-9)

    @staticmethod
    def _sine(hz=8.0):
        return np.sin(2 * np.pi * hz * np.arange(2560) / 256)

    def test_sine_8hz_energy(self):
        frames = frame_signal(self._sine())
        energies = (np.abs(np.fft.rfft(frames, 256)) ** 2) @ mel_filterbank().T
        assert np.all(np.argmax(energies, axis=1) == 0)
        assert np.all(energies[:, :2].sum(axis=1) > 0.9999 * energies.sum(axis=1))
        # the banks carrying the tone are constant over time
        dominant = energies[1:, :2]
        assert np.all(np.abs(dominant - dominant[0]) <= 0.01 * dominant[0])

    def test_sine_8hz_matches_reference(self):
        x = self._sine()
        ref = reference_mfcc(x)
        assert np.max(np.abs(mfcc(x) - ref)) / np.max(np.abs(ref)) < 1e-9

    @pytest.mark.xfail(strict=True, reason=(
        "leakage energy in the upper banks (1e-3..1e-9 of the total) varies with the "
        "sine phase at each hop; the log turns this into >1% swings of every coefficient. "
        "The independent reference shows the same behaviour."))
    def test_sine_8hz_coefficients_constant(self):
        c = mfcc(self._sine())
        spread = np.max(np.abs(c[:, 1:] - c[:, 1:2]), axis=1)
        assert np.all(spread <= 0.01 * np.max(np.abs(c[:, 1:]), axis=1))

    def test_amplitude_covariance(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 2560))
        for alpha in (0.5, 3.0, 40.0):
            diff = mfcc(alpha * x) - mfcc(x)
            assert np.allclose(diff[:, 0], 2 * math.log(alpha) * math.sqrt(13), atol=1e-6)
            assert np.max(np.abs(diff[:, 1:])) < 1e-6

    def test_non_finite(self):
        x = np.zeros((23, 2560))
        x[3, 100] = np.nan
        with pytest.raises(ValueError):
            mfcc_map(x)

    @settings(max_examples=15, deadline=None)
    @given(arrays(np.float64, (23, 2560), elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_shape_property(self, x):
        out = mfcc_map(x).values
        assert out.shape == (23, 13, 201) and np.all(np.isfinite(out))


def test_featurize_and_cache(tmp_path):
    ds = featurize(synth_dataset(patients=(1, 2), per_class=2), dtype=np.float64)
    assert ds.features.shape == (8, 23, 13, 201)
    assert np.array_equal(ds.features[3], mfcc(ds.windows[3].samples))
    saved = ds.features.copy()
    save_feature_cache(ds, tmp_path / "f.npz")
    ds.features = None
    load_feature_cache(ds, tmp_path / "f.npz")
    assert np.array_equal(ds.features, saved)
    path = export_map_csv(FeatureMap(saved[0]), tmp_path / "map.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "channel,coefficient,frame,value" and len(lines) == 1 + 23 * 13 * 201

"""Test-side writers and synthetic data generators.

The EDF and summary writers are deliberately independent of the package's
readers so round trips exercise both directions.

Synthetic pseudo-patients
-------------------------
``synth_window`` draws one 23-channel, 10 s window at 256 Hz:

* background: white noise with a per-patient gain, plus a per-patient
  "rhythm" sinusoid (6 + 5 * patient Hz) and a per-patient, per-channel DC
  offset;
* class content: pre-ictal windows add a tone at ``preictal_hz`` (default
  24 Hz, optionally shifted per patient) with amplitude 1.5; interictal
  windows add a weaker 3 Hz tone.

Each channel gets a random phase, so the class signal lives in the spectrum
rather than in the raw waveform.
"""

from __future__ import annotations

import json
from datetime import datetime
from pathlib import Path

import numpy as np

FS = 256
WINDOW_S = 10
LABELS_23 = [
    "FP1-F7", "F7-T7", "T7-P7", "P7-O1", "FP1-F3", "F3-C3", "C3-P3", "P3-O1",
    "FP2-F4", "F4-C4", "C4-P4", "P4-O2", "FP2-F8", "F8-T8", "T8-P8", "P8-O2",
    "FZ-CZ", "CZ-PZ", "P7-T7", "T7-FT9", "FT9-FT10", "FT10-T8", "T8-P8-1",
]


def _field(value, width: int) -> bytes:
    text = str(value)
    if len(text) > width:
        raise ValueError(f"{text!r} does not fit in {width} bytes")
    return text.ljust(width).encode("ascii")


def edf_bytes(signals, *, n_records, record_duration=1.0, patient="X", recording="Y",
              start=datetime(2001, 2, 3, 4, 5, 6), reserved=""):
    """Serialize an EDF file.

    ``signals`` is a list of dicts with keys label, physical_min,
    physical_max, digital_min, digital_max, samples_per_record, codes (int
    array of length n_records * samples_per_record) and optional
    transducer/physical_dimension/prefiltering.
    """
    ns = len(signals)
    head = b"".join([
        _field("0", 8), _field(patient, 80), _field(recording, 80),
        _field(start.strftime("%d.%m.%y"), 8), _field(start.strftime("%H.%M.%S"), 8),
        _field(256 * (ns + 1), 8), _field(reserved, 44), _field(n_records, 8),
        _field(record_duration if record_duration != int(record_duration) else int(record_duration), 8),
        _field(ns, 4),
    ])
    cols = [
        ("label", 16), ("transducer", 80), ("physical_dimension", 8), ("physical_min", 8),
        ("physical_max", 8), ("digital_min", 8), ("digital_max", 8), ("prefiltering", 80),
        ("samples_per_record", 8), ("reserved", 32),
    ]
    for key, width in cols:
        head += b"".join(_field(s.get(key, ""), width) for s in signals)
    body = bytearray()
    for r in range(n_records):
        for s in signals:
            spr = s["samples_per_record"]
            body += np.asarray(s["codes"][r * spr:(r + 1) * spr], dtype="<i2").tobytes()
    return head + bytes(body)


def affine_decode(codes, s):
    return s["physical_min"] + (np.asarray(codes, dtype=np.int64) - s["digital_min"]) * (
        (s["physical_max"] - s["physical_min"]) / (s["digital_max"] - s["digital_min"]))


def random_signals(rng, n_records):
    ns = int(rng.integers(1, 6))
    out = []
    for i in range(ns):
        dmin = int(rng.integers(-32768, 0))
        dmax = int(rng.integers(dmin + 1, 32768))
        pmin = round(float(rng.uniform(-5000, 0)), 2)
        pmax = round(float(rng.uniform(0.01, 5000)), 2)
        if rng.random() < 0.3:
            pmin, pmax = pmax, pmin  # inverted polarity is legal
        spr = int(rng.integers(1, 40))
        out.append(dict(
            label=f"S{i}-{rng.integers(100)}", physical_min=pmin, physical_max=pmax,
            digital_min=dmin, digital_max=dmax, samples_per_record=spr,
            codes=rng.integers(dmin, dmax + 1, size=n_records * spr),
            transducer="AgAgCl electrode", physical_dimension="uV", prefiltering="HP:0.1Hz"))
    return out


def write_recording_edf(path, data, fs=FS, labels=LABELS_23, start=datetime(2001, 2, 3, 4, 5, 6),
                        phys=(-800.0, 800.0)):
    """Quantize a (C, L) float array into a 1 s-record EDF file."""
    c, n = data.shape
    if n % fs:
        raise ValueError("length must be a whole number of seconds")
    dmin, dmax = -32768, 32767
    scale = (dmax - dmin) / (phys[1] - phys[0])
    codes = np.clip(np.round((data - phys[0]) * scale + dmin), dmin, dmax).astype(np.int64)
    signals = [dict(label=labels[i], physical_min=phys[0], physical_max=phys[1], digital_min=dmin,
                    digital_max=dmax, samples_per_record=fs, codes=codes[i], physical_dimension="uV")
               for i in range(c)]
    Path(path).write_bytes(edf_bytes(signals, n_records=n // fs, start=start))


def summary_text(files):
    """``files``: list of (file_name, [(start, end), ...])."""
    parts = []
    for name, seizures in files:
        lines = [f"File Name: {name}", "File Start Time: 00:00:00", "File End Time: 01:00:00",
                 f"Number of Seizures in File: {len(seizures)}"]
        for s, e in seizures:
            lines.append(f"Seizure Start Time: {s:g} seconds")
            lines.append(f"Seizure End Time: {e:g} seconds")
        parts.append("\n".join(lines))
    return "Data Sampling Rate: 256 Hz\n*************************\n\n" + "\n\n".join(parts) + "\n"


def synth_window(patient: int, label: int, rng, preictal_hz: float = 24.0, fs: int = FS,
                 seconds: int = WINDOW_S) -> np.ndarray:
    t = np.arange(fs * seconds) / fs
    prng = np.random.default_rng(1000 + patient)
    gain = 0.5 + 0.5 * patient
    offsets = prng.normal(0.0, 2.0, size=(23, 1))
    rhythm = 6.0 + 5.0 * patient
    phase = rng.uniform(0, 2 * np.pi, size=(23, 3))
    x = gain * rng.standard_normal((23, t.size)) + offsets
    x += 1.2 * np.sin(2 * np.pi * rhythm * t + phase[:, :1])
    if label == 1:
        x += 1.5 * np.sin(2 * np.pi * preictal_hz * t + phase[:, 1:2])
    else:
        x += 0.8 * np.sin(2 * np.pi * 3.0 * t + phase[:, 2:3])
    return x


def synth_dataset(patients=(1, 2, 3), per_class=24, seed=0, preictal_hz=None):
    """Balanced LabeledWindow dataset of pseudo-patients (raw samples)."""
    from seizurecast.dataset import Dataset, LabeledWindow

    rng = np.random.default_rng(seed)
    windows = []
    for p in patients:
        hz = 24.0 if preictal_hz is None else preictal_hz.get(p, 24.0)
        for label in (1, 0):
            for k in range(per_class):
                windows.append(LabeledWindow(
                    subject_id=p, label=label, file_name=f"synth{p:02d}.edf",
                    start=float(k * WINDOW_S + (0 if label else 100_000)),
                    samples=synth_window(p, label, rng, preictal_hz=hz)))
    return Dataset(windows)


def feature_dataset(patients=(1, 2), per_class=8, seed=0, shift=1.0, shape=(23, 13, 201)):
    """Dataset with random feature maps; pre-ictal maps get ``shift`` added to a block."""
    from seizurecast.dataset import Dataset, LabeledWindow

    rng = np.random.default_rng(seed)
    windows, feats = [], []
    for p in patients:
        for label in (1, 0):
            for k in range(per_class):
                windows.append(LabeledWindow(p, label, f"f{p:02d}.edf", float(k * 10 + 1000 * label)))
                x = rng.standard_normal(shape) + 0.3 * p
                if label:
                    x[:6, :4] += shift
                feats.append(x)
    return Dataset(windows, np.asarray(feats, dtype=np.float32))


def _corpus_signal(rng, seconds, onset=None):
    t = np.arange(seconds * FS) / FS
    x = 30 * rng.standard_normal((23, t.size)) + 20 * np.sin(2 * np.pi * 9 * t)
    if onset is not None:
        pre = (t >= onset - 60) & (t < onset)
        x[:, pre] += 60 * np.sin(2 * np.pi * 20 * t[pre])
    return x


def write_corpus(root, subjects=(1, 2, 3), seed=0):
    """Tiny EDF corpus: one 400 s recording per subject with a seizure at 300-320 s.

    Also writes ``short.edf`` (40 s, no seizure), ``manifest.json`` and a
    ``config.json`` that shrinks the label policy (60 s horizon, 120 s
    exclusion) and training (1 epoch, batch 8, 2 folds).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    recs = []
    for subject in subjects:
        name = f"chb{subject:02d}_01.edf"
        summary = f"chb{subject:02d}-summary.txt"
        write_recording_edf(root / name, _corpus_signal(rng, 400, 300))
        (root / summary).write_text(summary_text([(name, [(300, 320)])]))
        recs.append({"edf_path": name, "subject_id": subject, "summary_path": summary})
    (root / "manifest.json").write_text(json.dumps({"channel_labels": LABELS_23, "recordings": recs}))
    write_recording_edf(root / "short.edf", _corpus_signal(rng, 40))
    (root / "config.json").write_text(json.dumps({
        "policy": {"preictal_horizon": 60.0, "interictal_exclusion": 120.0},
        "train": {"epochs": 1, "batch": 8}, "n_values": [2, "all"], "k": 2}))
    return root

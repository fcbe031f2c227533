"""EDF recordings, CHB-MIT summary files and 23-channel harmonization.

Only plain EDF is supported: no EDF+ annotation signals and no discontinuous
records.
"""

from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

N_CHANNELS = 23
MAIN_HEADER_BYTES = 256
SIGNAL_HEADER_BYTES = 256

# (field, width) in on-disk order for the per-signal header block
SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


class EdfFormatError(ValueError):
    """Malformed or unsupported EDF content."""


class EdfClampWarning(UserWarning):
    """Digital codes outside [digital_min, digital_max] were clamped."""


class SummaryFormatError(ValueError):
    """Inconsistent seizure summary text."""


@dataclass(frozen=True)
class SignalHeader:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    transducer: str = ""
    physical_dimension: str = ""
    prefiltering: str = ""
    reserved: str = ""

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)


@dataclass(frozen=True)
class RecordingHeader:
    version: str
    patient_id: str
    recording_id: str
    start_datetime: datetime
    header_bytes: int
    reserved: str
    n_records: int
    record_duration: float
    signals: tuple[SignalHeader, ...]

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.signals]

    @property
    def duration(self) -> float:
        return self.n_records * self.record_duration

    def sampling_rate(self, signal_index: int) -> float:
        return self.signals[signal_index].samples_per_record / self.record_duration


@dataclass(frozen=True)
class SeizureAnnotations:
    file_name: str
    seizure_intervals: tuple[tuple[float, float], ...] = ()

    @property
    def onsets(self) -> list[float]:
        return [s for s, _ in self.seizure_intervals]


@dataclass
class EegRecording:
    """A harmonized 23-channel recording in physical units."""

    subject_id: int
    channels: np.ndarray
    fs: float
    annotations: SeizureAnnotations
    start_datetime: datetime | None = None
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.channels.ndim != 2 or self.channels.shape[0] != N_CHANNELS:
            raise ValueError(f"expected {N_CHANNELS} channels, got shape {self.channels.shape}")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError("recording contains non-finite samples")

    @property
    def file_name(self) -> str:
        return self.annotations.file_name

    @property
    def duration(self) -> float:
        return self.channels.shape[1] / self.fs


def _ascii(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip()


def _number(raw: bytes, name: str, kind=float):
    text = _ascii(raw)
    try:
        return kind(text)
    except ValueError:
        raise EdfFormatError(f"field {name!r} is not numeric: {text!r}") from None


def _parse_start(date: str, time: str) -> datetime:
    try:
        day, month, yy = (int(v) for v in date.split("."))
        hh, mm, ss = (int(v) for v in time.split("."))
    except ValueError:
        raise EdfFormatError(f"bad start date/time {date!r} {time!r}") from None
    # EDF clipping convention: years 85-99 -> 1900s, else 2000s
    year = 1900 + yy if yy >= 85 else 2000 + yy
    return datetime(year, month, day, hh, mm, ss)


def parse_edf_header(data: bytes) -> RecordingHeader:
    """Decode the 256-byte main header and the per-signal header blocks."""
    if len(data) < MAIN_HEADER_BYTES:
        raise EdfFormatError(f"header truncated: {len(data)} < {MAIN_HEADER_BYTES} bytes")
    ns = _number(data[252:256], "n_signals", int)
    if ns <= 0:
        raise EdfFormatError(f"n_signals must be positive, got {ns}")
    n_records = _number(data[236:244], "n_records", int)
    if n_records < 0:
        raise EdfFormatError("unknown record count (-1) is unsupported")
    record_duration = _number(data[244:252], "record_duration")
    if record_duration <= 0:
        raise EdfFormatError(f"record duration must be positive, got {record_duration}")
    total = MAIN_HEADER_BYTES + SIGNAL_HEADER_BYTES * ns
    if len(data) < total:
        raise EdfFormatError(f"signal headers truncated: need {total} bytes, have {len(data)}")

    columns: dict[str, list[bytes]] = {}
    offset = MAIN_HEADER_BYTES
    for name, width in SIGNAL_FIELDS:
        columns[name] = [data[offset + i * width: offset + (i + 1) * width] for i in range(ns)]
        offset += width * ns

    signals = []
    for i in range(ns):
        sig = SignalHeader(
            label=_ascii(columns["label"][i]),
            transducer=_ascii(columns["transducer"][i]),
            physical_dimension=_ascii(columns["physical_dimension"][i]),
            physical_min=_number(columns["physical_min"][i], "physical_min"),
            physical_max=_number(columns["physical_max"][i], "physical_max"),
            digital_min=_number(columns["digital_min"][i], "digital_min", int),
            digital_max=_number(columns["digital_max"][i], "digital_max", int),
            prefiltering=_ascii(columns["prefiltering"][i]),
            samples_per_record=_number(columns["samples_per_record"][i], "samples_per_record", int),
            reserved=_ascii(columns["reserved"][i]),
        )
        if sig.digital_min >= sig.digital_max:
            raise EdfFormatError(f"signal {i}: digital_min >= digital_max")
        if sig.physical_min == sig.physical_max:
            raise EdfFormatError(f"signal {i}: physical_min == physical_max")
        if sig.samples_per_record <= 0:
            raise EdfFormatError(f"signal {i}: samples_per_record must be positive")
        signals.append(sig)

    return RecordingHeader(
        version=_ascii(data[0:8]),
        patient_id=_ascii(data[8:88]),
        recording_id=_ascii(data[88:168]),
        start_datetime=_parse_start(_ascii(data[168:176]), _ascii(data[176:184])),
        header_bytes=_number(data[184:192], "header_bytes", int),
        reserved=_ascii(data[192:236]),
        n_records=n_records,
        record_duration=record_duration,
        signals=tuple(signals),
    )


def decode_samples(header: RecordingHeader, payload: bytes, signal_index: int) -> np.ndarray:
    """Decode one signal's 16-bit little-endian codes into physical units.

    Codes outside [digital_min, digital_max] are clamped and reported through
    an :class:`EdfClampWarning`.
    """
    spr = [s.samples_per_record for s in header.signals]
    expected = header.n_records * sum(spr) * 2
    if len(payload) != expected:
        raise EdfFormatError(f"payload has {len(payload)} bytes, expected {expected}")
    if not 0 <= signal_index < header.n_signals:
        raise IndexError(f"signal index {signal_index} out of range")
    records = np.frombuffer(payload, dtype="<i2").reshape(header.n_records, sum(spr))
    start = sum(spr[:signal_index])
    digital = records[:, start:start + spr[signal_index]].reshape(-1).astype(np.int64)

    sig = header.signals[signal_index]
    outside = int(np.count_nonzero((digital < sig.digital_min) | (digital > sig.digital_max)))
    if outside:
        msg = f"signal {signal_index} ({sig.label}): {outside} codes clamped to digital range"
        logger.warning(msg)
        warnings.warn(msg, EdfClampWarning, stacklevel=2)
        digital = np.clip(digital, sig.digital_min, sig.digital_max)
    return sig.physical_min + (digital - sig.digital_min) * (
        (sig.physical_max - sig.physical_min) / (sig.digital_max - sig.digital_min))


def read_edf(path) -> tuple[RecordingHeader, bytes]:
    """Read a file into its header and raw data-record payload."""
    data = Path(path).read_bytes()
    header = parse_edf_header(data)
    body = MAIN_HEADER_BYTES + SIGNAL_HEADER_BYTES * header.n_signals
    return header, data[body:]


_FILE_RE = re.compile(r"File Name:\s*(\S+)")
_COUNT_RE = re.compile(r"Number of Seizures in File:\s*(\d+)")
_START_RE = re.compile(r"Seizure(?:\s+\d+)?\s+Start Time:\s*([\d.]+)\s*seconds")
_END_RE = re.compile(r"Seizure(?:\s+\d+)?\s+End Time:\s*([\d.]+)\s*seconds")


def parse_summary(text: str) -> list[SeizureAnnotations]:
    """Parse a CHB-MIT ``chbXX-summary.txt`` into per-file seizure intervals.

    Both ``Seizure Start Time:`` and the numbered ``Seizure 1 Start Time:``
    spellings are accepted.
    """
    matches = list(_FILE_RE.finditer(text))
    out = []
    for k, m in enumerate(matches):
        block = text[m.end(): matches[k + 1].start() if k + 1 < len(matches) else len(text)]
        count = _COUNT_RE.search(block)
        if count is None:
            raise SummaryFormatError(f"{m.group(1)}: missing 'Number of Seizures in File'")
        starts = [float(v) for v in _START_RE.findall(block)]
        ends = [float(v) for v in _END_RE.findall(block)]
        n = int(count.group(1))
        if len(starts) != n or len(ends) != n:
            raise SummaryFormatError(
                f"{m.group(1)}: declares {n} seizures but lists {len(starts)} starts / {len(ends)} ends")
        intervals = tuple(zip(starts, ends))
        for s, e in intervals:
            if e <= s:
                raise SummaryFormatError(f"{m.group(1)}: seizure end {e} <= start {s}")
        ordered = sorted(intervals)
        for (_, e0), (s1, _) in zip(ordered, ordered[1:]):
            if s1 < e0:
                raise SummaryFormatError(f"{m.group(1)}: overlapping seizures")
        out.append(SeizureAnnotations(m.group(1), intervals))
    return out


def harmonize_channels(channels: np.ndarray) -> np.ndarray:
    """Return a 23-channel matrix; 22-channel input gains their per-sample mean
    as the 23rd row."""
    channels = np.asarray(channels)
    c = channels.shape[0]
    if c == N_CHANNELS:
        return channels
    if c == N_CHANNELS - 1:
        return np.vstack([channels, channels.mean(axis=0, keepdims=True)])
    raise ValueError(f"expected 22 or 23 channels, got {c}")


def match_channels(labels: list[str], canonical: list[str]) -> list[int | None]:
    """Map each canonical label to a signal index (None when absent).

    Duplicate labels are consumed in file order, so a canonical list that
    repeats a label picks successive occurrences.
    """
    pool: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        pool.setdefault(lab.strip().upper(), []).append(i)
    out = []
    for lab in canonical:
        hits = pool.get(lab.strip().upper())
        out.append(hits.pop(0) if hits else None)
    return out


def load_recording(edf_path, subject_id: int, canonical_labels: list[str],
                   annotations: SeizureAnnotations | None = None) -> EegRecording:
    """Read an EDF file, reorder to the canonical montage and harmonize.

    A file may miss at most one canonical label; the missing row is filled
    with the mean of the 22 present channels.  Signals not in the canonical
    list are ignored.
    """
    if len(canonical_labels) != N_CHANNELS:
        raise ValueError(f"canonical label list must have {N_CHANNELS} entries")
    header, payload = read_edf(edf_path)
    index = match_channels(header.labels, canonical_labels)
    missing = [canonical_labels[k] for k, i in enumerate(index) if i is None]
    if len(missing) > 1:
        raise EdfFormatError(f"{edf_path}: unmatched canonical labels {missing}")
    present = [i for i in index if i is not None]
    rates = {header.sampling_rate(i) for i in present}
    if len(rates) != 1:
        raise EdfFormatError(f"{edf_path}: matched signals have differing rates {sorted(rates)}")
    ignored = sorted(set(range(header.n_signals)) - set(present))
    if ignored:
        logger.info("%s: ignoring non-montage signals %s", edf_path, [header.labels[i] for i in ignored])

    data = np.stack([decode_samples(header, payload, i) for i in present])
    data = harmonize_channels(data)
    if missing:
        # harmonize_channels appended the mean row; move it to the missing slot
        slot = index.index(None)
        data = np.insert(data[:-1], slot, data[-1], axis=0)
    if annotations is None:
        annotations = SeizureAnnotations(Path(edf_path).name)
    return EegRecording(subject_id=subject_id, channels=data, fs=rates.pop(),
                        annotations=annotations, start_datetime=header.start_datetime,
                        labels=list(canonical_labels))


@dataclass(frozen=True)
class ManifestEntry:
    edf_path: Path
    subject_id: int
    summary_path: Path | None


def read_manifest(path) -> tuple[list[ManifestEntry], dict]:
    """Read the dataset manifest JSON.

    Relative paths resolve against the manifest's directory.  Returns the
    entries and the remaining top-level keys (e.g. ``channel_labels``).
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    entries = []
    for item in doc.get("recordings", []):
        edf = Path(item["edf_path"])
        summary = item.get("summary_path")
        entries.append(ManifestEntry(
            edf_path=edf if edf.is_absolute() else base / edf,
            subject_id=int(item["subject_id"]),
            summary_path=None if summary is None else (Path(summary) if Path(summary).is_absolute() else base / summary),
        ))
    if not entries:
        raise ValueError(f"{path}: manifest lists no recordings")
    extra = {k: v for k, v in doc.items() if k != "recordings"}
    return entries, extra


def load_manifest_recordings(entries: list[ManifestEntry], canonical_labels: list[str]) -> list[EegRecording]:
    summaries: dict[Path, dict[str, SeizureAnnotations]] = {}
    recordings = []
    for entry in entries:
        ann = None
        if entry.summary_path is not None:
            if entry.summary_path not in summaries:
                parsed = parse_summary(entry.summary_path.read_text())
                summaries[entry.summary_path] = {a.file_name: a for a in parsed}
            name = entry.edf_path.name
            ann = summaries[entry.summary_path].get(name)
            if ann is None:
                logger.warning("%s not listed in %s; assuming no seizures", name, entry.summary_path)
        recordings.append(load_recording(entry.edf_path, entry.subject_id, canonical_labels, ann))
    return recordings

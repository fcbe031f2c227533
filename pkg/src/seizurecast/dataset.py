"""Window labeling, class balancing, folds, LOPO splits and Siamese pairs."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .edf import EegRecording

logger = logging.getLogger(__name__)

PREICTAL = 1
INTERICTAL = 0


@dataclass(frozen=True)
class LabelPolicy:
    """Class definitions in seconds.

    Pre-ictal windows end at or before an onset and start no earlier than
    ``preictal_horizon`` before it.  Interictal windows are farther than
    ``interictal_exclusion`` from every seizure onset and offset.
    """

    preictal_horizon: float = 3600.0
    interictal_exclusion: float = 14400.0
    window_len: float = 10.0
    preictal_overlap: float = 2.0
    interictal_overlap: float = 0.0

    def __post_init__(self):
        for name in ("preictal_overlap", "interictal_overlap"):
            v = getattr(self, name)
            if not 0 <= v < self.window_len:
                raise ValueError(f"{name} must lie in [0, window_len)")
        if self.preictal_horizon > self.interictal_exclusion:
            raise ValueError("preictal_horizon must not exceed interictal_exclusion")
        if self.window_len <= 0:
            raise ValueError("window_len must be positive")


@dataclass
class LabeledWindow:
    subject_id: int
    label: int
    file_name: str
    start: float
    samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def window_id(self) -> str:
        return f"{self.file_name}@{self.start:.3f}"


class Dataset:
    """Windows plus an optional feature array aligned with them."""

    def __init__(self, windows: list[LabeledWindow], features: np.ndarray | None = None):
        self.windows = list(windows)
        if features is not None and len(features) != len(self.windows):
            raise ValueError("features must align with windows")
        self.features = features

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([w.label for w in self.windows], dtype=int)

    @property
    def subject_ids(self) -> np.ndarray:
        return np.array([w.subject_id for w in self.windows], dtype=int)

    @property
    def class_counts(self) -> dict[int, int]:
        c = Counter(w.label for w in self.windows)
        return {INTERICTAL: c.get(INTERICTAL, 0), PREICTAL: c.get(PREICTAL, 0)}

    @property
    def subject_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(w.subject_id for w in self.windows).items()))

    @property
    def subjects(self) -> list[int]:
        return sorted({w.subject_id for w in self.windows})

    @property
    def balanced(self) -> bool:
        c = self.class_counts
        return abs(c[PREICTAL] - c[INTERICTAL]) <= 1

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=int)
        feats = None if self.features is None else self.features[idx]
        return Dataset([self.windows[i] for i in idx], feats)

    def samples(self) -> np.ndarray:
        if any(w.samples is None for w in self.windows):
            raise ValueError("some windows carry no samples")
        return np.stack([w.samples for w in self.windows])


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: np.ndarray
    seed: int

    def val_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.k).tolist()


@dataclass(frozen=True)
class PairStream:
    """Offline-mined (primary, secondary) index pairs into a dataset."""

    primary: np.ndarray
    secondary: np.ndarray
    same_patient: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.primary)

    @property
    def same_fraction(self) -> float:
        return float(self.same_patient.mean()) if len(self) else 0.0


def _distance_to_point(t: float, window_len: float, x: float) -> float:
    if t <= x <= t + window_len:
        return 0.0
    return min(abs(t - x), abs(t + window_len - x))


def classify_window(start: float, seizures, policy: LabelPolicy) -> int | None:
    """Label of the window [start, start + window_len) or None if discarded.

    ``seizures`` are (onset, offset) pairs on the same time axis as ``start``.
    Windows overlapping a seizure are never pre-ictal.
    """
    end = start + policy.window_len
    ictal = any(start < e and s < end for s, e in seizures)
    if not ictal:
        for onset, _ in seizures:
            if onset - policy.preictal_horizon <= start and end <= onset:
                return PREICTAL
    far = all(
        _distance_to_point(start, policy.window_len, s) > policy.interictal_exclusion
        and _distance_to_point(start, policy.window_len, e) > policy.interictal_exclusion
        for s, e in seizures)
    return INTERICTAL if far else None


def label_windows(recording: EegRecording, policy: LabelPolicy = LabelPolicy(),
                  context_seizures=()) -> list[LabeledWindow]:
    """Cut a recording into labeled windows.

    Pre-ictal and interictal candidates come from two grids anchored at the
    file start with strides ``window_len - overlap`` for their class.
    ``context_seizures`` adds seizures from neighboring files, expressed in
    seconds relative to this file's start.
    """
    n = recording.fs * policy.window_len
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"fs * window_len = {n} is not a whole number of samples")
    n = int(round(n))
    seizures = list(recording.annotations.seizure_intervals) + list(context_seizures)
    duration = recording.duration
    out = []
    for label, overlap in ((PREICTAL, policy.preictal_overlap), (INTERICTAL, policy.interictal_overlap)):
        step = policy.window_len - overlap
        k = 0
        while True:
            t = k * step
            if t + policy.window_len > duration + 1e-9:
                break
            k += 1
            if classify_window(t, seizures, policy) != label:
                continue
            i0 = int(round(t * recording.fs))
            out.append(LabeledWindow(recording.subject_id, label, recording.file_name, t,
                                     recording.channels[:, i0:i0 + n]))
    out.sort(key=lambda w: (w.start, -w.label))
    return out


def _context_for(recordings: list[EegRecording]) -> list[list[tuple[float, float]]]:
    """Seizures of other files of the same subject on each file's time axis.

    Used only when every file of the subject has a start timestamp and the
    files do not overlap in time; otherwise distances stay within-file.
    """
    context: list[list[tuple[float, float]]] = [[] for _ in recordings]
    by_subject: dict[int, list[int]] = {}
    for i, r in enumerate(recordings):
        by_subject.setdefault(r.subject_id, []).append(i)
    for subject, idx in by_subject.items():
        if len(idx) < 2:
            continue
        if any(recordings[i].start_datetime is None for i in idx):
            logger.info("subject %d: missing timestamps, within-file labeling only", subject)
            continue
        spans = sorted((recordings[i].start_datetime.timestamp(), recordings[i].duration) for i in idx)
        if any(a[0] + a[1] > b[0] + 1e-6 for a, b in zip(spans, spans[1:])):
            logger.warning("subject %d: recordings overlap in time, within-file labeling only", subject)
            continue
        for i in idx:
            t0 = recordings[i].start_datetime.timestamp()
            for j in idx:
                if j == i:
                    continue
                shift = recordings[j].start_datetime.timestamp() - t0
                context[i].extend((s + shift, e + shift) for s, e in recordings[j].annotations.seizure_intervals)
    return context


def balance_windows(windows: list[LabeledWindow], seed: int) -> list[LabeledWindow]:
    """Keep every pre-ictal window and subsample interictal ones to match.

    Subjects that would otherwise vanish keep one randomly chosen interictal
    window.  When interictal windows are the minority all windows are kept
    and a warning is logged.
    """
    pre = [i for i, w in enumerate(windows) if w.label == PREICTAL]
    inter = [i for i, w in enumerate(windows) if w.label == INTERICTAL]
    if not pre or not inter:
        raise ValueError(f"a class is empty: {len(pre)} pre-ictal, {len(inter)} interictal")
    if len(inter) <= len(pre):
        if len(inter) < len(pre):
            logger.warning("only %d interictal for %d pre-ictal windows; keeping all (unbalanced)",
                           len(inter), len(pre))
        return list(windows)

    rng = np.random.default_rng(seed)
    covered = {windows[i].subject_id for i in pre}
    reserved = []
    for subject in sorted({windows[i].subject_id for i in inter} - covered):
        cands = [i for i in inter if windows[i].subject_id == subject]
        reserved.append(cands[rng.integers(len(cands))])
    reserved = reserved[:len(pre)]
    rest = np.setdiff1d(inter, reserved)
    chosen = rng.choice(rest, size=len(pre) - len(reserved), replace=False)
    keep = sorted(pre + reserved + chosen.tolist())
    return [windows[i] for i in keep]


def build_balanced_dataset(recordings: list[EegRecording], policy: LabelPolicy = LabelPolicy(),
                           seed: int = 0) -> Dataset:
    context = _context_for(recordings)
    windows = []
    for rec, ctx in zip(recordings, context):
        labeled = label_windows(rec, policy, ctx)
        if not labeled:
            logger.warning("%s: no windows satisfy the labeling policy", rec.file_name)
        windows.extend(labeled)
    ds = Dataset(balance_windows(windows, seed))
    logger.info("dataset: %d windows, classes %s, subjects %s", len(ds), ds.class_counts, ds.subject_counts)
    return ds


def make_folds(dataset, k: int = 10, seed: int = 0) -> FoldPlan:
    """Seeded shuffle then round-robin fold assignment at window level."""
    n = len(dataset)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[order] = np.arange(n) % k
    return FoldPlan(k, assignment, seed)


def mine_pairs(dataset, seed: int = 0, max_attempts: int = 100) -> PairStream:
    """Offline pair mining with an exact half of same-patient pairs.

    Every window is a primary once, in seeded shuffled order.  Same/different
    flags are a seeded permutation of a half-and-half vector; a same flag that
    lands on a subject with a single window is swapped with a randomly drawn
    different flag, giving up after ``max_attempts`` draws.
    """
    subjects = np.asarray(dataset.subject_ids)
    uniq = np.unique(subjects)
    if len(uniq) < 2:
        raise ValueError("pair mining needs at least two subjects")
    rng = np.random.default_rng(seed)
    n = len(subjects)
    primary = rng.permutation(n)
    same = np.zeros(n, dtype=int)
    same[: n // 2 + (rng.integers(2) if n % 2 else 0)] = 1
    same = rng.permutation(same)

    members = {s: np.flatnonzero(subjects == s) for s in uniq}
    others = {s: np.flatnonzero(subjects != s) for s in uniq}
    singleton = np.array([len(members[subjects[i]]) < 2 for i in primary])
    for pos in np.flatnonzero(singleton & (same == 1)):
        for _ in range(max_attempts):
            cand = int(rng.integers(n))
            if same[cand] == 0 and not singleton[cand]:
                same[pos], same[cand] = 0, 1
                break
        else:
            raise ValueError(f"could not place a same-patient pair after {max_attempts} attempts")

    secondary = np.empty(n, dtype=int)
    for pos, i in enumerate(primary):
        s = subjects[i]
        if same[pos]:
            pool = members[s][members[s] != i]
        else:
            pool = others[s]
        secondary[pos] = pool[rng.integers(len(pool))]
    return PairStream(primary, secondary, same, seed)


def split_lopo(dataset: Dataset, subject_id: int) -> tuple[Dataset, Dataset]:
    """(train, held_out): held_out holds exactly the subject's windows."""
    subjects = dataset.subject_ids
    mask = subjects == subject_id
    if not mask.any():
        raise ValueError(f"subject {subject_id} has no windows in the dataset")
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(np.flatnonzero(mask))


def with_policy(policy: LabelPolicy, **changes) -> LabelPolicy:
    return replace(policy, **changes)


_INDEX_FIELDS = ("window_id", "subject_id", "label", "file_name", "start")


def _index_rows(dataset: Dataset):
    for w in dataset.windows:
        yield {"window_id": w.window_id, "subject_id": w.subject_id, "label": w.label,
               "file_name": w.file_name, "start": w.start}


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``windows.npy`` / ``features.npy`` blocks plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    has_samples = all(w.samples is not None for w in dataset.windows) and len(dataset) > 0
    if has_samples:
        np.save(directory / "windows.npy", dataset.samples())
    if dataset.features is not None:
        np.save(directory / "features.npy", dataset.features)
    index = {"n_windows": len(dataset), "has_samples": has_samples,
             "has_features": dataset.features is not None, "windows": list(_index_rows(dataset))}
    (directory / "index.json").write_text(json.dumps(index, indent=1))
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    samples = np.load(directory / "windows.npy") if index["has_samples"] else None
    feats = np.load(directory / "features.npy") if index["has_features"] else None
    windows = [LabeledWindow(int(r["subject_id"]), int(r["label"]), r["file_name"], float(r["start"]),
                             None if samples is None else samples[i])
               for i, r in enumerate(index["windows"])]
    return Dataset(windows, feats)


def export_index_csv(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_INDEX_FIELDS)
        w.writeheader()
        w.writerows(_index_rows(dataset))
    return path

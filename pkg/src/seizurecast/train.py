"""Training loops, metrics, cross-validation, the horizon sweep and LOPO transfer."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataset import Dataset, LabelPolicy, PairStream, build_balanced_dataset, make_folds, mine_pairs, split_lopo
from .mfcc import MfccConfig, featurize
from .models import Model2, build_model
from .nn import Adam

logger = logging.getLogger(__name__)

FINETUNE_BATCH = {100: 10, 1000: 100, 2000: 200}
FINETUNE_BATCH_ALL = 400
SWEEP_OVERLAPS = {15: 3.5, 30: 2.5, 60: 2.0}


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch: int = 600
    lr: float = 1e-3
    seed: int = 0
    model: str = "model2"
    lam: float = 0.9
    gamma: float = 0.6
    dtype: str = "float32"
    finetune_batch: int | None = None
    finetune_epochs: int | None = None
    standardize: bool = True

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.model not in ("model1", "model2"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def build(self, seed: int | None = None):
        seed = self.seed if seed is None else seed
        if self.model == "model1":
            return build_model("model1", seed, lam=self.lam, dtype=self.dtype)
        return build_model("model2", seed, gamma=self.gamma, dtype=self.dtype)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int
    roc_auc: float | None = None

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n if self.n else math.nan

    @property
    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else math.nan

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "roc_auc": self.roc_auc,
                "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "roc_auc")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    steps: int


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.epochs[-1].steps if self.epochs else 0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]


def confusion(pred, labels) -> tuple[int, int, int, int]:
    pred = np.asarray(pred).astype(bool)
    labels = np.asarray(labels).astype(bool)
    return (int(np.sum(pred & labels)), int(np.sum(~pred & ~labels)),
            int(np.sum(pred & ~labels)), int(np.sum(~pred & labels)))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate: P(score_pos > score_neg) with ties counted 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metrics_from_scores(scores, labels, threshold: float = 0.5) -> Metrics:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    m = Metrics(*confusion(scores >= threshold, labels))
    if 0 < labels.sum() < labels.size:
        m.roc_auc = roc_auc(scores, labels)
    return m


def evaluate(model, dataset: Dataset, threshold: float = 0.5) -> Metrics:
    if dataset.features is None:
        raise ValueError("dataset has no features; run featurize first")
    return metrics_from_scores(model.predict_proba(dataset.features), dataset.labels, threshold)


def _check_loss(loss: float, epoch: int, step: int, model) -> None:
    if not np.isfinite(loss):
        norms = {p.name: float(np.linalg.norm(p.value)) for p in model.params}
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:3]
        raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {step}; "
                               f"largest parameter norms {worst}")


def train(model, dataset: Dataset, cfg: TrainConfig, pairs: PairStream | None = None,
          single: bool = False, epochs: int | None = None, batch: int | None = None,
          fit_norm: bool | None = None) -> History:
    """Train ``model`` in place with Adam and return the per-epoch history.

    Model II trains on pairs (mined from ``dataset`` with ``cfg.seed`` when
    ``pairs`` is None) unless ``single`` is set, in which case it trains the
    classification branch alone on unpaired windows.  Input standardization
    is fitted on ``dataset`` when ``fit_norm`` (default ``cfg.standardize``
    for models that have none yet) is true.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if dataset.features is None:
        raise ValueError("dataset has no features; run featurize first")
    epochs = cfg.epochs if epochs is None else epochs
    batch = cfg.batch if batch is None else batch
    if fit_norm is None:
        fit_norm = cfg.standardize and model.input_norm is None
    if fit_norm:
        model.fit_input_norm(dataset.features)

    x, y, subjects = dataset.features, dataset.labels, dataset.subject_ids
    paired = isinstance(model, Model2) and not single
    if paired and pairs is None:
        pairs = mine_pairs(dataset, cfg.seed)
    n = len(pairs) if paired else len(dataset)

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(list(model.params), lr=cfg.lr)
    history = History()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch):
            b = order[i:i + batch]
            opt.zero_grad()
            if paired:
                a, s = pairs.primary[b], pairs.secondary[b]
                loss = model.batch_loss(x[a], x[s], pairs.same_patient[b], y[a],
                                        training=True, rng=rng, backward=True)
            elif isinstance(model, Model2):
                loss = model.single_loss(x[b], y[b], training=True, rng=rng, backward=True)
            else:
                loss = model.batch_loss(x[b], y[b], subjects[b], training=True, rng=rng, backward=True)
            _check_loss(loss, epoch, opt.step_count + 1, model)
            try:
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            model.after_step()
            total += loss * len(b)
        history.epochs.append(EpochRecord(epoch, total / n, opt.step_count))
        logger.debug("epoch %d loss %.5f", epoch, total / n)
    return history


@dataclass
class CvResult:
    folds: list[Metrics]
    plan: object

    def mean(self, name: str) -> float:
        vals = [getattr(m, name) for m in self.folds]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else math.nan

    def std(self, name: str) -> float:
        vals = [getattr(m, name) for m in self.folds]
        vals = [v for v in vals if v is not None]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else math.nan

    def summary(self) -> dict:
        return {k: (self.mean(k), self.std(k)) for k in METRIC_NAMES}


def cross_validate(dataset: Dataset, cfg: TrainConfig, k: int = 10) -> CvResult:
    """Window-level k-fold CV: train on k-1 folds, evaluate on the held-out one."""
    plan = make_folds(dataset, k, cfg.seed)
    folds = []
    for f in range(k):
        tr_idx, va_idx = plan.train_indices(f), plan.val_indices(f)
        assert not np.intersect1d(tr_idx, va_idx).size, "train/validation overlap"
        model = cfg.build()
        train(model, dataset.subset(tr_idx), cfg)
        m = evaluate(model, dataset.subset(va_idx))
        logger.info("fold %d/%d: acc %.4f auc %s", f + 1, k, m.accuracy, m.roc_auc)
        folds.append(m)
    return CvResult(folds, plan)


def duration_sweep(recordings, cfg: TrainConfig, durations=(15, 30, 60), overlaps=None,
                   policy: LabelPolicy = LabelPolicy(), mfcc_cfg: MfccConfig = MfccConfig(),
                   k: int = 10) -> dict[int, CvResult]:
    """Cross-validate Model II at several pre-ictal horizons (minutes)."""
    overlaps = SWEEP_OVERLAPS if overlaps is None else overlaps
    cfg = replace(cfg, model="model2")
    out = {}
    for minutes in durations:
        if minutes > 60:
            raise ValueError("pre-ictal duration must not exceed 60 minutes")
        pol = replace(policy, preictal_horizon=60.0 * minutes,
                      preictal_overlap=overlaps.get(minutes, policy.preictal_overlap))
        ds = featurize(build_balanced_dataset(recordings, pol, cfg.seed), mfcc_cfg)
        logger.info("sweep %d min: %d windows", minutes, len(ds))
        out[minutes] = cross_validate(ds, cfg, k)
    return out


def finetune_batch(n: int, is_all: bool, override: int | None = None) -> int:
    """Batch size for a fine-tuning set of ``n`` windows."""
    if override is not None:
        return override
    if is_all:
        return FINETUNE_BATCH_ALL
    return FINETUNE_BATCH.get(n, max(1, n // 10))


def fine_tune(pretrained, data: Dataset, cfg: TrainConfig, is_all: bool = False) -> History:
    """Continue training ``pretrained`` in place on one subject's windows.

    Model II fine-tunes its classification loss only: a single subject
    cannot supply different-patient pairs.
    """
    bs = finetune_batch(len(data), is_all, cfg.finetune_batch)
    epochs = cfg.finetune_epochs or cfg.epochs
    return train(pretrained, data, cfg, single=True, epochs=epochs, batch=bs, fit_norm=False)


@dataclass
class TransferResult:
    subject: int
    lopo: Metrics
    by_n: dict[str, Metrics]
    n_used: dict[str, int]
    val_size: int


def transfer(dataset: Dataset, subject_id: int, cfg: TrainConfig, n_values=(100, 1000, 2000, "all"),
             val_fraction: float = 0.2, pretrained=None) -> TransferResult:
    """Leave one subject out, then fine-tune on growing slices of its windows.

    The subject's windows are split once (seeded) into a fixed validation
    part and a fine-tuning pool; the pool is shuffled once and the first n
    windows are used, so smaller slices are contained in larger ones.
    """
    rest, held = split_lopo(dataset, subject_id)
    if pretrained is None:
        pretrained = cfg.build()
        train(pretrained, rest, cfg)
    rng = np.random.default_rng([cfg.seed, subject_id])
    perm = rng.permutation(len(held))
    n_val = max(1, int(math.ceil(val_fraction * len(held))))
    if n_val >= len(held):
        raise ValueError(f"subject {subject_id}: too few windows ({len(held)}) for a validation split")
    val = held.subset(perm[:n_val])
    pool_idx = perm[n_val:][rng.permutation(len(held) - n_val)]
    lopo = evaluate(pretrained, val)
    by_n, used = {}, {}
    for n in n_values:
        is_all = n == "all"
        take = len(pool_idx) if is_all else int(n)
        if take > len(pool_idx):
            logger.warning("subject %d: n=%s exceeds %d available windows; using all",
                           subject_id, n, len(pool_idx))
            take = len(pool_idx)
        subset = held.subset(pool_idx[:take])
        model = pretrained.clone()
        fine_tune(model, subset, cfg, is_all=is_all)
        by_n[str(n)] = evaluate(model, val)
        used[str(n)] = take
    return TransferResult(subject_id, lopo, by_n, used, n_val)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_results_csv(path, rows: list[dict]) -> Path:
    """Write rows with the union of their keys as columns (first-seen order)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    return path


def cv_rows(result: CvResult) -> list[dict]:
    rows = [{"fold": i, **m.as_dict()} for i, m in enumerate(result.folds)]
    summary = {"fold": "mean"}
    spread = {"fold": "std"}
    for k in METRIC_NAMES:
        summary[k] = result.mean(k)
        spread[k] = result.std(k)
    return rows + [summary, spread]


def blob_id(data: bytes) -> str:
    """Git-style blob id (sha1 over "blob <len>\\0" + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_run_manifest(path, config: dict, seeds: dict, inputs=(), outputs=()) -> Path:
    """JSON record of config, its hash, seeds and blob ids of inputs/outputs."""
    path = Path(path)
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    manifest = {
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seeds": seeds,
        "inputs": {str(p): blob_id(Path(p).read_bytes()) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): blob_id(Path(p).read_bytes()) for p in outputs if Path(p).is_file()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    return path


__all__ = [
    "CvResult", "EpochRecord", "History", "Metrics", "TrainConfig", "TrainingDiverged", "TransferResult",
    "confusion", "cross_validate", "cv_rows", "duration_sweep", "evaluate", "fine_tune", "finetune_batch",
    "metrics_from_scores", "roc_auc", "train", "transfer", "write_results_csv", "write_run_manifest",
    "blob_id",
]

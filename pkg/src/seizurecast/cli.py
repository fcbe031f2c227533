"""Command-line entry point.

Every subcommand writes ``results.csv`` and ``run_manifest.json`` into the
output directory (``--out``, overridden by ``$SEIZURECAST_OUT``).  Settings
come from an optional JSON config whose sections mirror the library
dataclasses (``policy``, ``mfcc``, ``train``); command-line flags win.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Dataset, LabeledWindow, LabelPolicy, build_balanced_dataset, export_index_csv
from .edf import N_CHANNELS, load_manifest_recordings, load_recording, read_edf, read_manifest
from .interpret import (
    BASELINES,
    attribute_windows,
    export_attribution_csv,
    export_kl_csv,
    export_trace_csv,
    kl_map,
    smooth_and_threshold,
)
from .mfcc import MfccConfig, featurize
from .models import export_embeddings, load_model
from .train import (
    TrainConfig,
    cross_validate,
    cv_rows,
    duration_sweep,
    evaluate,
    train,
    transfer,
    write_results_csv,
    write_run_manifest,
)

logger = logging.getLogger("seizurecast")

COMMANDS = ("ingest", "featurize", "train", "crossval", "sweep", "transfer", "interpret",
            "biomarker", "export-embeddings")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="dataset manifest JSON")
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--model", choices=("model1", "model2"))
    common.add_argument("--lambda", dest="lam", type=float, help="Model I loss mix")
    common.add_argument("--gamma", type=float, help="Model II loss mix")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--k", type=int, help="number of cross-validation folds")
    common.add_argument("--duration-mins", help="comma-separated pre-ictal durations in minutes")
    common.add_argument("--subject", type=int)
    common.add_argument("--n-samples", "--samples", dest="n_samples", type=int,
                        help="Shapley permutations per window")
    common.add_argument("--threshold", type=float)
    common.add_argument("--smooth-len", type=int)
    common.add_argument("--bins", type=int)
    common.add_argument("--checkpoint", help="model checkpoint (.npz)")
    common.add_argument("--recording", help="EDF recording for interpret/biomarker")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="seizurecast", description="EEG pre-ictal state classification pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "ingest": "label and balance windows; write the dataset index",
        "featurize": "ingest plus MFCC features",
        "train": "train one model on the whole dataset and save a checkpoint",
        "crossval": "k-fold cross-validation",
        "sweep": "cross-validate Model II across pre-ictal durations",
        "transfer": "leave-one-subject-out plus fine-tuning",
        "interpret": "channel Shapley attribution for a recording",
        "biomarker": "KL-divergence map for a recording",
        "export-embeddings": "write model embeddings for external t-SNE",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


@dataclasses.dataclass
class RunConfig:
    command: str
    manifest: str | None
    out: Path
    seed: int
    policy: LabelPolicy
    mfcc: MfccConfig
    train: TrainConfig
    k: int = 10
    durations: tuple = (15, 30, 60)
    subject: int | None = None
    n_values: tuple = (100, 1000, 2000, "all")
    n_samples: int = 1000
    baseline: str = "mean"
    threshold: float = 0.5
    smooth_len: int = 21
    bins: int = 32
    checkpoint: str | None = None
    recording: str | None = None
    channel_labels: list | None = None

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["out"] = str(self.out)
        return d


def _section(cls, doc: dict, key: str, **overrides):
    raw = dict(doc.get(key, {}))
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in config section {key!r}: {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {key!r} settings: {exc}") from exc


def resolve_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    out = os.environ.get("SEIZURECAST_OUT") or args.out or doc.get("out", "out")
    tcfg = _section(TrainConfig, doc, "train", seed=seed, model=args.model, lam=args.lam,
                    gamma=args.gamma, epochs=args.epochs, batch=args.batch)
    policy = _section(LabelPolicy, doc, "policy")
    mcfg = _section(MfccConfig, doc, "mfcc")
    durations = doc.get("durations", (15, 30, 60))
    if args.duration_mins:
        try:
            durations = [float(x) for x in args.duration_mins.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad --duration-mins {args.duration_mins!r}") from exc
    durations = tuple(int(d) if float(d).is_integer() else float(d) for d in durations)

    def pick(flag, key, default):
        return flag if flag is not None else doc.get(key, default)

    cfg = RunConfig(
        command=args.command,
        manifest=pick(args.manifest, "manifest", None),
        out=Path(out),
        seed=seed,
        policy=policy,
        mfcc=mcfg,
        train=tcfg,
        k=int(pick(args.k, "k", 10)),
        durations=durations,
        subject=pick(args.subject, "subject", None),
        n_values=tuple(doc.get("n_values", (100, 1000, 2000, "all"))),
        n_samples=int(pick(args.n_samples, "n_samples", 1000)),
        baseline=doc.get("baseline", "mean"),
        threshold=float(pick(args.threshold, "threshold", 0.5)),
        smooth_len=int(pick(args.smooth_len, "smooth_len", 21)),
        bins=int(pick(args.bins, "bins", 32)),
        checkpoint=pick(args.checkpoint, "checkpoint", None),
        recording=pick(args.recording, "recording", None),
        channel_labels=doc.get("channel_labels"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    needs_manifest = {"ingest", "featurize", "train", "crossval", "sweep", "transfer", "export-embeddings"}
    if cfg.command in needs_manifest:
        if not cfg.manifest:
            raise ConfigError(f"{cfg.command} requires --manifest")
        if not Path(cfg.manifest).is_file():
            raise ConfigError(f"manifest not found: {cfg.manifest}")
    if cfg.command in ("interpret", "biomarker"):
        if not cfg.recording:
            raise ConfigError(f"{cfg.command} requires --recording")
        if not Path(cfg.recording).is_file():
            raise ConfigError(f"recording not found: {cfg.recording}")
    if cfg.command in ("interpret", "export-embeddings"):
        if not cfg.checkpoint:
            raise ConfigError(f"{cfg.command} requires --checkpoint")
        if not Path(cfg.checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    if cfg.k < 2:
        raise ConfigError("--k must be at least 2")
    if cfg.baseline not in BASELINES:
        raise ConfigError(f"baseline must be one of {sorted(BASELINES)}")
    if cfg.smooth_len < 1 or cfg.smooth_len % 2 == 0:
        raise ConfigError("--smooth-len must be odd and >= 1")
    if cfg.bins < 1:
        raise ConfigError("--bins must be positive")


def _canonical_labels(cfg: RunConfig, extra: dict, first_edf) -> list[str]:
    labels = cfg.channel_labels or extra.get("channel_labels")
    if labels is None:
        header, _ = read_edf(first_edf)
        labels = header.labels[:N_CHANNELS]
        logger.info("no channel_labels given; using the first %d signals of %s", N_CHANNELS, first_edf)
    if len(labels) != N_CHANNELS:
        raise ConfigError(f"channel_labels must list {N_CHANNELS} labels")
    return list(labels)


def _load_recordings(cfg: RunConfig):
    entries, extra = read_manifest(cfg.manifest)
    labels = _canonical_labels(cfg, extra, entries[0].edf_path)
    return load_manifest_recordings(entries, labels), entries


def _dataset(cfg: RunConfig, features: bool = True) -> tuple[Dataset, list]:
    recordings, entries = _load_recordings(cfg)
    ds = build_balanced_dataset(recordings, cfg.policy, cfg.seed)
    if features:
        featurize(ds, cfg.mfcc)
    return ds, [e.edf_path for e in entries]


def _recording_windows(cfg: RunConfig) -> Dataset:
    """Consecutive non-overlapping windows of a single recording (unlabeled)."""
    labels = cfg.channel_labels
    if labels is None:
        header, _ = read_edf(cfg.recording)
        labels = header.labels[:N_CHANNELS]
    rec = load_recording(cfg.recording, cfg.subject or 1, labels)
    n = int(round(rec.fs * cfg.policy.window_len))
    windows = [LabeledWindow(rec.subject_id, -1, rec.file_name, i / rec.fs, rec.channels[:, i:i + n])
               for i in range(0, rec.channels.shape[1] - n + 1, n)]
    if len(windows) < 2:
        raise ValueError(f"{cfg.recording}: fewer than two windows")
    return featurize(Dataset(windows), cfg.mfcc)


def cmd_ingest(cfg: RunConfig):
    ds, inputs = _dataset(cfg, features=False)
    export_index_csv(ds, cfg.out / "windows.csv")
    rows = [{"subject": s, "preictal": int(np.sum((ds.subject_ids == s) & (ds.labels == 1))),
             "interictal": int(np.sum((ds.subject_ids == s) & (ds.labels == 0)))} for s in ds.subjects]
    return rows, inputs, [cfg.out / "windows.csv"]


def cmd_featurize(cfg: RunConfig):
    ds, inputs = _dataset(cfg)
    np.save(cfg.out / "features.npy", ds.features)
    export_index_csv(ds, cfg.out / "windows.csv")
    rows = [{"window_id": w.window_id, "subject": w.subject_id, "label": w.label,
             "mean": float(f.mean()), "std": float(f.std())} for w, f in zip(ds.windows, ds.features)]
    return rows, inputs, [cfg.out / "features.npy", cfg.out / "windows.csv"]


def cmd_train(cfg: RunConfig):
    ds, inputs = _dataset(cfg)
    model = cfg.train.build()
    history = train(model, ds, cfg.train)
    ckpt = model.save(cfg.out / "model.npz", train_config=dataclasses.asdict(cfg.train))
    m = evaluate(model, ds)
    rows = [{"epoch": e.epoch, "loss": e.loss, "steps": e.steps} for e in history.epochs]
    rows.append({"epoch": "final", **m.as_dict()})
    return rows, inputs, [ckpt]


def cmd_crossval(cfg: RunConfig):
    ds, inputs = _dataset(cfg)
    return cv_rows(cross_validate(ds, cfg.train, cfg.k)), inputs, []


def cmd_sweep(cfg: RunConfig):
    recordings, entries = _load_recordings(cfg)
    result = duration_sweep(recordings, cfg.train, cfg.durations, policy=cfg.policy, mfcc_cfg=cfg.mfcc, k=cfg.k)
    rows = []
    for minutes, cv in result.items():
        rows.extend({"duration_mins": minutes, **r} for r in cv_rows(cv))
    return rows, [e.edf_path for e in entries], []


def cmd_transfer(cfg: RunConfig):
    ds, inputs = _dataset(cfg)
    subjects = [cfg.subject] if cfg.subject is not None else ds.subjects
    rows = []
    for s in subjects:
        res = transfer(ds, s, cfg.train, cfg.n_values)
        rows.append({"subject": s, "n": "lopo", "n_used": 0, "val_size": res.val_size, **res.lopo.as_dict()})
        for n, m in res.by_n.items():
            rows.append({"subject": s, "n": n, "n_used": res.n_used[n], "val_size": res.val_size, **m.as_dict()})
    return rows, inputs, []


def cmd_interpret(cfg: RunConfig):
    ds = _recording_windows(cfg)
    model = load_model(cfg.checkpoint)
    baseline = BASELINES[cfg.baseline](ds.features)
    starts = [w.start for w in ds.windows]
    amap = attribute_windows(model, ds.features, baseline, cfg.n_samples, cfg.seed,
                             [w.window_id for w in ds.windows], starts, cfg.baseline)
    attr = export_attribution_csv(amap, cfg.out / "attribution.csv")
    trace = smooth_and_threshold(model.predict_proba(ds.features), cfg.smooth_len, cfg.threshold)
    tr = export_trace_csv(trace, starts, cfg.out / "trace.csv")
    rows = [{"window_start": s, "p": float(r), "smoothed": float(m), "final": int(f),
             "top_channel": int(np.argmax(amap.values[:, i]))}
            for i, (s, r, m, f) in enumerate(zip(starts, trace.raw, trace.smoothed, trace.final))]
    return rows, [cfg.recording, cfg.checkpoint], [attr, tr]


def cmd_biomarker(cfg: RunConfig):
    ds = _recording_windows(cfg)
    kmap = kl_map(ds.features, cfg.bins)
    starts = [w.start for w in ds.windows]
    out = export_kl_csv(kmap, starts, cfg.out / "kl_map.csv")
    rows = [{"window_start": s, "kl_mean": float(kmap.values[:, t].mean()),
             "kl_max_channel": int(np.argmax(kmap.values[:, t]))} for t, s in enumerate(starts[:-1])]
    return rows, [cfg.recording], [out]


def cmd_export_embeddings(cfg: RunConfig):
    ds, inputs = _dataset(cfg)
    model = load_model(cfg.checkpoint)
    path = export_embeddings(model, ds.features, ds.subject_ids, ds.labels, cfg.out / "embeddings.csv")
    emb = model.embed(ds.features)
    rows = [{"subject": s, "n_windows": int(np.sum(ds.subject_ids == s)),
             "mean_norm": float(np.linalg.norm(emb[ds.subject_ids == s], axis=1).mean())} for s in ds.subjects]
    return rows, inputs + [cfg.checkpoint], [path]


HANDLERS = {
    "ingest": cmd_ingest,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "sweep": cmd_sweep,
    "transfer": cmd_transfer,
    "interpret": cmd_interpret,
    "biomarker": cmd_biomarker,
    "export-embeddings": cmd_export_embeddings,
}


def run(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows, inputs, outputs = HANDLERS[cfg.command](cfg)
    results = write_results_csv(cfg.out / "results.csv", rows)
    write_run_manifest(cfg.out / "run_manifest.json", cfg.as_dict(), {"seed": cfg.seed, "train": cfg.train.seed},
                       inputs=[p for p in [cfg.manifest, *inputs] if p], outputs=[results, *outputs])
    return results


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("a subcommand is required")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"seizurecast: error: {exc}", file=sys.stderr)
        return 2
    try:
        results = run(cfg)
    except Exception as exc:  # noqa: BLE001 - report any pipeline failure as exit 1
        logger.debug("run failed", exc_info=True)
        print(f"seizurecast: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(results)
    return 0


if __name__ == "__main__":
    sys.exit(main())

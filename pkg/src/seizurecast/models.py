"""Model I (multitask CNN) and Model II (Siamese encoder with classifier).

Both take MFCC maps of shape (B, 23, 13, 201): the EEG channels are the
convolution input channels and the 13 x 201 coefficient/time map is the
spatial extent.
"""

from __future__ import annotations

import copy
import csv
import logging
from pathlib import Path

import numpy as np

from .nn import (
    Concat,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Graph,
    L2Distance,
    MaxPool2D,
    ParameterStore,
    ReLU,
    Sigmoid,
    Softmax,
    bce_grad,
    bce_loss,
    cce_grad,
    cce_loss,
    contrastive_grad,
    contrastive_loss,
    load_checkpoint,
    maxnorm_project,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

INPUT_SHAPE = (23, 13, 201)
N_PATIENTS = 24

MODEL1_ARCH = {
    "id": "model1-v1",
    "convs": [[16, [3, 5]], [16, [3, 5]], [32, [3, 5]], [32, [3, 5]], [64, [3, 3]]],
    "padding": "same",
    # conv block index -> pool window
    "pools": {"1": [2, 4], "3": [2, 4], "4": [3, 6]},
    "embedding": 360,
}

MODEL2_ARCH = {
    "id": "model2-v1",
    "stems": [[8, [5, 9]], [8, [5, 11]]],
    "padding": "same",
    "conv": [16, [3, 5]],
    "pool": [4, 10],
    "embedding": 100,
    "classifier": 40,
}


def _pooled(hw, pool):
    return hw[0] // pool[0], hw[1] // pool[1]


class _Model:
    """Shared plumbing: batched inference, checkpoints, cloning."""

    arch: dict
    graph: Graph
    params: ParameterStore

    def n_parameters(self) -> int:
        return self.params.count()

    def clone(self):
        return copy.deepcopy(self)

    input_norm: tuple[np.ndarray, np.ndarray] | None = None

    def fit_input_norm(self, x) -> None:
        """Standardize each (channel, coefficient) row with statistics pooled
        over samples and frames of ``x``; applied to every later input."""
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=(0, 3))
        std = x.std(axis=(0, 3))
        self.set_input_norm(mean, np.where(std > 1e-8, std, 1.0))

    def set_input_norm(self, mean, std) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.shape != tuple(self.input_shape[:2]) or std.shape != mean.shape:
            raise ValueError(f"normalization statistics must have shape {tuple(self.input_shape[:2])}")
        if np.any(std <= 0):
            raise ValueError("normalization std must be positive")
        self.input_norm = (mean, std)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != tuple(self.input_shape):
            raise ValueError(f"expected input (B, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        if self.input_norm is not None:
            mean, std = self.input_norm
            x = (x - mean[..., None]) / std[..., None]
        return np.asarray(x, dtype=self.dtype)

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        """Eval-mode pre-ictal probability per sample."""
        x = self._check_input(x)
        out = [self._predict_batch(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def embed(self, x, batch_size: int = 64) -> np.ndarray:
        x = self._check_input(x)
        out = [self._embed_batch(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.arch["embedding"]))

    def after_step(self) -> None:
        """Hook run after each optimizer step (constraints)."""

    def metadata(self) -> dict:
        return {
            "architecture": self.arch,
            "architecture_id": self.arch["id"],
            "config": self.config(),
            "n_parameters": self.n_parameters(),
            "input_norm": None if self.input_norm is None else [a.tolist() for a in self.input_norm],
        }

    def save(self, path, **extra) -> Path:
        meta = self.metadata()
        meta.update(extra)
        return save_checkpoint(path, self.params, meta)


class Model1(_Model):
    """Multitask CNN: five conv blocks, a 360-unit embedding, a sigmoid seizure
    head and a 24-way softmax patient head."""

    def __init__(self, seed: int = 0, lam: float = 0.9, n_patients: int = N_PATIENTS,
                 dropout: float = 0.6, maxnorm: float | None = 0.4,
                 input_shape=INPUT_SHAPE, dtype=np.float64):
        if not 0.0 <= lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        self.arch = MODEL1_ARCH
        self.seed = seed
        self.lam = lam
        self.n_patients = n_patients
        self.dropout = dropout
        self.maxnorm = maxnorm
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self._build(np.random.default_rng(seed))

    def config(self) -> dict:
        return {"seed": self.seed, "lam": self.lam, "n_patients": self.n_patients,
                "dropout": self.dropout, "maxnorm": self.maxnorm,
                "input_shape": list(self.input_shape), "dtype": self.dtype.name}

    def _build(self, rng):
        store = ParameterStore()
        g = Graph(store)
        h = g.input("x")
        c_in, hw = self.input_shape[0], self.input_shape[1:]
        self._conv_nodes = []
        for i, (c_out, kernel) in enumerate(self.arch["convs"]):
            conv = Conv2D.create(store, f"conv{i + 1}", c_in, c_out, kernel, rng,
                                 padding=self.arch["padding"], dtype=self.dtype)
            self._conv_nodes.append(conv)
            h = g.add(f"conv{i + 1}", conv, h)
            h = g.add(f"relu{i + 1}", ReLU(), h)
            pool = self.arch["pools"].get(str(i))
            if pool is not None:
                h = g.add(f"pool{i + 1}", MaxPool2D(pool), h)
                hw = _pooled(hw, pool)
            h = g.add(f"drop{i + 1}", Dropout(self.dropout), h)
            c_in = c_out
        h = g.add("flatten", Flatten(), h)
        n_flat = c_in * hw[0] * hw[1]
        emb = self.arch["embedding"]
        h = g.add("dense_embed", Dense.create(store, "embed", n_flat, emb, rng, self.dtype), h)
        g.add("embedding", ReLU(), h)
        h = g.add("seizure_logit", Dense.create(store, "seizure_head", emb, 1, rng, self.dtype), "embedding")
        g.add("p", Sigmoid(), h)
        h = g.add("patient_logits", Dense.create(store, "patient_head", emb, self.n_patients, rng, self.dtype),
                  "embedding")
        g.add("q", Softmax(), h)
        self.graph, self.params = g, store

    def forward(self, x, training=False, rng=None):
        """Return (p_seizure (B,), q_patient (B, n_patients), embedding (B, 360))."""
        x = self._check_input(x)
        v = self.graph.forward({"x": x}, training=training, rng=rng)
        return v["p"][:, 0], v["q"], v["embedding"]

    def _predict_batch(self, x):
        return self.graph.forward({"x": x}, outputs=["p"])["p"][:, 0]

    def _embed_batch(self, x):
        return self.graph.forward({"x": x}, outputs=["embedding"])["embedding"]

    def patient_class(self, subject_ids) -> np.ndarray:
        cls = np.asarray(subject_ids, dtype=int) - 1
        if np.any(cls < 0) or np.any(cls >= self.n_patients):
            raise ValueError(f"subject ids must lie in [1, {self.n_patients}]")
        return cls

    def batch_loss(self, x, y, subject_ids, training=False, rng=None, backward=False) -> float:
        """Forward the batch, return the combined loss and optionally backprop."""
        y_patient = self.patient_class(subject_ids)
        p, q, _ = self.forward(x, training=training, rng=rng)
        loss = model1_loss(p, q, y, y_patient, self.lam)
        if backward:
            gp = self.lam * bce_grad(p, y)
            gq = (1.0 - self.lam) * cce_grad(q, y_patient)
            self.graph.backward({"p": gp[:, None].astype(self.dtype), "q": gq.astype(self.dtype)})
        return loss

    def after_step(self) -> None:
        if self.maxnorm is None:
            return
        for conv in self._conv_nodes:
            conv.weight.value[...] = maxnorm_project(conv.weight.value, self.maxnorm)


class Model2(_Model):
    """Siamese encoder with a classification branch on the primary sample.

    Both branches are separate node instances reading one parameter store.
    """

    def __init__(self, seed: int = 0, gamma: float = 0.6, margin: float = 1.0,
                 dropout: float = 0.4, input_shape=INPUT_SHAPE, dtype=np.float64):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        self.arch = MODEL2_ARCH
        self.seed = seed
        self.gamma = gamma
        self.margin = margin
        self.dropout = dropout
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self._build(np.random.default_rng(seed))

    def config(self) -> dict:
        return {"seed": self.seed, "gamma": self.gamma, "margin": self.margin,
                "dropout": self.dropout, "input_shape": list(self.input_shape),
                "dtype": self.dtype.name}

    def _encoder(self, g: Graph, store: ParameterStore, tag: str, x: str, rng) -> str:
        create = "enc.stem1.kernel" not in store
        pad = self.arch["padding"]
        c_in, hw = self.input_shape[0], self.input_shape[1:]

        def conv(name, ci, co, kernel):
            if create:
                return Conv2D.create(store, name, ci, co, kernel, rng, padding=pad, dtype=self.dtype)
            return Conv2D(store[f"{name}.kernel"], store[f"{name}.bias"], padding=pad)

        def dense(name, n_in, n_out):
            if create:
                return Dense.create(store, name, n_in, n_out, rng, self.dtype)
            return Dense(store[f"{name}.kernel"], store[f"{name}.bias"])

        stems = []
        for i, (c_out, kernel) in enumerate(self.arch["stems"]):
            h = g.add(f"{tag}/stem{i + 1}", conv(f"enc.stem{i + 1}", c_in, c_out, kernel), x)
            stems.append(g.add(f"{tag}/stem{i + 1}_relu", ReLU(), h))
        h = g.add(f"{tag}/concat", Concat(axis=1), *stems)
        h = g.add(f"{tag}/drop", Dropout(self.dropout), h)
        n_stem = sum(c for c, _ in self.arch["stems"])
        c_out, kernel = self.arch["conv"]
        h = g.add(f"{tag}/conv", conv("enc.conv", n_stem, c_out, kernel), h)
        h = g.add(f"{tag}/conv_relu", ReLU(), h)
        h = g.add(f"{tag}/pool", MaxPool2D(self.arch["pool"]), h)
        hw = _pooled(hw, self.arch["pool"])
        h = g.add(f"{tag}/flatten", Flatten(), h)
        return g.add(f"{tag}/embedding", dense("enc.embed", c_out * hw[0] * hw[1], self.arch["embedding"]), h)

    def _build(self, rng):
        store = ParameterStore()
        g = Graph(store)
        xa, xb = g.input("x_a"), g.input("x_b")
        ea = self._encoder(g, store, "a", xa, rng)
        eb = self._encoder(g, store, "b", xb, rng)
        g.add("d", L2Distance(), ea, eb)
        emb, hidden = self.arch["embedding"], self.arch["classifier"]
        h = g.add("cls_hidden", Dense.create(store, "cls.hidden", emb, hidden, rng, self.dtype), ea)
        h = g.add("cls_relu", ReLU(), h)
        h = g.add("cls_logit", Dense.create(store, "cls.out", hidden, 1, rng, self.dtype), h)
        g.add("p", Sigmoid(), h)
        self.graph, self.params = g, store

    def forward(self, x_a, x_b, training=False, rng=None):
        """Return (e_a, e_b, d, p) where p is the primary sample's probability."""
        x_a, x_b = self._check_input(x_a), self._check_input(x_b)
        if x_a.shape != x_b.shape:
            raise ValueError(f"paired batches differ: {x_a.shape} vs {x_b.shape}")
        v = self.graph.forward({"x_a": x_a, "x_b": x_b}, training=training, rng=rng)
        return v["a/embedding"], v["b/embedding"], v["d"], v["p"][:, 0]

    def _predict_batch(self, x):
        return self.graph.forward({"x_a": x}, outputs=["p"])["p"][:, 0]

    def _embed_batch(self, x):
        return self.graph.forward({"x_a": x}, outputs=["a/embedding"])["a/embedding"]

    def batch_loss(self, x_a, x_b, same, y, training=False, rng=None, backward=False,
                   gamma: float | None = None) -> float:
        gamma = self.gamma if gamma is None else gamma
        _, _, d, p = self.forward(x_a, x_b, training=training, rng=rng)
        loss = model2_loss(d, same, p, y, gamma, self.margin)
        if backward:
            seeds = {"p": ((1.0 - gamma) * bce_grad(p, y))[:, None].astype(self.dtype)}
            if gamma > 0:
                seeds["d"] = (gamma * contrastive_grad(d, same, self.margin)).astype(self.dtype)
            self.graph.backward(seeds)
        return loss

    def single_loss(self, x, y, training=False, rng=None, backward=False) -> float:
        """BCE on single (unpaired) samples through the primary branch."""
        x = self._check_input(x)
        p = self.graph.forward({"x_a": x}, outputs=["p"], training=training, rng=rng)["p"][:, 0]
        loss = bce_loss(p, y)
        if backward:
            self.graph.backward({"p": bce_grad(p, y)[:, None].astype(self.dtype)})
        return loss


def model1_forward(m: Model1, x, training=False, rng=None):
    return m.forward(x, training=training, rng=rng)


def model2_forward(m: Model2, x_a, x_b, training=False, rng=None):
    return m.forward(x_a, x_b, training=training, rng=rng)


def model1_loss(p, q, y_seizure, y_patient, lam: float = 0.9) -> float:
    """lam * BCE(seizure) + (1 - lam) * CCE(patient)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    if lam == 1.0:
        return bce_loss(p, y_seizure)
    if lam == 0.0:
        return cce_loss(q, y_patient)
    return lam * bce_loss(p, y_seizure) + (1.0 - lam) * cce_loss(q, y_patient)


def model2_loss(d, same, p, y_seizure, gamma: float = 0.6, margin: float = 1.0) -> float:
    """gamma * contrastive(d, same) + (1 - gamma) * BCE(primary)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    if gamma == 1.0:
        return contrastive_loss(d, same, margin)
    if gamma == 0.0:
        return bce_loss(p, y_seizure)
    return gamma * contrastive_loss(d, same, margin) + (1.0 - gamma) * bce_loss(p, y_seizure)


def build_model(name: str, seed: int = 0, **kwargs) -> _Model:
    if name == "model1":
        return Model1(seed=seed, **kwargs)
    if name == "model2":
        return Model2(seed=seed, **kwargs)
    raise ValueError(f"unknown model {name!r}; expected model1 or model2")


def load_model(path) -> _Model:
    tensors, meta = load_checkpoint(path)
    arch_id = meta.get("architecture_id")
    cfg = dict(meta["config"])
    cfg["input_shape"] = tuple(cfg["input_shape"])
    if arch_id == MODEL1_ARCH["id"]:
        model = Model1(**cfg)
    elif arch_id == MODEL2_ARCH["id"]:
        model = Model2(**cfg)
    else:
        raise ValueError(f"unknown architecture id {arch_id!r} in {path}")
    model.params.load(tensors)
    if meta.get("input_norm") is not None:
        model.set_input_norm(*meta["input_norm"])
    return model


def export_embeddings(model: _Model, features, subject_ids, labels, path) -> Path:
    """Write CSV rows (subject, label, e_1..e_k) for external t-SNE tools."""
    emb = model.embed(features)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "label"] + [f"e_{i + 1}" for i in range(emb.shape[1])])
        for s, y, row in zip(subject_ids, labels, emb):
            w.writerow([int(s), int(y)] + [repr(float(v)) for v in row])
    return path

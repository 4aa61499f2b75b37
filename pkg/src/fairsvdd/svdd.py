"""Deep SVDD: fixed-center one-class training and distance-based scoring."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, DataError
from .nn import (
    AdamState,
    DenseNet,
    adam_step,
    backward,
    forward,
    init_dense,
    load_checkpoint,
    predict,
    save_checkpoint,
    weight_decay_grads,
    weight_decay_term,
)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


CENTER_EPS = 0.1

# independent RNG streams; see batch_order()
STREAM_ENCODER_INIT = 0
STREAM_ENCODER_BATCHES = 1
STREAM_DISC_INIT = 2
STREAM_DISC_BATCHES = 3


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 5e-6
    lambda_fair: float = 1.0
    pretrain_epochs: int = 50
    adversarial_epochs: int = 100
    seed: int = 0
    encoder_hidden: list[int] = field(default_factory=lambda: [32])
    embed_dim: int = 16
    disc_hidden: list[int] = field(default_factory=lambda: [32, 64, 32])
    disc_input_norm: bool = True
    disc_learning_rate: float | None = 3e-3  # None: same as learning_rate
    disc_steps: int = 5  # discriminator updates per minibatch in the adversarial phase
    debug_checks: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lambda_fair < 0:
            raise ValueError("lambda_fair must be >= 0")
        if self.pretrain_epochs < 0 or self.adversarial_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.disc_steps < 1:
            raise ValueError("disc_steps must be >= 1")
        if self.disc_learning_rate is not None and not self.disc_learning_rate > 0:
            raise ValueError("disc_learning_rate must be > 0")
        if self.embed_dim < 1 or any(w < 1 for w in self.encoder_hidden + self.disc_hidden):
            raise ValueError("layer widths must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def stream_rng(seed: int, stream: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, epoch])


def batch_order(n: int, batch_size: int, seed: int, stream: int, epoch: int) -> list[np.ndarray]:
    """Minibatch index arrays for one epoch: a full shuffle, last batch may be short."""
    perm = stream_rng(seed, stream, epoch).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def init_encoder(in_dim: int, config: TrainConfig) -> DenseNet:
    sizes = [in_dim, *config.encoder_hidden, config.embed_dim]
    return init_dense(sizes, stream_rng(config.seed, STREAM_ENCODER_INIT), use_bias=False)


def init_center(encoder: DenseNet, train: Dataset | np.ndarray, eps: float = CENTER_EPS) -> np.ndarray:
    """Mean embedding of the training data, with small coordinates pushed to +-eps.

    The nudge only kicks in when the mean's norm is below ``eps``; each
    coordinate with magnitude below ``eps`` is then replaced by ``eps`` with
    the coordinate's sign (zero counts as positive).
    """
    x = train.features if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    if x.shape[0] == 0:
        raise DataError("cannot initialise the center from an empty dataset")
    c = predict(encoder, x).mean(axis=0)
    if np.linalg.norm(c) < eps:
        small = np.abs(c) < eps
        c[small] = np.where(c[small] < 0, -eps, eps)
    return c


def svdd_loss_and_grads(
    encoder: DenseNet, batch: np.ndarray, center: np.ndarray, alpha: float
) -> tuple[float, list[np.ndarray], np.ndarray, object]:
    """Mean squared distance to ``center`` plus weight decay.

    Returns ``(loss, param_grads, embeddings, tape)``; the tape lets callers
    add further gradients through the same forward pass.
    """
    emb, tape = forward(encoder, batch)
    if emb.shape[1] != center.shape[0]:
        raise ValueError(f"embedding dim {emb.shape[1]} != center dim {center.shape[0]}")
    diff = emb - center
    m = batch.shape[0]
    loss = float(np.sum(diff * diff)) / m + weight_decay_term(encoder, alpha)
    grads, _ = backward(encoder, tape, (2.0 / m) * diff)
    if alpha:
        grads = [g + d for g, d in zip(grads, weight_decay_grads(encoder, alpha))]
    return loss, grads, emb, tape


def svdd_loss(encoder: DenseNet, batch: np.ndarray, center: np.ndarray, alpha: float) -> float:
    emb = predict(encoder, batch)
    if emb.shape[1] != center.shape[0]:
        raise ValueError(f"embedding dim {emb.shape[1]} != center dim {center.shape[0]}")
    diff = emb - center
    return float(np.sum(diff * diff)) / batch.shape[0] + weight_decay_term(encoder, alpha)


def check_finite(value: float, what: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what} ({value}) at epoch {epoch}; lower the learning rate")


def check_params(net: DenseNet, what: str, epoch: int) -> None:
    # a last update can overflow even when every loss along the way was finite
    if not all(np.isfinite(p).all() for p in net.params()):
        raise NumericalError(f"non-finite {what} parameters after epoch {epoch}; lower the learning rate")


@dataclass
class SvddModel:
    encoder: DenseNet
    center: np.ndarray
    config: TrainConfig
    history: list[float] = field(default_factory=list)  # mean loss per epoch

    def embed(self, data: Dataset | np.ndarray) -> np.ndarray:
        x = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
        if x.shape[1] != self.encoder.in_dim:
            raise ValueError(f"data has {x.shape[1]} features, encoder expects {self.encoder.in_dim}")
        return predict(self.encoder, x)

    def score(self, data: Dataset | np.ndarray) -> np.ndarray:
        return score(self, data)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": "svdd", "center": self.center.tolist(), "config": self.config.to_dict(),
                "seed": self.config.seed, "history": self.history}
        save_checkpoint(path, {"encoder": self.encoder}, {**(extra or {}), **meta})


def score(model: SvddModel, data: Dataset | np.ndarray) -> np.ndarray:
    """Squared distance of each embedding from the center."""
    diff = model.embed(data) - model.center
    return np.sum(diff * diff, axis=1)


def run_svdd_epoch(
    encoder: DenseNet,
    opt: AdamState,
    x: np.ndarray,
    center: np.ndarray,
    config: TrainConfig,
    epoch: int,
) -> float:
    total = 0.0
    batches = batch_order(len(x), config.batch_size, config.seed, STREAM_ENCODER_BATCHES, epoch)
    for idx in batches:
        loss, grads, _, _ = svdd_loss_and_grads(encoder, x[idx], center, config.weight_decay)
        check_finite(loss, "SVDD loss", epoch)
        adam_step(encoder.params(), grads, opt)
        total += loss
    check_params(encoder, "encoder", epoch)
    return total / len(batches)


def train_svdd(train: Dataset, config: TrainConfig, epochs: int | None = None) -> SvddModel:
    """Plain Deep SVDD.

    ``epochs`` defaults to ``config.pretrain_epochs``; comparisons against the
    fair model pass ``pretrain_epochs + adversarial_epochs`` to equalise the
    number of encoder updates.
    """
    if len(train) == 0:
        raise DataError("cannot train on an empty dataset")
    epochs = config.pretrain_epochs if epochs is None else epochs
    encoder = init_encoder(train.n_dims, config)
    center = init_center(encoder, train)
    opt = AdamState.for_params(encoder.params(), lr=config.learning_rate)
    history = [run_svdd_epoch(encoder, opt, train.features, center, config, e) for e in range(epochs)]
    return SvddModel(encoder, center, config, history)


def load_svdd(path: str | Path) -> SvddModel:
    """Load the SVDD part of any checkpoint (plain or fair)."""
    nets, meta = load_checkpoint(path)
    return SvddModel(
        nets["encoder"],
        np.asarray(meta["center"], dtype=np.float64),
        TrainConfig.from_dict(meta["config"]),
        list(meta.get("history", [])),
    )


def _label_cell(ds: Dataset, i: int) -> str:
    return "" if ds.labels is None else str(int(ds.labels[i]))


def export_embeddings(model: SvddModel, data: Dataset, path: str | Path) -> None:
    emb = model.embed(data) if len(data) else np.zeros((0, model.center.shape[0]))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"e_{j}" for j in range(model.center.shape[0])] + ["psv", "label"])
        for i in range(len(data)):
            w.writerow([repr(float(v)) for v in emb[i]] + [str(int(data.psv[i])), _label_cell(data, i)])


def export_scores(scores: np.ndarray, data: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score", "psv", "label"])
        for i in range(len(data)):
            w.writerow([repr(float(scores[i])), str(int(data.psv[i])), _label_cell(data, i)])


def read_table(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Read an embeddings or scores CSV back as ``(values, psv, labels)``.

    ``values`` holds every column except psv/label; ``labels`` is ``None``
    when the label column is blank throughout.
    """
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    n_val = len(header) - 2
    vals = np.array([[float(c) for c in r[:n_val]] for r in rows], dtype=np.float64).reshape(len(rows), n_val)
    psv = np.array([int(r[n_val]) for r in rows], dtype=np.int64)
    raw = [r[n_val + 1] for r in rows]
    labels = None if all(c == "" for c in raw) else np.array([int(c) for c in raw], dtype=np.int64)
    return vals, psv, labels

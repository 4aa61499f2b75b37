"""Deep Fair SVDD: an encoder trained against a protected-attribute discriminator.

Training runs three phases:

1. ``pretrain``     - K epochs of plain SVDD updates on the encoder.
2. ``disc_init``    - K epochs fitting the discriminator on frozen embeddings.
3. ``adversarial``  - T epochs; per minibatch one discriminator step on the
   cross-entropy, then one encoder step on ``L_svdd - lambda * L_d`` with the
   discriminator frozen.

The center is fixed before phase 1 and never changes.  Encoder minibatches
come from the same RNG stream plain SVDD uses, so ``lambda = 0`` reproduces
``train_svdd(..., epochs=K + T)`` bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
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
)
from .svdd import (
    STREAM_DISC_BATCHES,
    STREAM_DISC_INIT,
    STREAM_ENCODER_BATCHES,
    SvddModel,
    TrainConfig,
    batch_order,
    check_finite,
    check_params,
    init_center,
    init_encoder,
    run_svdd_epoch,
    score,
    stream_rng,
    svdd_loss_and_grads,
)

LOGIT_CLAMP = 40.0


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Discriminator:
    """Logit network on embeddings, optionally behind a batch-normalizing input layer.

    With ``input_norm`` the embeddings are standardized per feature with the
    statistics of the batch being classified (no learnable affine), so the
    encoder cannot fool the discriminator by merely shrinking its output.
    Running statistics, updated on discriminator steps, serve
    :func:`disc_predict`.
    """

    net: DenseNet
    input_norm: bool = True
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def __post_init__(self):
        if self.net.out_dim != 1:
            raise ValueError("discriminator must output a single logit")
        k = self.net.in_dim
        if self.running_mean is None:
            self.running_mean = np.zeros(k)
        if self.running_var is None:
            self.running_var = np.ones(k)

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        x = np.asarray(embeddings, dtype=np.float64)
        if self.input_norm:
            x = (x - self.running_mean) / np.sqrt(self.running_var + BN_EPS)
        return predict(self.net, x)[:, 0]

    def checksum(self) -> int:
        return hash((self.net.checksum(), self.running_mean.tobytes(), self.running_var.tobytes()))

    def to_dict(self) -> dict:
        return {
            "input_norm": self.input_norm,
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
        }


def init_discriminator(
    embed_dim: int, hidden: list[int], rng: np.random.Generator, input_norm: bool = True
) -> Discriminator:
    return Discriminator(init_dense([embed_dim, *hidden, 1], rng, use_bias=True), input_norm=input_norm)


@dataclass
class _DiscCache:
    tape: object
    xhat: np.ndarray | None
    inv_std: np.ndarray | None
    mean: np.ndarray | None
    var: np.ndarray | None


def disc_forward(disc: Discriminator, emb: np.ndarray) -> tuple[np.ndarray, _DiscCache]:
    """Training-mode forward pass (batch statistics); returns logits [b]."""
    if not disc.input_norm:
        out, tape = forward(disc.net, emb)
        return out[:, 0], _DiscCache(tape, None, None, None, None)
    mean = emb.mean(axis=0)
    var = emb.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (emb - mean) * inv_std
    out, tape = forward(disc.net, xhat)
    return out[:, 0], _DiscCache(tape, xhat, inv_std, mean, var)


def disc_backward(
    disc: Discriminator, cache: _DiscCache, dlogits: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    grads, dx = backward(disc.net, cache.tape, dlogits[:, None])
    if disc.input_norm:
        # gradient through per-feature batch standardization
        dx = cache.inv_std * (dx - dx.mean(axis=0) - cache.xhat * np.mean(dx * cache.xhat, axis=0))
    return grads, dx


def update_running_stats(disc: Discriminator, cache: _DiscCache) -> None:
    if disc.input_norm:
        disc.running_mean *= 1.0 - BN_MOMENTUM
        disc.running_mean += BN_MOMENTUM * cache.mean
        disc.running_var *= 1.0 - BN_MOMENTUM
        disc.running_var += BN_MOMENTUM * cache.var


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def disc_predict(disc: Discriminator, embeddings: np.ndarray) -> np.ndarray:
    """Probability that each embedding belongs to psv group 1."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != disc.net.in_dim:
        raise ValueError(f"expected embeddings of shape [b, {disc.net.in_dim}], got {embeddings.shape}")
    return sigmoid(disc.logits(embeddings))


def _check_z(n: int, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != n:
        raise ValueError(f"{n} predictions but {z.shape[0]} psv values")
    if not np.isin(z, (0.0, 1.0)).all():
        raise ValueError("psv values must be 0 or 1")
    return z


def disc_loss_from_logits(logits: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits.

    Logits are clamped to +-40 inside the loss, so the gradient is zero
    beyond the clamp.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    z = _check_z(logits.shape[0], z)
    m = logits.shape[0]
    lc = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    # -[z log s(l) + (1-z) log(1-s(l))] = softplus(l) - z*l
    per = np.maximum(lc, 0.0) + np.log1p(np.exp(-np.abs(lc))) - z * lc
    grad = (sigmoid(lc) - z) / m
    grad[np.abs(logits) > LOGIT_CLAMP] = 0.0
    return float(per.sum()) / m, grad


def disc_loss(probs: np.ndarray, z: np.ndarray) -> float:
    """Cross-entropy of predicted probabilities against binary ``z``."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    _check_z(p.shape[0], z)
    with np.errstate(divide="ignore"):
        logits = np.log(p) - np.log1p(-p)
    return disc_loss_from_logits(logits, z)[0]


def adv_loss(l_svdd: float, l_d: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l_svdd - lam * l_d


def adversarial_grads(
    encoder: DenseNet,
    disc: Discriminator,
    batch: np.ndarray,
    z: np.ndarray,
    center: np.ndarray,
    alpha: float,
    lam: float,
) -> tuple[float, float, list[np.ndarray]]:
    """``(L_svdd, L_d, dL_adv/d encoder params)`` for one batch; the discriminator is only read."""
    l_svdd, g_svdd, emb, enc_tape = svdd_loss_and_grads(encoder, batch, center, alpha)
    logits, cache = disc_forward(disc, emb)
    l_d, dlogits = disc_loss_from_logits(logits, z)
    _, d_emb = disc_backward(disc, cache, dlogits)
    g_d, _ = backward(encoder, enc_tape, d_emb)
    grads = [gs - lam * gd for gs, gd in zip(g_svdd, g_d)]
    return l_svdd, l_d, grads


def disc_grads(disc: Discriminator, emb: np.ndarray, z: np.ndarray) -> tuple[float, list[np.ndarray], _DiscCache]:
    logits, cache = disc_forward(disc, emb)
    l_d, dlogits = disc_loss_from_logits(logits, z)
    grads, _ = disc_backward(disc, cache, dlogits)
    return l_d, grads, cache


def disc_step(disc: Discriminator, opt: AdamState, emb: np.ndarray, z: np.ndarray) -> float:
    """One discriminator update on a batch of (frozen) embeddings."""
    l_d, grads, cache = disc_grads(disc, emb, z)
    adam_step(disc.net.params(), grads, opt)
    update_running_stats(disc, cache)
    return l_d


@dataclass
class TraceRow:
    phase: str
    epoch: int
    l_svdd: float | None = None
    l_d: float | None = None
    l_adv: float | None = None


@dataclass
class FairSvddModel:
    svdd: SvddModel
    discriminator: Discriminator
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def encoder(self) -> DenseNet:
        return self.svdd.encoder

    @property
    def center(self) -> np.ndarray:
        return self.svdd.center

    def embed(self, data) -> np.ndarray:
        return self.svdd.embed(data)

    def score(self, data) -> np.ndarray:
        # the discriminator plays no part in scoring
        return score(self.svdd, data)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_checkpoint(
            path,
            {"encoder": self.svdd.encoder, "discriminator": self.discriminator.net},
            {
                **(extra or {}),
                "kind": "fair",
                "center": self.svdd.center.tolist(),
                "config": self.svdd.config.to_dict(),
                "seed": self.svdd.config.seed,
                "history": self.svdd.history,
                "trace": [vars(r) for r in self.trace],
                "discriminator": self.discriminator.to_dict(),
            },
        )


def load_fair(path: str | Path) -> FairSvddModel:
    nets, meta = load_checkpoint(path)
    if meta.get("kind") != "fair":
        raise ValueError(f"{path}: not a fair model checkpoint")
    svdd = SvddModel(
        nets["encoder"],
        np.asarray(meta["center"], dtype=np.float64),
        TrainConfig.from_dict(meta["config"]),
        list(meta.get("history", [])),
    )
    d = meta["discriminator"]
    disc = Discriminator(
        nets["discriminator"],
        input_norm=d["input_norm"],
        running_mean=np.asarray(d["running_mean"], dtype=np.float64),
        running_var=np.asarray(d["running_var"], dtype=np.float64),
    )
    return FairSvddModel(svdd, disc, [TraceRow(**r) for r in meta["trace"]])


def train_fair_svdd(train: Dataset, config: TrainConfig) -> FairSvddModel:
    if len(train) == 0:
        raise DataError("cannot train on an empty dataset")
    train.require_both_groups()
    x, z = train.features, train.psv.astype(np.float64)
    K, T, lam = config.pretrain_epochs, config.adversarial_epochs, config.lambda_fair

    encoder = init_encoder(train.n_dims, config)
    center = init_center(encoder, train)
    disc = init_discriminator(
        config.embed_dim, config.disc_hidden, stream_rng(config.seed, STREAM_DISC_INIT), config.disc_input_norm
    )
    enc_opt = AdamState.for_params(encoder.params(), lr=config.learning_rate)
    disc_lr = config.learning_rate if config.disc_learning_rate is None else config.disc_learning_rate
    disc_opt = AdamState.for_params(disc.net.params(), lr=disc_lr)
    trace: list[TraceRow] = []
    history: list[float] = []

    for e in range(K):
        l = run_svdd_epoch(encoder, enc_opt, x, center, config, e)
        history.append(l)
        trace.append(TraceRow("pretrain", e + 1, l_svdd=l))

    emb = predict(encoder, x)
    for e in range(K):
        batches = batch_order(len(x), config.batch_size, config.seed, STREAM_DISC_BATCHES, e)
        total = 0.0
        for idx in batches:
            l_d = disc_step(disc, disc_opt, emb[idx], z[idx])
            check_finite(l_d, "discriminator loss", e)
            total += l_d
        check_params(disc.net, "discriminator", e)
        trace.append(TraceRow("disc_init", e + 1, l_d=total / len(batches)))

    for t in range(T):
        e = K + t  # encoder batch stream continues where pretraining stopped
        batches = batch_order(len(x), config.batch_size, config.seed, STREAM_ENCODER_BATCHES, e)
        sums = np.zeros(3)
        for idx in batches:
            xb, zb = x[idx], z[idx]

            enc_sum = encoder.checksum() if config.debug_checks else None
            emb_b = predict(encoder, xb)
            for _ in range(config.disc_steps):
                disc_step(disc, disc_opt, emb_b, zb)
            if enc_sum is not None and encoder.checksum() != enc_sum:
                raise AssertionError("encoder changed during a discriminator update")

            disc_sum = disc.checksum() if config.debug_checks else None
            l_svdd, l_d, g_enc = adversarial_grads(encoder, disc, xb, zb, center, config.weight_decay, lam)
            l_adv = adv_loss(l_svdd, l_d, lam)
            check_finite(l_adv, "adversarial loss", e)
            adam_step(encoder.params(), g_enc, enc_opt)
            if disc_sum is not None and disc.checksum() != disc_sum:
                raise AssertionError("discriminator changed during an encoder update")
            sums += (l_svdd, l_d, l_adv)
        check_params(encoder, "encoder", e)
        check_params(disc.net, "discriminator", e)
        sums /= len(batches)
        history.append(float(sums[0]))
        trace.append(TraceRow("adversarial", t + 1, *map(float, sums)))

    return FairSvddModel(SvddModel(encoder, center, config, history), disc, trace)


TRACE_COLUMNS = ["epoch", "phase", "l_svdd", "l_d", "l_adv"]


def _cell(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def export_trace(trace: list[TraceRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.epoch, r.phase, _cell(r.l_svdd), _cell(r.l_d), _cell(r.l_adv)])


def svdd_trace(history: list[float]) -> list[TraceRow]:
    """Trace rows for a plain SVDD run (every epoch counts as ``pretrain``)."""
    return [TraceRow("pretrain", i + 1, l_svdd=l) for i, l in enumerate(history)]


def probe_accuracy(
    embeddings: np.ndarray,
    z: np.ndarray,
    seed: int = 0,
    hidden: tuple[int, ...] = (32, 64, 32),
    epochs: int = 100,
    lr: float = 1e-2,
    batch_size: int = 128,
) -> float:
    """Held-out accuracy of a fresh classifier predicting ``z`` from embeddings.

    The rows are split 50/50 (stratified by ``z``); the probe is fitted on
    standardized embeddings of one half and scored on the other.  Accuracy
    near the majority-class rate means the embeddings carry little PSV signal.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    z = np.asarray(z).astype(np.int64)
    rng = np.random.default_rng(seed)
    fit_idx, held_idx = [], []
    for g in (0, 1):
        idx = rng.permutation(np.flatnonzero(z == g))
        half = len(idx) // 2
        fit_idx.append(idx[:half])
        held_idx.append(idx[half:])
    fit_idx, held_idx = np.concatenate(fit_idx), np.concatenate(held_idx)
    if len(fit_idx) == 0 or len(held_idx) == 0:
        raise DataError("probe needs at least two instances")

    mu = emb[fit_idx].mean(axis=0)
    sd = emb[fit_idx].std(axis=0)
    sd[sd == 0] = 1.0
    xs = (emb - mu) / sd
    disc = init_discriminator(emb.shape[1], list(hidden), rng, input_norm=False)
    opt = AdamState.for_params(disc.net.params(), lr=lr)
    zf = z.astype(np.float64)
    for _ in range(epochs):
        perm = rng.permutation(fit_idx)
        for i in range(0, len(perm), batch_size):
            idx = perm[i : i + batch_size]
            disc_step(disc, opt, xs[idx], zf[idx])
    pred = disc.logits(xs[held_idx]) > 0
    return float(np.mean(pred == (z[held_idx] == 1)))


__all__ = [
    "Discriminator",
    "FairSvddModel",
    "TraceRow",
    "adv_loss",
    "adversarial_grads",
    "disc_loss",
    "disc_loss_from_logits",
    "disc_predict",
    "export_trace",
    "load_fair",
    "probe_accuracy",
    "sigmoid",
    "train_fair_svdd",
]


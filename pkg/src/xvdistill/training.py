"""Two-stage protocol: KL-pretrain the backbone, freeze it, then fit the heads by NLL."""

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .distributions import SMOOTH_EPS
from .model import (HEADS, AdamState, Batch, ModelState, adam_step, backward,
                    _run_backbone, _standardize, per_sample_nll, xavier_init)

log = logging.getLogger(__name__)

# stream tags for np.random.default_rng([seed, tag, ...])
_PRETRAIN, _HEADS = 1, 2


class ProtocolError(RuntimeError):
    """Training stages invoked out of order."""


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 32
    lr: float = 0.001
    weight_decay: float = 0.0005
    decoupled_weight_decay: bool = False
    head_loss_weights: tuple = (1.0, 1.0, 1.0)
    # None reuses `epochs`
    pretrain_epochs: int = None
    seed: int = 0
    shuffle: bool = True
    # optional Gaussian feature jitter; off by default
    feature_jitter: float = 0.0
    smooth_eps: float = SMOOTH_EPS

    def __post_init__(self):
        self.head_loss_weights = tuple(float(w) for w in self.head_loss_weights)
        if self.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("train.lr must be >= 0")
        if len(self.head_loss_weights) != 3:
            raise ValueError("train.head_loss_weights needs three entries")
        if self.pretrain_epochs is not None and self.pretrain_epochs < 0:
            raise ValueError("train.pretrain_epochs must be >= 0")

    @property
    def n_pretrain_epochs(self):
        return self.epochs if self.pretrain_epochs is None else self.pretrain_epochs

    def adam(self):
        return AdamState(lr=self.lr, weight_decay=self.weight_decay,
                         decoupled=self.decoupled_weight_decay)


class NLLReport(NamedTuple):
    scene: float
    image: float
    counts: float
    total: float


def records_to_batch(records, eps=SMOOTH_EPS):
    if not records:
        raise ValueError("no records")
    return Batch.from_arrays(
        np.stack([r.feature for r in records]),
        np.stack([r.ground.scene_dist for r in records]),
        np.stack([r.ground.image_dist for r in records]),
        np.stack([r.ground.counts for r in records]),
        eps,
    )


def fit_input_normalization(model, records):
    """Standardize features with per-dimension statistics of ``records``."""
    x = np.stack([r.feature for r in records])
    scale = x.std(axis=0)
    model.input_mean = x.mean(axis=0)
    model.input_scale = np.where(scale > 0, scale, 1.0)
    return model


def _minibatches(n, config, rng):
    order = rng.permutation(n) if config.shuffle else np.arange(n)
    for start in range(0, n, config.batch_size):
        yield order[start:start + config.batch_size]


def _jitter(batch, config, rng):
    if config.feature_jitter <= 0:
        return batch
    noisy = batch.features + config.feature_jitter * rng.standard_normal(batch.features.shape)
    return Batch(noisy, batch.log_scene, batch.log_image, batch.counts, batch.log_count_factorial)


# -- stage 1: backbone pretraining ---------------------------------------------

def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _xlogx(p):
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)


def _pretrain_pass(model, probes, x, targets, want_grad):
    """Mean KL(target || softmax(probe(backbone(x)))) summed over both label spaces."""
    shared, cache = _run_backbone(model, _standardize(model, x))
    n = x.shape[0]
    kl, grads = 0.0, {}
    d_shared = np.zeros_like(shared)
    for name, probe, p in zip(("probe_scene", "probe_image"), probes, targets):
        z, _ = probe.forward(shared)
        logq = _log_softmax(z)
        kl += float((_xlogx(p) - (p * logq).sum(axis=1)).mean())
        if want_grad:
            dz = (np.exp(logq) - p) / n
            d_shared += dz @ probe.weights
            grads[f"{name}.weights"] = dz.T @ shared
            grads[f"{name}.bias"] = dz.sum(axis=0)
    if want_grad:
        for i in range(len(model.backbone) - 1, -1, -1):
            inp, pre = cache[i]
            d_shared, grads[f"backbone.{i}.weights"], grads[f"backbone.{i}.bias"] = \
                model.backbone[i].backward(inp, pre, d_shared)
    return kl, grads


def pretrain_backbone(model, train_records, config, history=None):
    """Fit the backbone through two temporary softmax probes, then freeze it.

    Returns a new frozen model; the probes are discarded. If ``history`` is a
    list it receives the mean training KL before the first step and after
    every epoch.
    """
    if model.backbone_frozen:
        raise ProtocolError("backbone is already frozen")
    if not train_records:
        raise ValueError("pretraining needs a non-empty training set")
    model = model.copy()
    rng = np.random.default_rng([config.seed, _PRETRAIN])
    width = model.backbone[-1].d_out if model.backbone else model.input_dim
    k_scene, k_image = model.output_dims[:2]
    probes = [xavier_init((k_scene, width), rng, "identity"),
              xavier_init((k_image, width), rng, "identity")]

    x = np.stack([r.feature for r in train_records])
    targets = (np.stack([r.ground.scene_dist for r in train_records]),
               np.stack([r.ground.image_dist for r in train_records]))
    params = {}
    for i, layer in enumerate(model.backbone):
        params[f"backbone.{i}.weights"] = layer.weights
        params[f"backbone.{i}.bias"] = layer.bias
    for name, probe in zip(("probe_scene", "probe_image"), probes):
        params[f"{name}.weights"] = probe.weights
        params[f"{name}.bias"] = probe.bias

    record = history if history is not None else []
    record.append(_pretrain_pass(model, probes, x, targets, False)[0])
    adam = config.adam()
    for epoch in range(config.n_pretrain_epochs):
        erng = np.random.default_rng([config.seed, _PRETRAIN, epoch + 1])
        for idx in _minibatches(len(x), config, erng):
            xb = x[idx]
            if config.feature_jitter > 0:
                xb = xb + config.feature_jitter * erng.standard_normal(xb.shape)
            _, grads = _pretrain_pass(model, probes, xb, (targets[0][idx], targets[1][idx]), True)
            adam_step(adam, params, grads)
        record.append(_pretrain_pass(model, probes, x, targets, False)[0])
        log.info("pretrain epoch %d: KL %.6f", epoch + 1, record[-1])
    model.backbone_frozen = True
    model.seeds["pretrain"] = config.seed
    return model


# -- stage 2: head training -----------------------------------------------------

def evaluate_nll(model, records, weights=(1.0, 1.0, 1.0), eps=SMOOTH_EPS):
    if not records:
        raise ValueError("evaluate_nll needs at least one record")
    return _report(model, records_to_batch(records, eps), weights)


def _report(model, batch, weights):
    parts = per_sample_nll(model, batch).mean(axis=1)
    return NLLReport(*(float(p) for p in parts), float(np.dot(weights, parts)))


def train_heads(model, train_records, val_records, config):
    """Adam on the weighted mean NLL of the three heads; backbone must be frozen.

    Returns ``(model, history)``; history holds one dict per epoch with the
    per-head NLLs on the training and validation sets after that epoch.
    """
    if not model.backbone_frozen:
        raise ProtocolError("train_heads requires a frozen backbone; run pretrain_backbone first")
    if not train_records:
        raise ValueError("head training needs a non-empty training set")
    model = model.copy()
    weights = config.head_loss_weights
    train = records_to_batch(train_records, config.smooth_eps)
    val = records_to_batch(val_records, config.smooth_eps) if val_records else None
    adam = config.adam()
    history = []
    for epoch in range(config.epochs):
        erng = np.random.default_rng([config.seed, _HEADS, epoch + 1])
        for idx in _minibatches(len(train), config, erng):
            grads, _ = backward(model, _jitter(train.subset(idx), config, erng), weights)
            adam_step(adam, model, grads)
        row = {"epoch": epoch + 1}
        for prefix, batch in (("train", train), ("val", val)):
            rep = _report(model, batch, weights) if batch is not None else NLLReport(*[float("nan")] * 4)
            for h, v in zip(HEADS + ("total",), rep):
                row[f"{prefix}_{h}_nll"] = v
        history.append(row)
        log.info("epoch %d: train NLL %.6f, val NLL %.6f",
                 epoch + 1, row["train_total_nll"], row["val_total_nll"])
    model.seeds["train"] = config.seed
    return model, history


HISTORY_COLUMNS = ["epoch"] + [f"{s}_{h}_nll" for s in ("train", "val") for h in HEADS + ("total",)]


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_protocol(model, train_records, val_records, config, pretrain_history=None):
    """Standardize inputs on the training split, pretrain + freeze, then train heads."""
    model = fit_input_normalization(model.copy(), train_records)
    model = pretrain_backbone(model, train_records, config, pretrain_history)
    return train_heads(model, train_records, val_records, config)

"""Mini-batch SGD training with rank-loss snapshots.

The optimiser follows the common "heavy ball" form::

    g = dL/dW + weight_decay * W        (decay on conv/dense weights only)
    v = momentum * v + g
    W = W - lr * v

where ``L`` is the mean softmax cross-entropy of the batch.  The learning
rate is constant within an epoch and annealed between epochs from
``lr_initial`` (first epoch) to ``lr_final`` (last epoch).

Every epoch visits the training set in the order
``default_rng([seed, epoch]).permutation(n)`` and drops the last partial
batch, so runs that differ only in batch size see the same sample order.
"""

import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..diagnostics import DEFAULT_BATCH_CAP, near_rank_loss_many
from ..reports import csv_bytes
from .layers import BatchNorm

__all__ = [
    "TrainConfig",
    "EpochMetrics",
    "RankSnapshot",
    "ExperimentReport",
    "GradientCheckReport",
    "learning_rate",
    "softmax_cross_entropy",
    "evaluate",
    "train_run",
    "switch_batch_run",
    "gradient_check",
    "objective",
    "METRIC_COLUMNS",
]

SCHEDULES = ("cosine", "step", "constant")
METRIC_COLUMNS = ("epoch", "batch_size", "lr", "train_error", "test_error", "train_loss",
                  "test_loss", "batch_loss", "evaluated")


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe.

    ``snapshot_epochs`` lists the (0-based) epochs after which the rank
    diagnostics run; ``None`` means after the last epoch only.
    ``eval_every = k`` evaluates the full train and test sets after every
    ``k``-th epoch (``0``: only after the last epoch, which is always
    evaluated).
    """

    batch_size: int = 128
    epochs: int = 60
    momentum: float = 0.9
    lr_initial: float = 0.1
    lr_final: float = 1e-4
    schedule: str = "cosine"
    step_drops: int = 3
    weight_decay: float = 5e-4
    batchnorm: bool = True
    activation: str = "relu"
    seed: int = 0
    snapshot_epochs: tuple = None
    thresholds: tuple = (1e-4, 1e-5)
    snapshot_cap: int = DEFAULT_BATCH_CAP
    snapshot_mode: str = "eval"
    rank_modes: object = "all"
    eval_every: int = 1
    eval_batch: int = 2000

    def validate(self, n_train=None):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if n_train is not None and self.batch_size > n_train:
            raise ValueError(f"batch_size {self.batch_size} exceeds training set size {n_train}")
        if self.lr_initial < 0 or self.lr_final < 0 or self.lr_final > self.lr_initial:
            raise ValueError("need 0 <= lr_final <= lr_initial")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.snapshot_mode not in ("eval", "train"):
            raise ValueError("snapshot_mode must be 'eval' or 'train'")
        if any(not t > 0 for t in self.thresholds):
            raise ValueError("thresholds must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("need 0 <= momentum < 1 and weight_decay >= 0")
        if self.step_drops < 1:
            raise ValueError("step_drops must be >= 1")
        return self

    def to_dict(self):
        d = asdict(self)
        d["snapshot_epochs"] = None if self.snapshot_epochs is None else list(self.snapshot_epochs)
        d["thresholds"] = list(self.thresholds)
        return d


def learning_rate(cfg, epoch):
    """Learning rate used throughout ``epoch`` (0-based)."""
    hi, lo, total = cfg.lr_initial, cfg.lr_final, cfg.epochs
    if cfg.schedule == "constant" or total == 1:
        return hi
    if cfg.schedule == "cosine":
        return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * epoch / (total - 1)))
    # step: k equal drops, geometric, ending exactly at lr_final
    k = cfg.step_drops
    segment = min(k, epoch * (k + 1) // total)
    if hi == 0.0:
        return 0.0
    return hi * (lo / hi) ** (segment / k)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``(batch, classes)`` logits and its gradient."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(len(labels))
    loss = float(np.mean(logsum - z[idx, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[idx, labels] -= 1.0
    grad /= len(labels)
    return loss, grad


def _weights(net):
    """Parameters subject to weight decay (conv/dense kernels)."""
    return [(name, layer, key) for name, layer, key in net.parameters()
            if key == "W" and not isinstance(layer, BatchNorm)]


def _decay_penalty(net, weight_decay):
    if weight_decay == 0.0:
        return 0.0
    return 0.5 * weight_decay * sum(float(np.sum(layer.params[k] ** 2))
                                    for _, layer, k in _weights(net))


def evaluate(net, images, labels, batch=2000):
    """``(mean loss, error %)`` in eval mode; ``images`` already in network layout."""
    total, wrong = 0.0, 0
    for lo in range(0, len(labels), batch):
        logits, _ = net(images[lo:lo + batch], train=False)
        y = labels[lo:lo + batch]
        loss, _ = softmax_cross_entropy(logits, y)
        total += loss * len(y)
        wrong += int(np.count_nonzero(logits.argmax(axis=1) != y))
    return total / len(labels), 100.0 * wrong / len(labels)


@dataclass
class EpochMetrics:
    epoch: int
    batch_size: int
    lr: float
    train_error: float
    test_error: float
    train_loss: float
    test_loss: float
    batch_loss: float
    evaluated: bool

    def row(self):
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class RankSnapshot:
    epoch: int
    batch_size: int
    samples: int
    mode: str
    reports: list

    def report_for(self, t_th):
        for r in self.reports:
            if r.threshold == t_th:
                return r
        raise KeyError(t_th)

    def to_dict(self):
        return {"epoch": self.epoch, "batch_size": self.batch_size, "samples": self.samples,
                "mode": self.mode, "reports": [r.to_dict() for r in self.reports]}


@dataclass
class ExperimentReport:
    """Per-epoch metrics, rank snapshots and the configuration that produced them."""

    config: dict
    network: dict
    n_params: int
    epochs: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    diverged: bool = False
    switch: dict = None
    dataset: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def final(self):
        """Metrics of the last evaluated epoch."""
        done = [e for e in self.epochs if e.evaluated]
        if not done:
            raise ValueError("no evaluated epoch in report")
        return done[-1]

    def s_z_total(self, t_th, epoch=None):
        """``S_z_total`` at ``t_th`` from the last snapshot (or the one at ``epoch``)."""
        snaps = [s for s in self.snapshots if epoch is None or s.epoch == epoch]
        if not snaps:
            raise ValueError("no rank snapshot available")
        return snaps[-1].report_for(t_th).s_z_total

    def metrics_csv(self):
        return csv_bytes(METRIC_COLUMNS, [e.row() for e in self.epochs])

    def to_dict(self, timing=False):
        d = {"config": self.config, "network": self.network, "n_params": self.n_params,
             "epochs": [asdict(e) for e in self.epochs],
             "snapshots": [s.to_dict() for s in self.snapshots],
             "diverged": self.diverged, "switch": self.switch, "dataset": self.dataset}
        if timing:
            d["wall_clock"] = self.wall_clock
        return d


class _MetricsStream:
    """Append-only CSV of epoch rows, flushed after every epoch."""

    def __init__(self, path):
        self.path = path
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "wb") as fh:
                fh.write(csv_bytes(METRIC_COLUMNS, []))

    def append(self, metrics):
        if self.path is None:
            return
        row = csv_bytes(METRIC_COLUMNS, [metrics.row()]).split(b"\r\n", 1)[1]
        with open(self.path, "ab") as fh:
            fh.write(row)
            fh.flush()


def _snapshot(net, images, idx, cfg, epoch, bs):
    x = images[idx]
    saved = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in net.batchnorm_layers()]
    _, acts = net(x, train=(cfg.snapshot_mode == "train"), capture=True)
    for bn, (mean, var) in zip(net.batchnorm_layers(), saved):
        bn.running_mean, bn.running_var = mean, var
    ids = [f"hidden{i}" for i in range(len(acts))]
    reports = near_rank_loss_many(acts, cfg.thresholds, modes=cfg.rank_modes,
                                  batch_cap=cfg.snapshot_cap, seed=cfg.seed, layer_ids=ids)
    return RankSnapshot(epoch, bs, len(idx), cfg.snapshot_mode, reports)


def _dataset_info(ds):
    return {"split": ds.split, "count": len(ds), "provenance": ds.provenance}


def _train(net, train, test, cfg, batch_for_epoch, metrics_path=None, switch=None):
    start = time.perf_counter()
    cfg.validate(len(train))
    if net.options.get("batchnorm", True) != cfg.batchnorm or \
            net.options.get("activation", "relu") != cfg.activation:
        raise ValueError("network options do not match TrainConfig batchnorm/activation")
    for e in range(cfg.epochs):
        if batch_for_epoch(e) > len(train):
            raise ValueError(f"batch size {batch_for_epoch(e)} exceeds training set size")

    x_train = np.ascontiguousarray(net.prepare(train.images))
    x_test = np.ascontiguousarray(net.prepare(test.images))
    y_train, y_test = train.labels, test.labels
    params = net.parameters()
    decayed = {name for name, _, _ in _weights(net)}
    velocity = {name: np.zeros_like(layer.params[key]) for name, layer, key in params}
    snapshot_at = {cfg.epochs - 1} if cfg.snapshot_epochs is None else set(cfg.snapshot_epochs)

    report = ExperimentReport(config=cfg.to_dict(), network=net.describe(),
                              n_params=net.n_params(), switch=switch,
                              dataset={"train": _dataset_info(train), "test": _dataset_info(test)})
    stream = _MetricsStream(metrics_path)
    n = len(y_train)
    for epoch in range(cfg.epochs):
        bs = batch_for_epoch(epoch)
        lr = learning_rate(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for b in range(n // bs):
            idx = order[b * bs:(b + 1) * bs]
            logits, _ = net(x_train[idx], train=True)
            loss, grad = softmax_cross_entropy(logits, y_train[idx])
            if not np.isfinite(loss):
                report.diverged = True
                break
            losses.append(loss)
            net.backward(grad)
            for name, layer, key in params:
                g = layer.grads[key]
                if name in decayed and cfg.weight_decay:
                    g = g + cfg.weight_decay * layer.params[key]
                v = velocity[name]
                v *= cfg.momentum
                v += g
                layer.params[key] -= lr * v
        last = epoch == cfg.epochs - 1
        evaluated = not report.diverged and (
            last or (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0))
        nan = float("nan")
        tr_loss = tr_err = te_loss = te_err = nan
        if evaluated:
            with np.errstate(over="ignore", invalid="ignore"):
                tr_loss, tr_err = evaluate(net, x_train, y_train, cfg.eval_batch)
                te_loss, te_err = evaluate(net, x_test, y_test, cfg.eval_batch)
            if not (np.isfinite(tr_loss) and np.isfinite(te_loss)):
                report.diverged = True
        metrics = EpochMetrics(epoch, bs, lr, tr_err, te_err, tr_loss, te_loss,
                               float(np.mean(losses)) if losses else nan, evaluated)
        report.epochs.append(metrics)
        stream.append(metrics)
        if report.diverged:
            break
        if epoch in snapshot_at:
            idx = order[:min(bs, cfg.snapshot_cap)]
            report.snapshots.append(_snapshot(net, x_train, idx, cfg, epoch, bs))
    report.wall_clock = time.perf_counter() - start
    return report


def train_run(net, train, test, cfg, metrics_path=None):
    """Train ``net`` in place with ``cfg`` and return an :class:`ExperimentReport`.

    A non-finite batch loss stops training; the report then has
    ``diverged=True`` and holds the epochs completed so far.
    ``metrics_path``, when given, receives one CSV row per finished epoch.
    """
    return _train(net, train, test, cfg, lambda e: cfg.batch_size, metrics_path)


def switch_batch_run(net, train, test, cfg_large, switch_epoch, small_bs, metrics_path=None):
    """Train with ``cfg_large.batch_size`` before ``switch_epoch`` and ``small_bs`` from then on.

    Learning-rate schedule, momentum buffers and data order continue
    unchanged across the switch.
    """
    if not 0 <= switch_epoch < cfg_large.epochs:
        raise ValueError("need 0 <= switch_epoch < epochs")
    if small_bs > cfg_large.batch_size or small_bs < 1:
        raise ValueError("small_bs must be in [1, large batch size]")
    switch = {"large_batch": cfg_large.batch_size, "small_batch": small_bs,
              "switch_epoch": switch_epoch}
    return _train(net, train, test, cfg_large,
                  lambda e: cfg_large.batch_size if e < switch_epoch else small_bs,
                  metrics_path, switch)


@dataclass
class GradientCheckReport:
    """Analytic vs central-difference gradients, per parameter tensor.

    ``rel_error[name] = ||analytic - numeric|| / max(||analytic||, ||numeric||)``
    (Euclidean norms over the checked entries).
    """

    rel_error: dict
    abs_error: dict
    checked: dict
    eps: float

    @property
    def max_rel_error(self):
        return max(self.rel_error.values()) if self.rel_error else 0.0

    def passed(self, tolerance):
        return self.max_rel_error <= tolerance

    def to_dict(self):
        return asdict(self)


def objective(net, x, labels, weight_decay=0.0, train=True):
    """Mean cross-entropy plus ``weight_decay / 2 * sum ||W||^2``."""
    logits, _ = net(x, train=train)
    loss, grad = softmax_cross_entropy(logits, labels)
    return loss + _decay_penalty(net, weight_decay), grad


def gradient_check(net, batch, labels, weight_decay=0.0, eps=1e-6, max_entries=None, seed=0):
    """Compare backprop gradients with central finite differences.

    The loss is evaluated in train mode (batch statistics).  Batch-norm
    running statistics are restored afterwards.  ``max_entries`` limits the
    number of randomly chosen entries checked per parameter tensor.
    """
    x = net.prepare(batch)
    labels = np.asarray(labels)
    saved = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in net.batchnorm_layers()]
    _, grad = objective(net, x, labels, weight_decay)
    net.backward(grad)
    decayed = {name for name, _, _ in _weights(net)}
    analytic = {}
    for name, layer, key in net.parameters():
        g = layer.grads[key].copy()
        if name in decayed and weight_decay:
            g += weight_decay * layer.params[key]
        analytic[name] = g

    rng = np.random.default_rng(seed)
    rel, absolute, checked = {}, {}, {}
    for name, layer, key in net.parameters():
        p = layer.params[key]
        flat = p.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(entries))
        for j, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = objective(net, x, labels, weight_decay)
            flat[i] = orig - eps
            down, _ = objective(net, x, labels, weight_decay)
            flat[i] = orig
            num[j] = (up - down) / (2.0 * eps)
        ana = analytic[name].reshape(-1)[entries]
        diff = float(np.linalg.norm(ana - num))
        scale = max(float(np.linalg.norm(ana)), float(np.linalg.norm(num)))
        rel[name] = diff / scale if scale > 0 else diff
        absolute[name] = float(np.max(np.abs(ana - num)))
        checked[name] = int(len(entries))
    for bn, (mean, var) in zip(net.batchnorm_layers(), saved):
        bn.running_mean, bn.running_var = mean, var
    return GradientCheckReport(rel, absolute, checked, eps)

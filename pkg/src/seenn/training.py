"""Surrogate-gradient BPTT with the per-timestep (TET) cross-entropy loss."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import batches
from .numerics import ConfigError, Tensor
from .snn import TimestepOutputs, forward_temporal
from .surrogate import SurrogateConfig, heaviside_surrogate_backward  # noqa: F401  (re-export)

log = logging.getLogger(__name__)

TET = "tet"
LAST_STEP = "last"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    T: int = 4
    loss_mode: str = TET
    seed: int = 0
    candidates: tuple | None = None   # TET timesteps; defaults to 1..T

    def __post_init__(self):
        if self.epochs < 1 or self.T < 1:
            raise ConfigError("epochs and T must be >= 1")
        if self.loss_mode not in (TET, LAST_STEP):
            raise ConfigError(f"loss_mode must be {TET!r} or {LAST_STEP!r}")
        if self.candidates is not None:
            self.candidates = tuple(int(t) for t in self.candidates)

    def timesteps(self):
        return self.candidates or tuple(range(1, self.T + 1))


def unroll(net, x, T):
    """Differentiable T-step forward. Returns accumulated-output tensors per step."""
    net.reset_states()
    encoded = net.encode(x)
    accumulated, total = [], None
    for t in range(T):
        raw = net.step(encoded)
        total = raw if total is None else total + raw
        accumulated.append(total * (1.0 / (t + 1)))
    return accumulated


def tet_loss(outputs, labels, candidates):
    """Mean over candidate timesteps of the cross-entropy at the accumulated output.

    ``outputs`` is either a list of per-step accumulated tensors (training) or a
    :class:`TimestepOutputs`.
    """
    if isinstance(outputs, TimestepOutputs):
        outputs = [Tensor(outputs.accumulated[:, t]) for t in range(outputs.T)]
    candidates = list(candidates)
    if not candidates:
        raise ConfigError("candidate set is empty")
    T = len(outputs)
    for t in candidates:
        if not 1 <= t <= T:
            raise ConfigError(f"candidate timestep {t} outside [1, {T}]")
    loss = None
    for t in candidates:
        ce = nx.cross_entropy(outputs[t - 1], labels)
        loss = ce if loss is None else loss + ce
    return loss * (1.0 / len(candidates))


def timestep_accuracy(net, data, T, batch_size=256):
    """Accuracy of the accumulated prediction at every t in 1..T."""
    correct = np.zeros(T)
    net.eval()
    for idx in batches(len(data), batch_size):
        out = forward_temporal(net, data.images[idx], T)
        pred = out.accumulated.argmax(axis=2)
        correct += (pred == data.labels[idx][:, None]).sum(axis=0)
    return correct / len(data)


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)

    def write_csv(self, path, T):
        write_metrics_csv(path, self.metrics, ["epoch", "loss", "lr"] +
                          [f"acc_t{t}" for t in range(1, T + 1)])


def write_metrics_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run_epochs(net, params, data, cfg, batch_loss, val=None, on_epoch=None):
    """Shared SGD + cosine loop. ``batch_loss(x, y) -> scalar Tensor``."""
    opt = nx.SGD(params, cfg.lr0, cfg.momentum, cfg.weight_decay)
    gen = np.random.default_rng(cfg.seed)
    rows = []
    for epoch in range(cfg.epochs):
        opt.lr = nx.cosine_lr(epoch, cfg.epochs, cfg.lr0)
        net.train()
        losses = []
        for idx in batches(len(data), cfg.batch_size, gen):
            opt.zero_grad()
            loss = batch_loss(data.images[idx], data.labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(value)
        nx.get_tape().clear()
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.lr}
        if on_epoch is not None:
            row.update(on_epoch(val if val is not None else data))
        log.info("epoch %d %s", epoch, row)
        rows.append(row)
    net.eval()
    return rows


def train(net, data, cfg, val=None):
    """Train a spiking network in place; returns per-epoch metrics."""
    cands = cfg.timesteps() if cfg.loss_mode == TET else (cfg.T,)

    def batch_loss(x, y):
        return tet_loss(unroll(net, x, cfg.T), y, cands)

    def on_epoch(ds):
        acc = timestep_accuracy(net, ds, cfg.T)
        return {f"acc_t{t + 1}": float(a) for t, a in enumerate(acc)}

    rows = run_epochs(net, list(net.parameters()), data, cfg, batch_loss, val, on_epoch)
    return TrainResult(rows)


def config_dict(cfg):
    return asdict(cfg)

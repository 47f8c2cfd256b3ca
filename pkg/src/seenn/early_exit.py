"""Confidence-thresholded early exit and the averaged-earliest-timestep metrics."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, Tensor
from .snn import first_macs, forward_temporal


@dataclass
class ExitConfig:
    alpha: float
    candidates: tuple

    def __post_init__(self):
        self.candidates = tuple(int(t) for t in self.candidates)
        if not self.candidates:
            raise ConfigError("candidate timesteps must be non-empty")
        if any(b <= a for a, b in zip(self.candidates, self.candidates[1:])):
            raise ConfigError(f"candidates must be strictly increasing: {self.candidates}")
        if self.candidates[0] < 1:
            raise ConfigError("candidate timesteps start at 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")

    @classmethod
    def every_step(cls, alpha, T):
        return cls(alpha, tuple(range(1, T + 1)))


@dataclass(frozen=True)
class ExitDecision:
    sample: int
    exit_t: int
    predicted: int
    confidence: float
    correct: bool | None


@dataclass
class ExitResult:
    """Per-sample exit records in array form."""
    exit_t: np.ndarray
    predicted: np.ndarray
    confidence: np.ndarray
    logits: np.ndarray          # accumulated output at the exit step
    correct: np.ndarray | None = None

    def __len__(self):
        return len(self.exit_t)

    @property
    def avg_t(self):
        return float(self.exit_t.mean())

    @property
    def accuracy(self):
        if self.correct is None:
            raise ValueError("labels were not supplied")
        return float(self.correct.mean())

    def composition(self, candidates):
        return {t: int((self.exit_t == t).sum()) for t in candidates}

    def decisions(self):
        for i in range(len(self)):
            yield ExitDecision(i, int(self.exit_t[i]), int(self.predicted[i]),
                               float(self.confidence[i]),
                               None if self.correct is None else bool(self.correct[i]))

    @staticmethod
    def concat(parts):
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        correct = None if parts[0].correct is None else cat("correct")
        return ExitResult(cat("exit_t"), cat("predicted"), cat("confidence"), cat("logits"), correct)


def confidence(logits):
    """Maximum softmax probability along the last axis."""
    z = np.asarray(logits)
    if z.shape[-1] < 2:
        raise ConfigError("confidence needs at least two classes")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).max(axis=-1)


def run_with_exits(net, x, T_max, should_exit, trace=None):
    """Shared masked temporal loop.

    ``should_exit(t, acc, active)`` returns a boolean mask over the active
    samples given their accumulated logits at 1-based step ``t``. Exited samples
    are dropped from all later computation. Every sample exits by ``T_max``.
    Returns ``(exit_t, logits_at_exit)``.
    """
    with nx.no_grad():
        net.reset_states()
        encoded = net.encode(x)
        N = encoded.shape[0]
        M = net.arch.n_classes
        exit_t = np.zeros(N, dtype=np.int64)
        at_exit = np.zeros((N, M), dtype=encoded.data.dtype)
        active = np.arange(N)
        total = np.zeros((N, M), dtype=encoded.data.dtype)
        for t in range(1, T_max + 1):
            if trace is not None:
                first_macs(trace, net, active.size)
            total = total + net.step(encoded, trace).data
            acc = total / t
            done = np.ones(active.size, dtype=bool) if t == T_max else should_exit(t, acc, active)
            if done.any():
                exit_t[active[done]] = t
                at_exit[active[done]] = acc[done]
                keep = np.flatnonzero(~done)
                if keep.size == 0:
                    break
                active, total = active[keep], total[keep]
                encoded = Tensor(encoded.data[keep])
                net.compact(keep)
    return exit_t, at_exit


def infer_seenn1(net, x, cfg, labels=None, trace=None):
    """Exit each sample at the first candidate step whose confidence reaches alpha."""
    cands = set(cfg.candidates)
    T_max = cfg.candidates[-1]

    def should_exit(t, acc, active):
        if t not in cands:
            return np.zeros(acc.shape[0], dtype=bool)
        return confidence(acc) >= cfg.alpha

    exit_t, logits = run_with_exits(net, x, T_max, should_exit, trace)
    pred = np.argmax(logits, axis=1)
    correct = None if labels is None else pred == np.asarray(labels)
    return ExitResult(exit_t, pred, confidence(logits), logits, correct)


def infer_dataset(net, data, cfg, batch_size=256, trace=None):
    parts = []
    for i in range(0, len(data), batch_size):
        parts.append(infer_seenn1(net, data.images[i:i + batch_size], cfg,
                                  data.labels[i:i + batch_size], trace))
    return ExitResult.concat(parts)


# correctness matrices and AET ------------------------------------------------------------

def correctness_matrix(outputs, labels):
    """Boolean [N, T]: accumulated prediction at step t is correct."""
    return outputs.accumulated.argmax(axis=2) == np.asarray(labels)[:, None]


def dataset_outputs(net, data, T, batch_size=256):
    """Full-T accumulated outputs for a dataset, as ``(accumulated, correctness)``."""
    accs = []
    for i in range(0, len(data), batch_size):
        accs.append(forward_temporal(net, data.images[i:i + batch_size], T).accumulated)
    acc = np.concatenate(accs)
    return acc, acc.argmax(axis=2) == data.labels[:, None]


def aet(matrix):
    """Averaged earliest timestep, computed with the set-cardinality formula.

    ``|C_t|`` is the number of samples correct at step t and ``|W|`` the number
    wrong at the final step.
    """
    a = np.asarray(matrix, dtype=bool)
    N, T = a.shape
    if N < 1:
        raise ConfigError("need at least one sample")
    c = a.sum(axis=0).astype(np.int64)
    wrong = N - c[-1]
    total = int(c[0]) + T * int(wrong)
    for t in range(2, T + 1):
        total += t * int(c[t - 1] - c[t - 2])
    return total / N


def empirical_aet(matrix):
    """Mean over samples of the first correct step (T when never correct)."""
    a = np.asarray(matrix, dtype=bool)
    N, T = a.shape
    if N < 1:
        raise ConfigError("need at least one sample")
    first = np.where(a.any(axis=1), a.argmax(axis=1) + 1, T)
    return int(first.sum()) / N


def write_correctness(path, matrix):
    """Bitset file: u32 N, u32 T (little-endian), then row-major bits, LSB first."""
    a = np.asarray(matrix, dtype=bool)
    N, T = a.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", N, T))
        fh.write(np.packbits(a.ravel(), bitorder="little").tobytes())


def read_correctness(path):
    buf = Path(path).read_bytes()
    N, T = struct.unpack_from("<II", buf, 0)
    need = (N * T + 7) // 8
    if len(buf) - 8 != need:
        raise ValueError(f"{path}: expected {need} payload bytes, found {len(buf) - 8}")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, offset=8), bitorder="little")
    return bits[:N * T].reshape(N, T).astype(bool)


# alpha sweep -------------------------------------------------------------------------------

@dataclass
class SweepRow:
    alpha: float
    avg_t: float
    accuracy: float
    histogram: dict

    def as_dict(self, candidates):
        d = {"alpha": self.alpha, "avg_t": self.avg_t, "accuracy": self.accuracy}
        d.update({f"n_exit_t{t}": self.histogram[t] for t in candidates})
        return d


def sweep_alpha(net, data, alphas, candidates, batch_size=256):
    alphas = [float(a) for a in alphas]
    if alphas != sorted(alphas):
        raise ConfigError("alphas must be sorted ascending")
    rows = []
    for a in alphas:
        res = infer_dataset(net, data, ExitConfig(a, candidates), batch_size)
        rows.append(SweepRow(a, res.avg_t, res.accuracy, res.composition(candidates)))
    return rows


def sweep_from_dumps(matrix, conf, alphas, candidates):
    """Recompute a sweep from a correctness matrix and per-step confidences."""
    a = np.asarray(matrix, dtype=bool)
    conf = np.asarray(conf)
    idx = np.asarray(candidates) - 1
    rows = []
    for alpha in alphas:
        hit = conf[:, idx] >= alpha
        hit[:, -1] = True
        exit_t = np.asarray(candidates)[hit.argmax(axis=1)]
        correct = a[np.arange(len(a)), exit_t - 1]
        rows.append(SweepRow(float(alpha), float(exit_t.mean()), float(correct.mean()),
                             {t: int((exit_t == t).sum()) for t in candidates}))
    return rows


def sweep_header(candidates):
    return ["alpha", "avg_t", "accuracy"] + [f"n_exit_t{t}" for t in candidates]


def write_sweep(csv_path, json_path, rows, candidates):
    header = sweep_header(candidates)
    records = [r.as_dict(candidates) for r in rows]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            w.writerow([repr(rec[k]) if isinstance(rec[k], float) else rec[k] for k in header])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"candidates": list(candidates), "rows": records}, fh, indent=2)
            fh.write("\n")

"""Learned timestep selection: a small policy network trained by exact policy gradient.

The policy maps an input to a categorical distribution ``v`` over candidate
timestep counts. Because every candidate's accumulated output is available
from a single backbone unroll, the expected reward is computed exactly rather
than sampled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import batches
from .early_exit import ExitResult, run_with_exits
from .efficiency import static_ratio, total_static_macs
from .numerics import ConfigError, Tensor
from .snn import ArchConfig, Network, ReLU, load_network, network_header, write_checkpoint
from .training import TrainingDiverged, unroll, write_metrics_csv

MAX_OP_RATIO = 0.02


def default_policy_arch(backbone, n_candidates, max_ratio=MAX_OP_RATIO, hidden=0, downsample=0):
    """A small analog network of the backbone's kind on an average-pooled input.

    ``downsample=0`` pools by 2 when the input allows it. For dense backbones
    ``hidden=0`` picks the largest width that keeps the policy within
    ``max_ratio`` of one backbone timestep.
    """
    arch = backbone.arch
    C, H, W = arch.in_shape
    f = downsample or arch.downsample * (2 if (H // arch.downsample) % 2 == 0
                                         and (W // arch.downsample) % 2 == 0 else 1)
    if arch.kind == "resnet":
        return ArchConfig(kind="resnet", in_shape=arch.in_shape, n_classes=n_candidates,
                          stem_channels=hidden or 2, stages=((hidden or 2, 1),),
                          batch_norm=True, downsample=f)
    if not hidden:
        budget = max_ratio * total_static_macs(backbone)
        n_in = C * (H // f) * (W // f)
        hidden = max(1, int(budget // (n_in + n_candidates)))
    return ArchConfig(kind="mlp", in_shape=arch.in_shape, n_classes=n_candidates,
                      hidden=(hidden,), batch_norm=True, downsample=f)


class TimestepPolicy:
    def __init__(self, arch, candidates, beta=1.0, backbone=None, max_ratio=MAX_OP_RATIO):
        self.candidates = tuple(int(t) for t in candidates)
        if not self.candidates or any(b <= a for a, b in zip(self.candidates, self.candidates[1:])):
            raise ConfigError(f"candidates must be non-empty and increasing: {self.candidates}")
        if arch.n_classes != len(self.candidates):
            raise ConfigError("policy output width must equal the number of candidates")
        if not beta > 0:
            raise ConfigError("beta must be positive")
        self.beta = float(beta)
        self.net = Network(arch, ReLU, kind="policy")
        for name, m in self.net.modules():
            if hasattr(m, "spiking_input"):
                m.name = f"policy.{name}"
        self.ratio = None
        if backbone is not None:
            self.ratio = static_ratio(self.net, backbone)
            if self.ratio > max_ratio:
                raise ConfigError(f"policy network costs {self.ratio:.2%} of the backbone "
                                  f"(limit {max_ratio:.0%})")

    def parameters(self):
        return self.net.parameters()

    def logits(self, x, trace=None):
        return self.net(x, trace)


@dataclass
class PolicyOutput:
    v: np.ndarray      # N, n
    z: np.ndarray      # N, n one-hot


def policy_forward(x, policy, sample=False, gen=None, trace=None):
    """Probabilities over candidates and a one-hot action (sampled or argmax)."""
    with nx.no_grad():
        logits = policy.logits(x, trace).data
    v = nx._softmax_np(logits)
    N, n = v.shape
    if sample:
        gen = gen or nx.rng()
        cum = np.cumsum(v, axis=1)
        u = gen.random((N, 1))
        k = np.minimum((u > cum).sum(axis=1), n - 1)
    else:
        k = np.argmax(v, axis=1)
    z = np.zeros_like(v)
    z[np.arange(N), k] = 1.0
    return PolicyOutput(v, z)


def reward(correct, t_k, beta):
    """``2**-t_k`` for a correct prediction, ``-beta`` otherwise (broadcasts)."""
    correct = np.asarray(correct, dtype=bool)
    return np.where(correct, np.power(2.0, -np.asarray(t_k, dtype=np.float64)), -float(beta))


def reward_matrix(correct, candidates, beta):
    """Rewards ``R[i, k]`` for selecting candidate ``k`` given correctness ``[N, n]``."""
    return reward(correct, np.asarray(candidates)[None, :], beta)


def expected_reward_objective(logits, R):
    """Scalar whose gradient is the exact policy gradient, batch-averaged.

    Each candidate contributes ``R_k * v_k * grad log v_k`` with the weight
    ``R_k * v_k`` held constant, which sums to ``grad E[R]``.
    """
    logv = nx.log_softmax(logits)
    w = np.asarray(R) * np.exp(logv.data)
    return (logv * Tensor(w)).sum() * (1.0 / logits.shape[0])


def candidate_correctness(accumulated, labels, candidates):
    """``[N, n]`` correctness at each candidate from per-step accumulated tensors/arrays."""
    cols = []
    for t in candidates:
        a = accumulated[t - 1]
        a = a.data if isinstance(a, Tensor) else a
        cols.append(a.argmax(axis=1) == labels)
    return np.stack(cols, axis=1)


def exact_policy_gradient(x, labels, net, policy, accumulated=None):
    """Exact gradient of the batch-mean expected reward w.r.t. policy parameters.

    ``accumulated`` (per-step accumulated outputs of the backbone) is computed
    when not supplied. Returns ``{name: grad}``.
    """
    if accumulated is None:
        from .snn import forward_temporal
        out = forward_temporal(net, x, policy.candidates[-1])
        accumulated = [out.accumulated[:, t] for t in range(out.T)]
    correct = candidate_correctness(accumulated, np.asarray(labels), policy.candidates)
    R = reward_matrix(correct, policy.candidates, policy.beta)
    return objective_gradient(policy, x, R)


def objective_gradient(policy, x, R):
    params = dict(policy.net.named_parameters())
    for p in params.values():
        p.grad = None
    nx.get_tape().clear()
    J = expected_reward_objective(policy.logits(x), R)
    J.backward()
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in params.items()}


def reinforce_gradient(policy, x, R, n_samples, gen):
    """Monte Carlo mean of ``n_samples`` single-draw REINFORCE estimates per input."""
    params = dict(policy.net.named_parameters())
    for p in params.values():
        p.grad = None
    nx.get_tape().clear()
    logits = policy.logits(x)
    v = nx._softmax_np(logits.data)
    counts = np.stack([gen.multinomial(n_samples, row / row.sum()) for row in v])
    weights = counts / n_samples * np.asarray(R)
    logv = nx.log_softmax(logits)
    J = (logv * Tensor(weights)).sum() * (1.0 / logits.shape[0])
    J.backward()
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in params.items()}


# joint finetuning --------------------------------------------------------------------------

@dataclass
class PolicyTrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.01
    policy_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta: float = 1.0
    seed: int = 0
    train_backbone: bool = True
    freeze_norm_stats: bool = True
    max_grad_norm: float | None = 1.0   # policy gradients only

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be positive")


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def joint_loss(net, policy, x, y):
    """``-E_v[R] + sum_k stop(v_k) * CE_k`` for one batch. Returns (loss, v, R)."""
    cands = policy.candidates
    accs = unroll(net, x, cands[-1])
    correct = candidate_correctness(accs, y, cands)
    R = reward_matrix(correct, cands, policy.beta)
    logits = policy.logits(x)
    J = expected_reward_objective(logits, R)
    v = nx._softmax_np(logits.data)
    ce = None
    for k, t in enumerate(cands):
        term = (nx.cross_entropy(accs[t - 1], y, reduction="none") * Tensor(v[:, k])).sum()
        ce = term if ce is None else ce + term
    loss = ce * (1.0 / len(y)) - J
    return loss, v, R


def train_seenn2(net, policy, data, cfg, val=None):
    """Jointly finetune backbone and policy in place; returns per-epoch rows."""
    policy.beta = cfg.beta
    params = list(policy.parameters())
    popt = nx.SGD(params, cfg.policy_lr, cfg.momentum, cfg.weight_decay)
    bopt = nx.SGD(list(net.parameters()), cfg.lr, cfg.momentum, cfg.weight_decay)
    gen = np.random.default_rng(cfg.seed)
    rows = []
    for epoch in range(cfg.epochs):
        popt.lr = nx.cosine_lr(epoch, cfg.epochs, cfg.policy_lr)
        bopt.lr = nx.cosine_lr(epoch, cfg.epochs, cfg.lr)
        # Running statistics of the warm-started backbone stay fixed.
        net.train(not cfg.freeze_norm_stats)
        policy.net.train()
        rewards = []
        for idx in batches(len(data), cfg.batch_size, gen):
            popt.zero_grad()
            bopt.zero_grad()
            loss, v, R = joint_loss(net, policy, data.images[idx], data.labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"joint loss became {value} at epoch {epoch}")
            loss.backward()
            if cfg.max_grad_norm is not None:
                clip_grad_norm(params, cfg.max_grad_norm)
            popt.step()
            if cfg.train_backbone:
                bopt.step()
            rewards.append(float((v * R).sum(axis=1).mean()))
        nx.get_tape().clear()
        net.eval()
        policy.net.eval()
        res = infer_seenn2(net, policy, (val or data).images, (val or data).labels)
        rows.append({"epoch": epoch, "avg_T": res.avg_t, "accuracy": res.accuracy,
                     "mean_reward": float(np.mean(rewards)), "beta": policy.beta})
    return rows


def write_policy_log(path, rows):
    write_metrics_csv(path, rows, ["epoch", "avg_T", "accuracy", "mean_reward", "beta"])


def infer_seenn2(net, policy, x, labels=None, trace=None, batch_size=256):
    """Run each sample for the argmax-selected number of timesteps."""
    x = np.asarray(x)
    parts = []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        out = policy_forward(xb, policy, trace=trace)
        k = out.v.argmax(axis=1)
        t_sel = np.asarray(policy.candidates)[k]
        exit_t, logits = run_with_exits(
            net, xb, policy.candidates[-1],
            lambda t, acc, active: t_sel[active] == t, trace)
        pred = logits.argmax(axis=1)
        correct = None if labels is None else pred == np.asarray(labels)[i:i + batch_size]
        parts.append(ExitResult(exit_t, pred, out.v[np.arange(len(k)), k], logits, correct))
    return ExitResult.concat(parts)


def save_policy(path, policy):
    header = network_header(policy.net, candidates=list(policy.candidates), beta=policy.beta)
    write_checkpoint(path, header, policy.net.state_dict())


def load_policy(path):
    net, header = load_network(path)
    policy = TimestepPolicy.__new__(TimestepPolicy)
    policy.candidates = tuple(header["candidates"])
    policy.beta = float(header["beta"])
    policy.net = net
    policy.ratio = None
    for name, m in net.modules():
        if hasattr(m, "spiking_input"):
            m.name = f"policy.{name}"
    return policy


__all__ = ["TimestepPolicy", "PolicyOutput", "PolicyTrainConfig", "default_policy_arch",
           "policy_forward", "reward", "reward_matrix", "exact_policy_gradient",
           "reinforce_gradient", "train_seenn2", "infer_seenn2", "save_policy", "load_policy"]

"""Operation counting, energy estimates and wall-clock throughput."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .snn import Network, ResidualBlock, forward_temporal


class OpTrace:
    """Per-layer MAC / SOP accumulator filled in during instrumented forwards."""

    def __init__(self):
        self.layers = {}

    def add(self, name, macs=0, sops=0):
        rec = self.layers.setdefault(name, [0, 0])
        rec[0] += int(macs)
        rec[1] += int(sops)

    def merge(self, other):
        for name, (m, s) in other.layers.items():
            self.add(name, m, s)
        return self

    @property
    def total_macs(self):
        return sum(m for m, _ in self.layers.values())

    @property
    def total_sops(self):
        return sum(s for _, s in self.layers.values())


@dataclass(frozen=True)
class EnergyModel:
    e_mac: float = 4.6e-12
    e_ac: float = 0.9e-12

    def __post_init__(self):
        if not 0 < self.e_ac < self.e_mac:
            raise nx.ConfigError("need 0 < e_ac < e_mac")


@dataclass
class OpCountReport:
    layers: list = field(default_factory=list)
    total_macs: int = 0
    total_sops: int = 0
    energy_j: float = 0.0
    avg_t: float | None = None

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def estimate_energy(report, model=EnergyModel()):
    return model.e_mac * report.total_macs + model.e_ac * report.total_sops


def count_dynamic_sops(trace, avg_t=None, model=EnergyModel()):
    layers = [{"name": n, "macs": m, "sops": s} for n, (m, s) in trace.layers.items()]
    rep = OpCountReport(layers, trace.total_macs, trace.total_sops, 0.0, avg_t)
    rep.energy_j = estimate_energy(rep, model)
    return rep


def count_static_ops(net):
    """Analytic MACs per layer for one dense pass (one timestep) of one sample."""
    if not isinstance(net, Network):
        raise TypeError("count_static_ops expects a Network")
    counts = {}
    shape = net.in_shape
    if net.arch.kind == "mlp":
        shape = (int(np.prod(shape)),)

    def layer(mod, in_shape):
        macs, out = mod.macs(in_shape)
        counts[mod.name] = macs
        return out

    for block in net.features:
        if isinstance(block, ResidualBlock):
            mid = layer(block.unit1.layer, shape)
            out = layer(block.unit2.layer, mid)
            if block.shortcut is not None:
                layer(block.shortcut.layer, shape)
            shape = out
        else:
            shape = layer(block.layer, shape)
    counts[net.head.name] = net.head.macs(None)[0]
    return counts


def total_static_macs(net):
    return sum(count_static_ops(net).values())


def static_ratio(policy_net, backbone):
    return total_static_macs(policy_net) / total_static_macs(backbone)


def _fixed(net, x, T):
    net.eval()
    forward_temporal(net, x, T)


@dataclass
class Throughput:
    samples_per_s: float
    iqr_over_median: float
    trials: list


def measure_throughput(run, n_samples, trials=5, warmup=1):
    """Median samples/second of ``run()`` over ``trials`` timed calls, single-threaded.

    ``run`` is a zero-argument callable processing ``n_samples`` inputs.
    """
    rates = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            run()
        for _ in range(max(trials, 5)):
            t0 = time.perf_counter()
            run()
            rates.append(n_samples / (time.perf_counter() - t0))
    q1, med, q3 = np.percentile(rates, [25, 50, 75])
    return Throughput(float(med), float((q3 - q1) / med), rates)


def throughput_fixed(net, x, T, trials=5):
    return measure_throughput(lambda: _fixed(net, x, T), len(x), trials)


def throughput_seenn1(net, x, cfg, trials=5):
    from .early_exit import infer_seenn1
    net.eval()
    return measure_throughput(lambda: infer_seenn1(net, x, cfg), len(x), trials)


"""Quantized-ANN training and ANN-to-SNN conversion."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, Tensor, _make
from .snn import LIF, Network, NeuronConfig, build_snn


class ConversionError(ValueError):
    pass


@dataclass(frozen=True)
class QuantActConfig:
    steps: int = 4
    ceiling: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("quantization steps must be >= 1")
        if not self.ceiling > 0:
            raise ConfigError("ceiling must be positive")


def quant_act_forward(x, ceiling, steps):
    """``clip(floor(x*l/c + 0.5), 0, l) * c / l`` with a straight-through backward.

    ``ceiling`` may be a float or a scalar Tensor (then it receives a gradient:
    1 where the output is clipped at the top, 0 elsewhere).
    """
    c_t = ceiling if isinstance(ceiling, Tensor) else Tensor(np.asarray(ceiling, dtype=x.data.dtype))
    c = float(c_t.data)
    if not c > 0:
        raise ConfigError("ceiling must be positive")
    xd = x.data
    out = np.clip(np.floor(xd * steps / c + 0.5), 0, steps) * (c / steps)
    inside = (xd > 0) & (xd < c)
    top = xd >= c

    def backward(g):
        return g * inside, np.asarray((g * top).sum())

    return _make(out, (x, c_t), backward)


class QuantAct:
    """Quantized activation with a learnable ceiling, warm-started at 8x the mean activation."""

    kind = "quant"

    def __init__(self, steps=4, ceiling=None):
        if steps < 1:
            raise ConfigError("quantization steps must be >= 1")
        self.steps = steps
        self.ceiling = Tensor(np.asarray(1.0 if ceiling is None else ceiling,
                                         dtype=nx.get_dtype()), requires_grad=True)
        self.initialised = ceiling is not None

    def __call__(self, x):
        if not self.initialised:
            m = float(np.maximum(x.data, 0).mean())
            self.ceiling.data = np.asarray(max(8.0 * m, 1e-3), dtype=nx.get_dtype())
            self.initialised = True
        return quant_act_forward(x, self.ceiling, self.steps)

    def reset(self):
        pass

    def compact(self, keep):
        pass

    def params(self):
        yield "ceiling", self.ceiling

    def buffers(self):
        return iter(())


def build_ann(arch, steps=4, ceiling=None):
    return Network(arch, lambda: QuantAct(steps, ceiling), kind="ann")


def ann_accuracy(ann, data, batch_size=256):
    ann.eval()
    correct = 0
    with nx.no_grad():
        for i in range(0, len(data), batch_size):
            logits = ann(data.images[i:i + batch_size]).data
            correct += int((logits.argmax(axis=1) == data.labels[i:i + batch_size]).sum())
    return correct / len(data)


def train_ann(ann, data, cfg, val=None):
    """Supervised single-pass training of a quantized ANN (same SGD stack as SNNs)."""
    from .training import TrainResult, run_epochs

    def batch_loss(x, y):
        return nx.cross_entropy(ann(x), y)

    def on_epoch(ds):
        return {"acc": ann_accuracy(ann, ds)}

    # Positive ceilings are a hard constraint of the quantizer.
    params = list(ann.parameters())
    rows = run_epochs(ann, params, data, cfg, batch_loss, val, on_epoch)
    for act in ann.activations():
        act.ceiling.data = np.maximum(act.ceiling.data, 1e-3)
    return TrainResult(rows)


def checkpoint_id(state):
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name]).tobytes())
    return h.hexdigest()[:16]


@dataclass
class ConversionResult:
    source_id: str
    snn: Network
    layers: list = field(default_factory=list)

    def report(self):
        return {"source_id": self.source_id, "layers": self.layers,
                "neuron": {"tau": 1.0, "reset": "subtract", "init_charge": 0.5}}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def convert(ann, neuron=None):
    """Swap every quantized activation for an IF neuron whose threshold is its ceiling."""
    if getattr(ann, "kind", None) != "ann":
        raise ConversionError(f"expected a quantized ANN, got network kind {ann.kind!r}")
    for name, m in ann.modules():
        kind = getattr(m, "kind", None)
        if kind is not None and kind != "quant":
            raise ConversionError(f"unsupported layer {name} ({type(m).__name__}) for conversion")
    neuron = neuron or NeuronConfig.conversion()
    snn = build_snn(ann.arch, neuron)
    snn_mods = dict(snn.modules())
    state = ann.state_dict()
    own = dict(snn.named_parameters())
    layers = []
    for name, m in ann.modules():
        if getattr(m, "kind", None) == "quant":
            lif = snn_mods[name]
            assert isinstance(lif, LIF)
            lam = float(m.ceiling.data)
            lif.threshold = lam
            layers.append({"layer": name, "lambda": lam, "threshold": lif.threshold,
                           "steps": m.steps})
    for pname, arr in state.items():
        if pname.endswith(".ceiling"):
            continue
        if pname in own:
            own[pname].data = arr.copy()
        else:
            mod_name, attr = pname.rsplit(".", 1)
            setattr(snn_mods[mod_name], attr, arr.copy())
    return ConversionResult(checkpoint_id(state), snn, layers)

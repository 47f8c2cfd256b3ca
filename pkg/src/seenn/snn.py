"""Spiking neurons, network assembly and the temporal forward pass.

Networks are built from units of (weight layer, batch norm, activation). The
activation is a LIF neuron for SNNs, a quantized clip for conversion-ready
ANNs, or a ReLU for the analog policy network. The same container serves all
three so conversion can reuse weights verbatim.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, ShapeError, Tensor
from .surrogate import SurrogateConfig, spike

ZERO_RESET = "zero"
SUBTRACT_RESET = "subtract"


@dataclass
class NeuronConfig:
    tau: float = 0.5
    threshold: float = 1.0
    reset: str = ZERO_RESET
    # Membrane preload as a fraction of the threshold, applied at every reset.
    init_charge: float = 0.0
    # Spikes enter the reset term as constants, so gradients only flow via tau*u.
    detach_reset: bool = True
    # Emit V*s instead of s; converted networks need it so weights stay untouched.
    emit_threshold: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"leak tau must lie in (0, 1], got {self.tau}")
        if not self.threshold > 0:
            raise ConfigError("threshold must be positive")
        if self.reset not in (ZERO_RESET, SUBTRACT_RESET):
            raise ConfigError(f"reset must be {ZERO_RESET!r} or {SUBTRACT_RESET!r}")

    @classmethod
    def training(cls, **kw):
        return cls(**{"tau": 0.5, "reset": ZERO_RESET, **kw})

    @classmethod
    def conversion(cls, **kw):
        return cls(**{"tau": 1.0, "reset": SUBTRACT_RESET, "init_charge": 0.5,
                      "emit_threshold": True, **kw})


@dataclass
class ArchConfig:
    """Network grammar.

    ``kind="mlp"`` stacks dense units of widths ``hidden``. ``kind="resnet"`` is
    a stem conv, then ``stages`` of ``(channels, n_blocks)`` residual blocks
    (every stage after the first halves the resolution), global average
    pooling and a linear classifier. ``downsample`` average-pools the input
    by an integer factor before the first layer.
    """
    kind: str = "mlp"
    in_shape: tuple = (1, 8, 8)
    n_classes: int = 4
    hidden: tuple = (64, 64)
    stem_channels: int = 8
    stages: tuple = ((8, 1), (16, 1))
    batch_norm: bool = True
    downsample: int = 1

    def __post_init__(self):
        self.in_shape = tuple(int(v) for v in self.in_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        self.stages = tuple((int(c), int(b)) for c, b in self.stages)
        if self.kind not in ("mlp", "resnet"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if len(self.in_shape) != 3:
            raise ConfigError("in_shape must be (C, H, W)")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.downsample < 1:
            raise ConfigError("downsample factor must be >= 1")

    def to_dict(self):
        return asdict(self)


# layers -------------------------------------------------------------------------

def _param(shape, scale=None, fill=0.0):
    if scale is None:
        data = np.full(shape, fill, dtype=nx.get_dtype())
    else:
        data = (nx.rng().standard_normal(shape) * scale).astype(nx.get_dtype())
    return Tensor(data, requires_grad=True)


class Linear:
    def __init__(self, n_in, n_out, bias=True):
        self.weight = _param((n_in, n_out), scale=np.sqrt(2.0 / n_in))
        self.bias = _param((n_out,)) if bias else None
        self.name = "linear"
        self.spiking_input = False

    def params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def buffers(self):
        return iter(())

    def __call__(self, x, trace=None):
        out = nx.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        if trace is not None:
            n_in, n_out = self.weight.shape
            if self.spiking_input:
                trace.add(self.name, sops=int(np.count_nonzero(x.data)) * n_out)
            else:
                trace.add(self.name, macs=x.shape[0] * n_in * n_out)
        return out

    def macs(self, in_shape):
        return self.weight.shape[0] * self.weight.shape[1], (self.weight.shape[1],)


class Conv2d:
    def __init__(self, c_in, c_out, k, stride=1, padding=0):
        self.weight = _param((c_out, c_in, k, k), scale=np.sqrt(2.0 / (c_in * k * k)))
        self.stride, self.padding = stride, padding
        self.name = "conv"
        self.spiking_input = False

    def params(self):
        yield "weight", self.weight

    def buffers(self):
        return iter(())

    def __call__(self, x, trace=None):
        out = nx.conv2d(x, self.weight, self.stride, self.padding)
        if trace is not None:
            F, C, kh, kw = self.weight.shape
            if self.spiking_input:
                cols, _ = nx.im2col(x.data, kh, kw, self.stride, self.padding)
                trace.add(self.name, sops=int(np.count_nonzero(cols)) * F)
            else:
                trace.add(self.name, macs=out.data.size * C * kh * kw)
        return out

    def out_shape(self, in_shape):
        C, H, W = in_shape
        F, _, k, _ = self.weight.shape
        p, s = self.padding, self.stride
        if (H + 2 * p - k) % s or (W + 2 * p - k) % s:
            raise ConfigError(f"non-integral conv output for input {in_shape}")
        return F, (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1

    def macs(self, in_shape):
        F, C, kh, kw = self.weight.shape
        out = self.out_shape(in_shape)
        return out[1] * out[2] * F * C * kh * kw, out


class BatchNorm:
    """Per-channel batch norm; batch statistics in training, running ones otherwise."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = _param((channels,), fill=1.0)
        self.beta = _param((channels,), fill=0.0)
        self.running_mean = np.zeros(channels, dtype=nx.get_dtype())
        self.running_var = np.ones(channels, dtype=nx.get_dtype())
        self.momentum, self.eps = momentum, eps

    def params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def __call__(self, x, training):
        if training:
            out, mu, var = nx.batch_norm(x, self.gamma, self.beta, self.eps)
            m = x.data.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mu
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * unbiased
            return out
        scale, shift = self.folded()
        shape = [1] * x.ndim
        shape[1] = -1
        return x * Tensor(scale.reshape(shape)) + Tensor(shift.reshape(shape))

    def folded(self):
        """Evaluation-mode affine (scale, shift) with gradients w.r.t. gamma/beta dropped."""
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.data - self.running_mean * scale


# activations ----------------------------------------------------------------------

def lif_step(u, current, cfg, surrogate=SurrogateConfig(), threshold=None):
    """One LIF/IF update. Returns ``(spikes, u_next)``.

    Works on tensors; ``threshold`` overrides ``cfg.threshold`` per layer.
    """
    if u.shape != current.shape:
        raise ShapeError(f"membrane {u.shape} and current {current.shape} differ")
    V = cfg.threshold if threshold is None else threshold
    charged = u * cfg.tau + current
    s = spike(charged - V, surrogate)
    gate = nx.detach(s) if cfg.detach_reset else s
    if cfg.reset == ZERO_RESET:
        u_next = charged * (1.0 - gate)
    else:
        u_next = charged - gate * V
    return s, u_next


class LIF:
    """Stateful spiking activation. State is (re)created lazily after ``reset``."""

    kind = "lif"

    def __init__(self, cfg, surrogate=SurrogateConfig()):
        self.cfg = cfg
        self.surrogate = surrogate
        self.threshold = float(cfg.threshold)
        self.u = None

    def reset(self):
        self.u = None

    def __call__(self, current):
        if self.u is None:
            init = np.full(current.shape, self.cfg.init_charge * self.threshold,
                           dtype=current.data.dtype)
            self.u = Tensor(init)
        s, self.u = lif_step(self.u, current, self.cfg, self.surrogate, self.threshold)
        if self.cfg.emit_threshold:
            return s * self.threshold
        return s

    def compact(self, keep):
        if self.u is not None:
            self.u = Tensor(self.u.data[keep])

    def params(self):
        return iter(())

    def buffers(self):
        yield "threshold", np.asarray(self.threshold, dtype=np.float64)


class ReLU:
    kind = "relu"

    def __call__(self, x):
        return nx.relu(x)

    def reset(self):
        pass

    def compact(self, keep):
        pass

    def params(self):
        return iter(())

    def buffers(self):
        return iter(())


# building blocks ----------------------------------------------------------------------

class Unit:
    """Weight layer, optional batch norm and activation."""

    def __init__(self, layer, norm, act):
        self.layer, self.norm, self.act = layer, norm, act

    def current(self, x, training, trace=None):
        c = self.layer(x, trace)
        if self.norm is not None:
            c = self.norm(c, training)
        return c

    def __call__(self, x, training, trace=None):
        return self.act(self.current(x, training, trace))

    def children(self):
        yield "layer", self.layer
        if self.norm is not None:
            yield "norm", self.norm
        yield "act", self.act


class ResidualBlock:
    """Two 3x3 units; the shortcut current joins before the second activation."""

    def __init__(self, c_in, c_out, stride, make_act, bn):
        if stride == 1:
            first = Conv2d(c_in, c_out, 3, 1, 1)
        else:
            # 4x4/s2/p1 halves even sizes exactly; 3x3/s2/p1 would not.
            first = Conv2d(c_in, c_out, 4, stride, 1)
        self.unit1 = Unit(first, BatchNorm(c_out) if bn else None, make_act())
        self.unit2 = Unit(Conv2d(c_out, c_out, 3, 1, 1), BatchNorm(c_out) if bn else None, make_act())
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            k = stride
            self.shortcut = Unit(Conv2d(c_in, c_out, k, stride, 0),
                                 BatchNorm(c_out) if bn else None, None)

    def __call__(self, x, training, trace=None):
        h = self.unit1(x, training, trace)
        c = self.unit2.current(h, training, trace)
        skip = x if self.shortcut is None else self.shortcut.current(x, training, trace)
        return self.unit2.act(c + skip)

    def children(self):
        yield "unit1", self.unit1
        yield "unit2", self.unit2
        if self.shortcut is not None:
            yield "shortcut", self.shortcut

    def out_shape(self, in_shape):
        mid = self.unit1.layer.out_shape(in_shape)
        out = self.unit2.layer.out_shape(mid)
        skip = in_shape if self.shortcut is None else self.shortcut.layer.out_shape(in_shape)
        if skip != out:
            raise ConfigError(f"residual shapes disagree: {skip} vs {out}")
        return out


class Network:
    """Feed-forward container shared by SNN, quantized ANN and policy network.

    ``make_act`` is a zero-argument factory for the per-unit activation.
    """

    def __init__(self, arch, make_act, kind="snn"):
        self.arch = arch
        self.kind = kind
        self.training = False
        self.features = []
        bn = arch.batch_norm
        C, H, W = arch.in_shape
        f = arch.downsample
        if H % f or W % f:
            raise ConfigError(f"downsample {f} does not divide input {H}x{W}")
        H, W = H // f, W // f
        if arch.kind == "mlp":
            width = C * H * W
            for h in arch.hidden:
                self.features.append(Unit(Linear(width, h, bias=not bn),
                                          BatchNorm(h) if bn else None, make_act()))
                width = h
        else:
            ch = arch.stem_channels
            self.features.append(Unit(Conv2d(C, ch, 3, 1, 1),
                                      BatchNorm(ch) if bn else None, make_act()))
            for si, (c_out, n_blocks) in enumerate(arch.stages):
                for b in range(n_blocks):
                    stride = 2 if si > 0 and b == 0 else 1
                    self.features.append(ResidualBlock(ch, c_out, stride, make_act, bn))
                    ch = c_out
            width = ch
        self.head = Linear(width, arch.n_classes)
        self._name_layers()
        self.in_shape = (C, H, W)
        self._check_shapes()

    # structure -----------------------------------------------------------
    def modules(self):
        """Yield ``(dotted_name, module)`` for every leaf module."""
        def walk(prefix, obj):
            if hasattr(obj, "children"):
                for name, child in obj.children():
                    if child is not None:
                        yield from walk(f"{prefix}.{name}", child)
            else:
                yield prefix, obj
        for i, block in enumerate(self.features):
            yield from walk(f"features.{i}", block)
        yield "head", self.head

    def _name_layers(self):
        for name, m in self.modules():
            if isinstance(m, (Linear, Conv2d)):
                m.name = name
                m.spiking_input = False
        if self.kind == "snn":
            # Everything after the first unit's neuron sees binary spikes; the
            # head reads pooled rates and stays analog.
            for name, m in self.modules():
                if isinstance(m, (Linear, Conv2d)) and not name.startswith("features.0.") \
                        and name != "head":
                    m.spiking_input = True

    def _check_shapes(self):
        shape = self.in_shape
        for block in self.features:
            if isinstance(block, ResidualBlock):
                shape = block.out_shape(shape)
            elif isinstance(block.layer, Conv2d):
                shape = block.layer.out_shape(shape)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_parameters(self):
        for name, m in self.modules():
            for pname, p in m.params():
                yield f"{name}.{pname}", p

    def named_buffers(self):
        for name, m in self.modules():
            for bname, b in m.buffers():
                yield f"{name}.{bname}", b

    def activations(self):
        return [m for _, m in self.modules() if getattr(m, "kind", None) in ("lif", "quant", "relu")]

    def neurons(self):
        return [m for _, m in self.modules() if isinstance(m, LIF)]

    def n_params(self):
        return sum(p.data.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    # forward -----------------------------------------------------------------
    def prepare_input(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=nx.get_dtype()))
        if self.arch.downsample > 1:
            x = nx.avg_pool2d(x, self.arch.downsample)
        if self.arch.kind == "mlp":
            x = x.reshape(x.shape[0], -1)
        return x

    def encode(self, x, trace=None):
        """Current into the first unit (identical at every timestep)."""
        return self.features[0].current(self.prepare_input(x), self.training, trace)

    def step(self, encoded, trace=None):
        """One timestep from the cached first-unit current; returns classifier logits."""
        s = self.features[0].act(encoded)
        for block in self.features[1:]:
            s = block(s, self.training, trace)
        if self.arch.kind == "resnet":
            s = s.mean(axis=(2, 3))
        return self.head(s, trace)

    def forward(self, x, trace=None):
        """Single-pass forward for analog networks (ANN / policy)."""
        return self.step(self.encode(x, trace), trace)

    __call__ = forward

    def reset_states(self):
        for a in self.activations():
            a.reset()

    def compact(self, keep):
        for a in self.activations():
            a.compact(keep)

    # serialisation -----------------------------------------------------------
    def state_dict(self):
        d = {name: p.data for name, p in self.named_parameters()}
        d.update(dict(self.named_buffers()))
        return d

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        mods = dict(self.modules())
        expected = set(own) | {n for n, _ in self.named_buffers()}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name in own:
                if own[name].data.shape != arr.shape:
                    raise ShapeError(f"{name}: checkpoint {arr.shape} vs model {own[name].data.shape}")
                own[name].data = np.array(arr, dtype=arr.dtype)
                continue
            mod_name, attr = name.rsplit(".", 1)
            mod = mods.get(mod_name)
            if mod is None:
                raise KeyError(f"unexpected tensor {name}")
            if attr == "threshold" and isinstance(mod, LIF):
                mod.threshold = float(arr)
            elif attr in ("running_mean", "running_var"):
                setattr(mod, attr, np.array(arr))
            else:
                raise KeyError(f"unexpected tensor {name}")


def build_snn(arch, neuron=None, surrogate=SurrogateConfig()):
    neuron = neuron or NeuronConfig.training()
    return Network(arch, lambda: LIF(neuron, surrogate), kind="snn")


# temporal forward ---------------------------------------------------------------------------

@dataclass
class TimestepOutputs:
    """Per-sample classifier outputs over time.

    ``accumulated[i, t]`` is the mean of the raw logits over steps ``0..t``.
    ``encoded`` and ``total`` hold what is needed to resume the loop.
    """
    accumulated: np.ndarray
    raw: np.ndarray
    total: np.ndarray = field(repr=False)
    encoded: object = field(default=None, repr=False)

    @property
    def T(self):
        return self.accumulated.shape[1]

    def at(self, t):
        """Accumulated logits after ``t`` timesteps (1-based)."""
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return self.accumulated[:, t - 1]


def forward_temporal(net, x, T, trace=None, resume=None):
    """Run ``T`` timesteps of direct-encoded inference without gradients.

    With ``resume`` (a previous result on the same ``x`` whose network state
    has not been touched since), continue from its last step up to ``T``.
    """
    if T < 1:
        raise ConfigError("T must be >= 1")
    with nx.no_grad():
        if resume is None:
            net.reset_states()
            encoded = net.encode(x, None)
            total = np.zeros((encoded.shape[0], net.arch.n_classes), dtype=encoded.data.dtype)
            raws, accs, start = [], [], 0
        else:
            encoded = resume.encoded
            total = resume.total.copy()
            raws = list(resume.raw.transpose(1, 0, 2))
            accs = list(resume.accumulated.transpose(1, 0, 2))
            start = resume.T
            if T < start:
                raise ConfigError(f"cannot resume backwards from {start} to {T}")
        for t in range(start, T):
            if trace is not None:
                first_macs(trace, net, encoded.shape[0])
            logits = net.step(encoded, trace).data
            total = total + logits
            raws.append(logits)
            accs.append(total / (t + 1))
    return TimestepOutputs(np.stack(accs, axis=1), np.stack(raws, axis=1), total, encoded)


def first_macs(trace, net, n):
    """Charge the analog encoding layer for one timestep of ``n`` samples."""
    layer = net.features[0].layer
    per_sample, _ = layer.macs(net.in_shape)
    trace.add(layer.name, macs=per_sample * n)


def predict(outputs, t):
    """Argmax class of the accumulated output at timestep ``t`` (lowest index on ties)."""
    return np.argmax(outputs.at(t), axis=1)


def reset_states(net):
    net.reset_states()


# checkpoints -----------------------------------------------------------------------------

MAGIC = b"SEEN"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_checkpoint(path, header, tensors):
    """Write ``header`` (JSON-able dict) and named arrays in the SEEN format."""
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(text)))
        fh.write(text)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_TAGS:
                raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BI", _DTYPE_TAGS[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_checkpoint(path):
    """Return ``(header, tensors)`` from a SEEN file."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 12
    header = json.loads(buf[off:off + n].decode("utf-8"))
    off += n
    tensors = {}
    while off < len(buf):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        tag, rank = struct.unpack_from("<BI", buf, off)
        off += 5
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        dt = _TAG_DTYPES[tag]
        count = int(np.prod(dims)) if rank else 1
        nbytes = count * dt.itemsize
        if off + nbytes > len(buf):
            raise ValueError(f"{path}: truncated tensor {name} at offset {off}")
        tensors[name] = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).copy()
        off += nbytes
    return header, tensors


def network_header(net, **extra):
    header = {"kind": net.kind, "arch": net.arch.to_dict()}
    acts = net.activations()
    if acts and isinstance(acts[0], LIF):
        header["neuron"] = asdict(acts[0].cfg)
        header["surrogate"] = asdict(acts[0].surrogate)
    if acts and acts[0].kind == "quant":
        header["quant_steps"] = acts[0].steps
    header.update(extra)
    return header


def save_network(path, net, **extra):
    write_checkpoint(path, network_header(net, **extra), net.state_dict())


def network_from_header(header):
    arch = ArchConfig(**header["arch"])
    kind = header["kind"]
    if kind == "snn":
        return build_snn(arch, NeuronConfig(**header["neuron"]),
                         SurrogateConfig(**header.get("surrogate", {})))
    if kind == "ann":
        from .conversion import build_ann
        return build_ann(arch, header.get("quant_steps", 4), ceiling=1.0)
    if kind == "policy":
        return Network(arch, ReLU, kind="policy")
    raise ValueError(f"unknown network kind {kind!r}")


def load_network(path):
    header, tensors = read_checkpoint(path)
    net = network_from_header(header)
    net.load_state_dict(tensors)
    return net, header

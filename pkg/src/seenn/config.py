"""Plain-text run configuration: INI sections mapped onto typed dataclasses."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .conversion import QuantActConfig
from .data import SyntheticSpec
from .efficiency import EnergyModel
from .numerics import ConfigError
from .snn import ArchConfig, NeuronConfig
from .surrogate import SurrogateConfig
from .training import TrainConfig

SEED_ENV = "SEENN_SEED"


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs"
    precision: int = 64


@dataclass
class DataSection:
    source: str = "synthetic"          # synthetic | mnist | cifar10
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: str = ""              # cifar10, comma separated
    test_files: str = ""
    per_class: int = 0                 # 0 keeps every sample
    standardize: bool = True
    n_classes: int = 4
    n_per_class: int = 200
    dims: tuple = (1, 8, 8)
    sigma_easy: float = 0.3
    sigma_hard: float = 0.9
    hard_fraction: float = 0.5
    hard_contrast: float = 1.0
    test_fraction: float = 0.25
    seed: int = 0

    def synthetic(self):
        return SyntheticSpec(self.n_classes, self.n_per_class, self.dims, self.sigma_easy,
                             self.sigma_hard, self.hard_fraction, self.hard_contrast,
                             self.test_fraction, self.seed)


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    T: int = 4
    loss_mode: str = "tet"
    candidates: tuple | None = None
    tau: float = 0.5
    threshold: float = 1.0
    reset: str = "zero"
    surrogate: str = "triangular"
    surrogate_width: float = 1.0

    def train_config(self, seed):
        return TrainConfig(self.epochs, self.batch_size, self.lr0, self.momentum,
                           self.weight_decay, self.T, self.loss_mode, seed, self.candidates)

    def neuron(self):
        return NeuronConfig(tau=self.tau, threshold=self.threshold, reset=self.reset)

    def surrogate_config(self):
        return SurrogateConfig(kind=self.surrogate, width=self.surrogate_width)


@dataclass
class ConversionSection:
    steps: int = 4
    ceiling: float | None = None       # None warm-starts from the first batch

    def quant(self):
        return QuantActConfig(self.steps, 1.0 if self.ceiling is None else self.ceiling)


@dataclass
class ExitSection:
    alpha: float = 0.9
    candidates: tuple | None = None    # defaults to 1..train.T
    alphas: tuple = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999)
    batch_size: int = 256


@dataclass
class PolicySection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    policy_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta: float = 1.0
    train_backbone: bool = True
    freeze_norm_stats: bool = True
    max_grad_norm: float | None = 1.0
    hidden: int = 0                    # 0 picks the widest net under the op budget
    downsample: int = 0                # 0 picks 2x pooling when the input allows it
    max_ratio: float = 0.02


@dataclass
class EfficiencySection:
    e_mac: float = 4.6e-12
    e_ac: float = 0.9e-12
    throughput_trials: int = 5

    def model(self):
        return EnergyModel(self.e_mac, self.e_ac)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainSection = field(default_factory=TrainSection)
    conversion: ConversionSection = field(default_factory=ConversionSection)
    exit: ExitSection = field(default_factory=ExitSection)
    policy: PolicySection = field(default_factory=PolicySection)
    efficiency: EfficiencySection = field(default_factory=EfficiencySection)

    @property
    def seed(self):
        return self.run.seed

    def candidates(self):
        return self.exit.candidates or tuple(range(1, self.train.T + 1))


SECTIONS = [f.name for f in fields(RunConfig)]


# value codecs --------------------------------------------------------------------------------

def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(str(v) for v in pair) for pair in value)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text, default, where):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        if text.lower() in ("", "none"):
            return ()
        if default and isinstance(default[0], tuple):
            return tuple(tuple(int(v) for v in item.split("x")) for item in text.split(","))
        if default and isinstance(default[0], float):
            return tuple(float(v) for v in text.split(","))
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r}") from None


_OPTIONAL_TUPLE = {("train", "candidates"), ("exit", "candidates")}


def _parse_field(section, name, text, default, optional=False):
    where = f"[{section}] {name}"
    if optional and text.strip().lower() in ("", "none"):
        return None
    if (section, name) in _OPTIONAL_TUPLE:
        if text.strip().lower() in ("", "none"):
            return None
        try:
            return tuple(int(v) for v in text.split(","))
        except ValueError:
            raise ConfigError(f"{where}: cannot parse {text!r}") from None
    if default is None:
        if text.strip().lower() in ("", "none"):
            return None
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: cannot parse {text!r}") from None
    return _parse(text, default, where)


def load_config(path=None, overrides=None):
    """Read an INI file into a RunConfig.

    Unknown sections or keys are errors. ``SEENN_SEED`` in the environment
    overrides ``[run] seed``. ``overrides`` maps ``"section.key"`` to text.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
    for key, text in (overrides or {}).items():
        sec, name = key.split(".", 1)
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, name, text)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        if not parser.has_section("run"):
            parser.add_section("run")
        parser.set("run", "seed", env)

    cfg = RunConfig()
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        current = getattr(cfg, sec)
        known = {f.name: f for f in fields(current)}
        values = {}
        for name, text in parser.items(sec):
            if name not in known:
                raise ConfigError(f"unknown key {name!r} in [{sec}]")
            optional = "None" in str(known[name].type)
            values[name] = _parse_field(sec, name, text, getattr(current, name), optional)
        merged = {f.name: getattr(current, f.name) for f in fields(current)}
        merged.update(values)
        try:
            setattr(cfg, sec, type(current)(**merged))
        except TypeError as exc:
            raise ConfigError(f"[{sec}]: {exc}") from None
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.data.source not in ("synthetic", "mnist", "cifar10"):
        raise ConfigError(f"[data] source must be synthetic, mnist or cifar10, got {cfg.data.source!r}")
    if cfg.run.precision not in (32, 64):
        raise ConfigError("[run] precision must be 32 or 64")
    cfg.train.neuron()
    cfg.train.surrogate_config()
    cfg.train.train_config(cfg.seed)
    cfg.conversion.quant()
    cfg.efficiency.model()


def dump_config(cfg):
    """Every field of every section, defaults included, as INI text."""
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(path, cfg):
    Path(path).write_text(dump_config(cfg))

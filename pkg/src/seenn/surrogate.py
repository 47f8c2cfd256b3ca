"""Heaviside firing with surrogate derivatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, _make

KINDS = ("triangular", "rectangular", "sigmoid")


@dataclass(frozen=True)
class SurrogateConfig:
    """Shape of dH/du used in the backward pass.

    ``width`` is the half-support for the triangular kernel, the full support
    for the rectangular one, and the inverse temperature for the sigmoid.
    ``smooth_forward`` swaps the exact step for the surrogate's antiderivative;
    it exists so finite differences can be taken through a spiking network.
    """
    kind: str = "triangular"
    width: float = 1.0
    smooth_forward: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown surrogate kind {self.kind!r}; expected one of {KINDS}")
        if not self.width > 0:
            raise ConfigError("surrogate width must be positive")


def heaviside_surrogate_backward(x, cfg=SurrogateConfig()):
    """Surrogate derivative evaluated at ``x = u - V`` (array in, array out)."""
    x = np.asarray(x)
    w = cfg.width
    if cfg.kind == "triangular":
        return np.maximum(0.0, 1.0 - np.abs(x) / w) / w
    if cfg.kind == "rectangular":
        return (np.abs(x) < w / 2).astype(x.dtype) / w
    s = 1.0 / (1.0 + np.exp(-w * x))
    return w * s * (1.0 - s)


def surrogate_antiderivative(x, cfg=SurrogateConfig()):
    """Smooth step whose derivative is the surrogate; tends to 0 / 1 in the tails."""
    x = np.asarray(x)
    w = cfg.width
    if cfg.kind == "triangular":
        xc = np.clip(x, -w, w)
        left = (xc + w) ** 2 / (2 * w * w)
        right = 1.0 - (w - xc) ** 2 / (2 * w * w)
        return np.where(xc < 0, left, right)
    if cfg.kind == "rectangular":
        return np.clip(x / w + 0.5, 0.0, 1.0)
    return 1.0 / (1.0 + np.exp(-w * x))


def spike(x, cfg=SurrogateConfig()):
    """Fire where ``x >= 0``; gradients follow the surrogate."""
    if cfg.smooth_forward:
        out = surrogate_antiderivative(x.data, cfg)
    else:
        out = (x.data >= 0).astype(x.data.dtype)

    def backward(g):
        return (g * heaviside_surrogate_backward(x.data, cfg),)

    return _make(out, (x,), backward)

"""Adam over :class:`~modelbridge.autodiff.Parameter` objects."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Parameter


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first: dict[int, np.ndarray] = field(default_factory=dict)
    second: dict[int, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Iterable[Parameter],
    grads: Mapping[Parameter, np.ndarray],
    state: OptimizerState,
) -> OptimizerState:
    """One bias-corrected Adam update, in place, on trainable parameters only.

    Parameters missing from ``grads`` are treated as having a zero gradient.
    """
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} ({p.name})")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.first.get(p.uid)
        v = state.second.get(p.uid)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first[p.uid] = m
        state.second[p.uid] = v
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Thin stateful wrapper so training loops can call ``opt.step(grads)``."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def step(self, grads: Mapping[Parameter, np.ndarray]) -> None:
        optimizer_step(self.params, grads, self.state)

"""Adam with bias correction, one state object per parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.step_count,
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
        )


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update of every entry in ``params``.

    ``state`` is advanced in place and also returned. Moments are created
    lazily on first use, so a group can be stepped without setup.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        out[name] = p - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return out, state

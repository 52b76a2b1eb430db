"""Meta-parameters: everything the outer loop optimizes, keyed by name.

Naming scheme (``i`` is a weight-layer index):

* ``W{i}``, ``c{i}``        initial forward weights and biases
* ``B{i}``, ``fb{i}``       feedback matrix and feedback bias (FLP, plastic layers)
* ``beta{i}``               unconstrained feedback strength; beta = sigmoid(value)
* ``aW{i}``, ``ac{i}``      per-synapse plasticity coefficients / inner rates

Each name belongs to one optimizer group, see :func:`group_of`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, Tensor
from .network import Architecture

LEARNERS = ("flp", "gradient")
RULES = ("oja", "hebb")
FEEDBACK_MODES = ("errors", "targets")
PRESYN_MODES = ("pre", "post")
LOSSES = ("mse", "xent")

GROUPS = ("feedforward", "feedback", "beta", "plasticity", "plasticity_readout")

_NAME = re.compile(r"^(W|c|B|fb|beta|aW|ac)(\d+)$")


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "flp"
    rule: str = "oja"
    feedback_mode: str = "errors"
    presyn_mode: str = "pre"
    clamp_output: bool = False
    fixed_beta: float | None = None
    loss: str = "mse"

    def __post_init__(self):
        for value, allowed in (
            (self.kind, LEARNERS),
            (self.rule, RULES),
            (self.feedback_mode, FEEDBACK_MODES),
            (self.presyn_mode, PRESYN_MODES),
            (self.loss, LOSSES),
        ):
            if value not in allowed:
                raise ValueError(f"{value!r} not one of {allowed}")
        if self.clamp_output and self.loss != "xent":
            raise ValueError("output clamping is only defined for classification")
        if self.fixed_beta is not None and not 0.0 <= self.fixed_beta <= 1.0:
            raise ValueError("fixed_beta must lie in [0, 1]")


def regression_learner(kind: str = "flp", **kw) -> LearnerConfig:
    kw.setdefault("feedback_mode", "errors")
    return LearnerConfig(kind=kind, loss="mse", **kw)


def classification_learner(kind: str = "flp", **kw) -> LearnerConfig:
    kw.setdefault("fixed_beta", 1.0)
    if kind == "flp":
        kw.setdefault("clamp_output", True)
    kw.setdefault("feedback_mode", "targets")
    return LearnerConfig(kind=kind, loss="xent", **kw)


def parse_name(name: str) -> tuple[str, int]:
    m = _NAME.match(name)
    if not m:
        raise KeyError(f"not a meta-parameter name: {name!r}")
    return m.group(1), int(m.group(2))


def group_of(name: str, arch: Architecture) -> str:
    kind, layer = parse_name(name)
    if kind in ("W", "c"):
        return "feedforward"
    if kind in ("B", "fb"):
        return "feedback"
    if kind == "beta":
        return "beta"
    return "plasticity_readout" if layer == arch.readout else "plasticity"


@dataclass
class MetaParams:
    arch: Architecture
    learner: LearnerConfig
    values: dict[str, np.ndarray]
    frozen_groups: frozenset[str] = field(default_factory=frozenset)

    def group(self, name: str) -> str:
        return group_of(name, self.arch)

    def learnable(self, name: str) -> bool:
        return self.group(name) not in self.frozen_groups

    def names_in(self, group: str) -> list[str]:
        return [n for n in self.values if self.group(n) == group]

    def tensors(self, tape: Tape | None = None) -> dict[str, Tensor]:
        """Wrap every value as a Tensor; learnable ones become leaves on ``tape``."""
        out = {}
        for name, value in self.values.items():
            if tape is not None and self.learnable(name):
                out[name] = tape.leaf(value, name)
            else:
                out[name] = Tensor(value)
        return out

    def feedback_layers(self) -> list[int]:
        return sorted(int(n[1:]) for n in self.values if n.startswith("B"))

    def beta(self, layer: int) -> float:
        if self.learner.fixed_beta is not None:
            return float(self.learner.fixed_beta)
        return float(1.0 / (1.0 + np.exp(-self.values[f"beta{layer}"])))

    def copy(self) -> "MetaParams":
        return replace(self, values={k: v.copy() for k, v in self.values.items()})

    def with_values(self, values: dict[str, np.ndarray]) -> "MetaParams":
        merged = dict(self.values)
        merged.update(values)
        return replace(self, values=merged)


def feedback_width(arch: Architecture, learner: LearnerConfig) -> int:
    return arch.layer_widths[-1]


def init_meta_params(
    arch: Architecture,
    learner: LearnerConfig,
    rng: np.random.Generator,
    *,
    init_beta: float = 0.5,
    init_alpha: float = 0.0,
    feedback_scale: float = 1.0,
    frozen_groups=(),
) -> MetaParams:
    """He-initialized forward weights, zero biases, random feedback, alpha = init_alpha."""
    values: dict[str, np.ndarray] = {}
    for layer in range(arch.n_layers):
        out_w, in_w = arch.shape(layer)
        values[f"W{layer}"] = rng.normal(0.0, np.sqrt(2.0 / in_w), size=(out_w, in_w))
        values[f"c{layer}"] = np.zeros(out_w)
    plastic = range(arch.first_plastic, arch.n_layers)
    if learner.kind == "flp":
        fb_dim = feedback_width(arch, learner)
        for layer in plastic:
            if layer == arch.readout and learner.clamp_output:
                continue
            width = arch.layer_widths[layer + 1]
            values[f"B{layer}"] = rng.normal(0.0, feedback_scale / np.sqrt(fb_dim), size=(width, fb_dim))
            values[f"fb{layer}"] = np.zeros(width)
            if learner.fixed_beta is None:
                values[f"beta{layer}"] = np.asarray(np.log(init_beta / (1.0 - init_beta)))
    for layer in plastic:
        out_w, in_w = arch.shape(layer)
        values[f"aW{layer}"] = np.full((out_w, in_w), float(init_alpha))
        values[f"ac{layer}"] = np.full(out_w, float(init_alpha))
    return MetaParams(arch, learner, values, frozenset(frozen_groups))

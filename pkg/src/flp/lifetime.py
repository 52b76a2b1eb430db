"""Lifetime driver shared by the FLP learner and the gradient baseline.

Frozen layers never change within a lifetime, so their output for every
training and query input is computed in one batched pass up front. Each
step then only touches the plastic layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import Architecture, ForwardState, layer_forward
from .params import MetaParams
from .tasks import Episode


@dataclass
class StepRecord:
    step: int
    subtask: int
    pre: dict[int, np.ndarray]  # layer -> output before feedback; key first_plastic-1 is the input
    post: dict[int, np.ndarray]  # layer -> postsynaptic activity used by the rule
    updates: dict[int, tuple[np.ndarray, np.ndarray]]  # layer -> (dW, dc)
    prediction: np.ndarray
    target: np.ndarray


@dataclass
class LifetimeTrace:
    arch: Architecture
    initial_weights: dict[int, np.ndarray]
    initial_biases: dict[int, np.ndarray]
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def weights_after(self, n_steps: int) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
        """Plastic weights after the first ``n_steps`` updates, replayed from the trace."""
        ws = dict(self.initial_weights)
        cs = dict(self.initial_biases)
        for rec in self.records[:n_steps]:
            for layer, (dw, dc) in rec.updates.items():
                ws[layer] = ws[layer] + dw
                cs[layer] = cs[layer] + dc
        return ws, cs


@dataclass
class Lifetime:
    state: ForwardState
    trace: LifetimeTrace | None
    query_prediction: Tensor
    query_loss: Tensor


StepFn = Callable[..., StepRecord | None]


def frozen_features(state: ForwardState, x) -> Tensor:
    """Output of the frozen prefix of the network (the input itself if nothing is frozen)."""
    arch = state.arch
    h = ad.as_tensor(x)
    for layer in range(arch.first_plastic):
        h = layer_forward(arch, layer, h, state.weights[layer], state.biases[layer])
    return h


def plastic_forward(state: ForwardState, h: Tensor) -> dict[int, Tensor]:
    """Activations of the plastic layers; key ``first_plastic - 1`` holds the input."""
    arch = state.arch
    acts = {arch.first_plastic - 1: h}
    for layer in range(arch.first_plastic, arch.n_layers):
        h = layer_forward(arch, layer, h, state.weights[layer], state.biases[layer])
        acts[layer] = h
    return acts


def loss_fn(meta: MetaParams, prediction: Tensor, targets: np.ndarray) -> Tensor:
    if meta.learner.loss == "mse":
        return ad.mse_loss(prediction, targets)
    return ad.softmax_cross_entropy(prediction, np.asarray(targets).argmax(axis=-1))


def initial_state(meta: MetaParams, params: dict[str, Tensor]) -> ForwardState:
    arch = meta.arch
    return ForwardState(
        arch,
        [params[f"W{i}"] for i in range(arch.n_layers)],
        [params[f"c{i}"] for i in range(arch.n_layers)],
    )


def run(
    meta: MetaParams,
    episode: Episode,
    step_fn: StepFn,
    params: dict[str, Tensor] | None = None,
    record: bool = True,
) -> Lifetime:
    """Apply ``step_fn`` to each batch in order, then score the queries with plasticity off."""
    if params is None:
        params = meta.tensors()
    arch = meta.arch
    state = initial_state(meta, params)
    steps, batch, in_dim = episode.inputs.shape
    if in_dim != arch.layer_widths[0]:
        raise ValueError(f"episode input width {in_dim} does not match network input {arch.layer_widths[0]}")

    n_train = steps * batch
    stacked = np.concatenate([episode.inputs.reshape(n_train, in_dim), episode.query_inputs])
    feats = frozen_features(state, stacked)

    trace = None
    if record:
        trace = LifetimeTrace(
            arch,
            {i: state.weights[i].data for i in range(arch.first_plastic, arch.n_layers)},
            {i: state.biases[i].data for i in range(arch.first_plastic, arch.n_layers)},
        )
    subtasks = episode.subtasks
    for step in range(steps):
        h = ad.take_rows(feats, slice(step * batch, (step + 1) * batch))
        rec = step_fn(meta, params, state, h, episode.targets[step], step, int(subtasks[step]), record)
        if trace is not None:
            trace.records.append(rec)

    q_feats = ad.take_rows(feats, slice(n_train, None))
    q_pred = plastic_forward(state, q_feats)[arch.readout]
    return Lifetime(state, trace, q_pred, loss_fn(meta, q_pred, episode.query_targets))


def beta_tensor(meta: MetaParams, params: dict[str, Tensor], layer: int):
    if meta.learner.fixed_beta is not None:
        return float(meta.learner.fixed_beta)
    return ad.sigmoid(params[f"beta{layer}"])

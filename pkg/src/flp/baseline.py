"""Gradient-based inner loop: online SGD with per-weight learning rates.

The inner gradient is backprop written out by hand in tape primitives, so
the meta-gradient is an ordinary first-order reverse pass through the
whole lifetime. ReLU derivative masks enter as constants, which is exact
because the second derivative of ReLU is zero almost everywhere.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lifetime import Lifetime, StepRecord, plastic_forward, run
from .network import ForwardState
from .params import MetaParams
from .tasks import Episode


def output_delta(y_hat: Tensor, y: np.ndarray, loss: str) -> Tensor:
    """Gradient of the batch loss with respect to the readout output."""
    y = np.asarray(y, dtype=np.float64).reshape(y_hat.shape)
    if loss == "mse":
        return ad.mul(ad.sub(y_hat, y), 2.0 / y.size)
    return ad.mul(ad.sub(ad.softmax(y_hat), y), 1.0 / y.shape[0])


def inner_gradients(
    state: ForwardState, acts: dict[int, Tensor], y: np.ndarray, loss: str
) -> dict[int, tuple[Tensor, Tensor]]:
    """Loss gradients for every plastic layer's (weights, bias) at the current weights."""
    arch = state.arch
    first = arch.first_plastic
    delta = output_delta(acts[arch.readout], y, loss)
    grads = {}
    for layer in range(arch.readout, first - 1, -1):
        grads[layer] = (ad.matmul(ad.transpose(delta), acts[layer - 1]), ad.sum(delta, axis=0))
        if layer > first:
            mask = (acts[layer - 1].data > 0).astype(np.float64)
            delta = ad.mul(ad.matmul(delta, state.weights[layer]), mask)
    return grads


def inner_grad_step(
    meta: MetaParams,
    params: dict[str, Tensor],
    state: ForwardState,
    h: Tensor,
    y: np.ndarray,
    step: int = 0,
    subtask: int = -1,
    record: bool = True,
) -> StepRecord | None:
    """``W <- W - alpha * dL/dW`` on every plastic layer; frozen layers untouched."""
    arch = state.arch
    acts = plastic_forward(state, h)
    grads = inner_gradients(state, acts, y, meta.learner.loss)
    updates = {}
    for layer, (gW, gc) in grads.items():
        dW = ad.neg(ad.mul(params[f"aW{layer}"], gW))
        dc = ad.neg(ad.mul(params[f"ac{layer}"], gc))
        state.weights[layer] = ad.add(state.weights[layer], dW)
        state.biases[layer] = ad.add(state.biases[layer], dc)
        updates[layer] = (dW.data, dc.data)
    if not record:
        return None
    y_hat = acts[arch.readout]
    return StepRecord(
        step,
        subtask,
        {k: v.data for k, v in acts.items()},
        {},
        updates,
        y_hat.data,
        np.asarray(y, dtype=np.float64).reshape(y_hat.shape),
    )


def run_lifetime(
    meta: MetaParams, episode: Episode, params: dict[str, Tensor] | None = None, record: bool = True
) -> Lifetime:
    if meta.learner.kind != "gradient":
        raise ValueError("run_lifetime here expects gradient-baseline meta-parameters")
    return run(meta, episode, inner_grad_step, params, record)

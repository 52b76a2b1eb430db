"""Within-lifetime learning by direct feedback and local Oja/Hebb plasticity.

Each step runs three stages on the plastic layers:

1. forward pass, keeping the activations before feedback;
2. the feedback signal (target, or target minus prediction) drives every
   plastic layer through its own linear pathway and is blended into that
   layer's activity with strength beta;
3. every plastic synapse applies the local rule using the blended
   postsynaptic activity and the presynaptic activity chosen by
   ``presyn_mode``.

Batches are handled by averaging the per-example rule over the batch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lifetime import Lifetime, StepRecord, beta_tensor, plastic_forward, run
from .network import ForwardState
from .params import MetaParams
from .tasks import Episode


def feedback_signal(y, y_hat, mode: str = "errors") -> Tensor:
    """The signal sent down the feedback pathways: ``y`` or ``y - y_hat``."""
    if mode == "targets":
        return ad.as_tensor(y)
    if mode != "errors":
        raise ValueError(f"unknown feedback mode {mode!r}")
    y, y_hat = ad.as_tensor(y), ad.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"target shape {y.shape} does not match prediction {y_hat.shape}")
    return ad.sub(y, y_hat)


def feedback_update(x, f, B, beta, b=None) -> Tensor:
    """``(1 - beta) * x + beta * relu(B f - b)`` for a batch ``x`` (n, width) and ``f`` (n, k)."""
    x, f, B = ad.as_tensor(x), ad.as_tensor(f), ad.as_tensor(B)
    if x.data.ndim == 1:
        return ad.reshape(feedback_update(ad.reshape(x, (1, -1)), ad.reshape(f, (1, -1)), B, beta, b), x.shape)
    if B.shape != (x.shape[1], f.shape[1]):
        raise ValueError(f"feedback matrix {B.shape} does not map {f.shape[1]} -> {x.shape[1]}")
    drive = ad.linear(f, B)
    if b is not None:
        drive = ad.sub(drive, b)
    return ad.add(ad.mul(ad.sub(1.0, beta), x), ad.mul(beta, ad.relu(drive)))


def _is_one_hot(y: np.ndarray) -> bool:
    return bool(np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=-1) == 1).all())


def clamp_output(output, y) -> Tensor:
    """Replace the readout's postsynaptic activity with the one-hot target."""
    y = ad.as_tensor(y)
    if not _is_one_hot(y.data):
        raise ValueError("output clamping needs one-hot classification targets")
    if ad.as_tensor(output).shape != y.shape:
        raise ValueError("clamped target shape does not match the readout")
    return Tensor(y.data)


def _as_batch(v) -> Tensor:
    v = ad.as_tensor(v)
    return ad.reshape(v, (1, -1)) if v.data.ndim == 1 else v


def local_delta(W, pre, post, alpha, rule: str = "oja") -> Tensor:
    """``alpha * (<post pre^T> - <post^2> W)`` (Oja) or ``alpha * <post pre^T>`` (Hebb).

    Angle brackets are batch means. ``alpha`` is per synapse (or a scalar).
    """
    W, pre, post = ad.as_tensor(W), _as_batch(pre), _as_batch(post)
    if W.shape != (post.shape[1], pre.shape[1]) or pre.shape[0] != post.shape[0]:
        raise ValueError(f"weights {W.shape} incompatible with pre {pre.shape} and post {post.shape}")
    n = pre.shape[0]
    term = ad.matmul(ad.transpose(post), pre)
    if n > 1:
        term = ad.mul(term, 1.0 / n)
    if rule == "oja":
        decay = ad.reshape(ad.mean(ad.square(post), axis=0), (post.shape[1], 1))
        term = ad.sub(term, ad.mul(decay, W))
    elif rule != "hebb":
        raise ValueError(f"unknown plasticity rule {rule!r}")
    return ad.mul(alpha, term)


def local_bias_delta(c, post, alpha, rule: str = "oja") -> Tensor:
    """The same rule for a bias, whose presynaptic activity is a constant 1."""
    post = _as_batch(post)
    term = ad.mean(post, axis=0)
    if rule == "oja":
        term = ad.sub(term, ad.mul(ad.mean(ad.square(post), axis=0), c))
    return ad.mul(alpha, term)


def oja_update(W, pre, post, alpha) -> Tensor:
    return ad.add(W, local_delta(W, pre, post, alpha, "oja"))


def hebb_update(W, pre, post, alpha) -> Tensor:
    return ad.add(W, local_delta(W, pre, post, alpha, "hebb"))


def flp_step(
    meta: MetaParams,
    params: dict[str, Tensor],
    state: ForwardState,
    h: Tensor,
    y: np.ndarray,
    step: int = 0,
    subtask: int = -1,
    record: bool = True,
) -> StepRecord | None:
    """One feedforward / feedback / plasticity step on the plastic layers of ``state``.

    ``h`` is the batch as seen by the first plastic layer. ``state`` is
    updated in place with the new plastic weights.
    """
    arch, cfg = meta.arch, meta.learner
    first, readout = arch.first_plastic, arch.readout
    acts = plastic_forward(state, h)
    y_hat = acts[readout]
    y_t = Tensor(np.asarray(y, dtype=np.float64).reshape(y_hat.shape))
    f = feedback_signal(y_t, y_hat, cfg.feedback_mode)

    post: dict[int, Tensor] = {}
    for layer in range(first, arch.n_layers):
        if layer == readout and cfg.clamp_output:
            post[layer] = clamp_output(y_hat, y_t)
        else:
            post[layer] = feedback_update(
                acts[layer], f, params[f"B{layer}"], beta_tensor(meta, params, layer), params[f"fb{layer}"]
            )

    updates = {}
    for layer in range(first, arch.n_layers):
        below = layer - 1
        pre = post[below] if (cfg.presyn_mode == "post" and below >= first) else acts[below]
        W, c = state.weights[layer], state.biases[layer]
        dW = local_delta(W, pre, post[layer], params[f"aW{layer}"], cfg.rule)
        dc = local_bias_delta(c, post[layer], params[f"ac{layer}"], cfg.rule)
        state.weights[layer] = ad.add(W, dW)
        state.biases[layer] = ad.add(c, dc)
        updates[layer] = (dW.data, dc.data)

    if not record:
        return None
    return StepRecord(
        step,
        subtask,
        {k: v.data for k, v in acts.items()},
        {k: v.data for k, v in post.items()},
        updates,
        y_hat.data,
        y_t.data,
    )


def run_lifetime(
    meta: MetaParams, episode: Episode, params: dict[str, Tensor] | None = None, record: bool = True
) -> Lifetime:
    if meta.learner.kind != "flp":
        raise ValueError("run_lifetime here expects FLP meta-parameters")
    return run(meta, episode, flp_step, params, record)

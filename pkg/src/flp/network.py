"""Fully connected ReLU networks whose last few layers are plastic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class Architecture:
    """Layer widths from input to output, and how many trailing layers learn.

    Hidden layers use ReLU. The readout is linear; for classification its
    outputs are read as logits.
    """

    layer_widths: tuple[int, ...]
    n_plastic: int = 1

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {widths}")
        if not 0 <= self.n_plastic <= len(widths) - 1:
            raise ValueError(
                f"n_plastic={self.n_plastic} out of range for {len(widths) - 1} weight layers"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def readout(self) -> int:
        return self.n_layers - 1

    @property
    def first_plastic(self) -> int:
        return self.n_layers - self.n_plastic

    def shape(self, layer: int) -> tuple[int, int]:
        return self.layer_widths[layer + 1], self.layer_widths[layer]


def split_params(arch: Architecture) -> tuple[list[int], list[int]]:
    """Indices of (frozen, plastic) weight layers; plastic ones are the last n_plastic."""
    cut = arch.first_plastic
    return list(range(cut)), list(range(cut, arch.n_layers))


def sine_architecture(n_functions: int, width: int, n_layers: int, n_plastic: int,
                      wide_layer: int | None = None, wide_width: int | None = None) -> Architecture:
    """Regression net: input is x plus a one-hot function index, output is scalar."""
    hidden = [width] * (n_layers - 1)
    if wide_layer is not None:
        hidden[wide_layer] = wide_width
    return Architecture((1 + n_functions, *hidden, 1), n_plastic)


@dataclass
class ForwardState:
    """Forward weights (out x in) and biases, plus the last forward pass's activations."""

    arch: Architecture
    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[Tensor] | None = None

    def copy_values(self) -> "ForwardState":
        return ForwardState(
            self.arch,
            [Tensor(w.data.copy()) for w in self.weights],
            [Tensor(c.data.copy()) for c in self.biases],
        )


def layer_forward(arch: Architecture, layer: int, h, w, c) -> Tensor:
    z = ad.linear(h, w, c)
    return z if layer == arch.readout else ad.relu(z)


def forward(state: ForwardState, x, start: int = 0, stop: int | None = None) -> Tensor:
    """Propagate a batch through layers ``start .. stop-1``; caches activations.

    ``state.activations[0]`` is the input and entry ``k`` is the output of
    layer ``start + k - 1``, taken before any feedback.
    """
    arch = state.arch
    stop = arch.n_layers if stop is None else stop
    h = ad.as_tensor(x)
    single = h.data.ndim == 1
    if single:
        h = ad.reshape(h, (1, -1))
    if h.shape[1] != arch.layer_widths[start]:
        raise ValueError(
            f"input width {h.shape[1]} does not match layer {start} width {arch.layer_widths[start]}"
        )
    acts = [h]
    for layer in range(start, stop):
        h = layer_forward(arch, layer, h, state.weights[layer], state.biases[layer])
        acts.append(h)
    state.activations = acts
    if single:
        return ad.reshape(h, (h.shape[1],))
    return h


def predict(weights, biases, arch: Architecture, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass, no tape."""
    h = np.asarray(x, dtype=np.float64)
    for layer in range(arch.n_layers):
        w = np.asarray(weights[layer].data if isinstance(weights[layer], Tensor) else weights[layer])
        c = np.asarray(biases[layer].data if isinstance(biases[layer], Tensor) else biases[layer])
        h = h @ w.T + c
        if layer != arch.readout:
            h = np.maximum(h, 0.0)
    return h

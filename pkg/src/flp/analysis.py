"""Diagnostics of trained learners: readout probes, cross-task interference,
alignment of updates with the loss gradient, and update magnitudes.

Every function here reads checkpoints, traces and episodes without
modifying them. Results are lists of small records that
:func:`write_csv` exports with the record's field names as the header.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .lifetime import LifetimeTrace, loss_fn
from .network import layer_forward, predict
from .params import MetaParams
from .tasks import Episode

PROBE_SET_SIZE = 64


@dataclass(frozen=True)
class ProbeRecord:
    n_plastic: int
    probe_loss: float
    lifetime_loss: float


@dataclass(frozen=True)
class InterferenceRecord:
    t: int
    drift: float


@dataclass(frozen=True)
class AlignmentRecord:
    step: int
    layer: int
    cosine: float | None  # None when either vector is zero


@dataclass(frozen=True)
class MagnitudeRecord:
    step: int
    layer: int
    norm: float


def write_csv(records: Iterable, path: str | Path, record_type=None) -> Path:
    """One row per record; missing values are written as empty cells."""
    records = list(records)
    record_type = record_type or (type(records[0]) if records else None)
    if record_type is None:
        raise ValueError("cannot infer the CSV header from an empty record list; pass record_type")
    names = [f.name for f in fields(record_type)]
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for rec in records:
            row = []
            for name in names:
                v = getattr(rec, name)
                row.append("" if v is None else repr(float(v)) if isinstance(v, float) else v)
            writer.writerow(row)
    return path


def _initial_weights(meta: MetaParams) -> tuple[list[np.ndarray], list[np.ndarray]]:
    n = meta.arch.n_layers
    return [meta.values[f"W{i}"] for i in range(n)], [meta.values[f"c{i}"] for i in range(n)]


# feature probe -------------------------------------------------------------


def readout_features(meta: MetaParams, x: np.ndarray) -> np.ndarray:
    """Activity entering the readout with every weight at its initialization."""
    ws, cs = _initial_weights(meta)
    h = np.asarray(x, dtype=np.float64)
    for layer in range(meta.arch.readout):
        h = np.maximum(h @ ws[layer].T + cs[layer], 0.0)
    return h


def fit_readout(
    features: np.ndarray, targets: np.ndarray, loss: str, n_epochs: int
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Full-batch gradient descent on a zero-initialized linear readout.

    The step is 1/L for the loss's smoothness constant L, so the training
    loss never increases. Returns (weights, bias, loss per epoch).
    """
    n, width = features.shape
    k = targets.shape[1]
    aug = np.hstack([features, np.ones((n, 1))])
    top = float(np.linalg.eigvalsh(aug.T @ aug).max())
    smooth = 2.0 * top / (n * k) if loss == "mse" else 0.5 * top / n
    lr = 1.0 / smooth
    theta = np.zeros((width + 1, k))
    history = []
    labels = targets.argmax(axis=1)
    for _ in range(n_epochs):
        out = aug @ theta
        if loss == "mse":
            resid = out - targets
            history.append(float(np.mean(resid**2)))
            g_out = 2.0 * resid / (n * k)
        else:
            z = out - out.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            history.append(float(-np.mean(np.log(p[np.arange(n), labels]))))
            g_out = (p - targets) / n
        theta = theta - lr * (aug.T @ g_out)
    return theta[:-1].T, theta[-1], history


def _metric(pred: np.ndarray, targets: np.ndarray, loss: str) -> float:
    if loss == "mse":
        return float(np.mean((pred - targets) ** 2))
    return 100.0 * float(np.mean(pred.argmax(axis=1) != targets.argmax(axis=1)))


def feature_probe(
    meta: MetaParams, episodes: list[Episode], n_epochs: int = 1000, lifetime_metric=None
) -> ProbeRecord:
    """Fit a fresh readout on frozen initial features for each episode and score its queries.

    The probe metric is query MSE for regression and percent error for
    classification, averaged over ``episodes``. ``lifetime_metric`` (a
    function of meta and episode) supplies the matching lifetime number.
    """
    loss = meta.learner.loss
    probe, life = [], []
    for ep in episodes:
        x = ep.inputs.reshape(-1, ep.inputs.shape[-1])
        y = ep.targets.reshape(-1, ep.targets.shape[-1])
        w, c, _ = fit_readout(readout_features(meta, x), y, loss, n_epochs)
        pred = readout_features(meta, ep.query_inputs) @ w.T + c
        probe.append(_metric(pred, ep.query_targets, loss))
        if lifetime_metric is not None:
            life.append(lifetime_metric(meta, ep))
    return ProbeRecord(
        meta.arch.n_plastic, float(np.mean(probe)), float(np.mean(life)) if life else float("nan")
    )


# interference --------------------------------------------------------------


def _segments(episode: Episode) -> list[tuple[int, int, int]]:
    """(sub-task, first step, end step) for each contiguous run of batches."""
    subs = episode.subtasks
    if (subs < 0).any():
        raise ValueError("interference needs batches drawn from a single sub-task each")
    out, start = [], 0
    for step in range(1, len(subs) + 1):
        if step == len(subs) or subs[step] != subs[start]:
            out.append((int(subs[start]), start, step))
            start = step
    return out


def probe_inputs(episode: Episode, subtasks: Iterable[int], rng: np.random.Generator) -> np.ndarray:
    """Up to 64 training inputs from each listed sub-task."""
    xs = episode.inputs.reshape(-1, episode.inputs.shape[-1])
    owner = episode.example_subtasks.reshape(-1)
    chosen = []
    for s in subtasks:
        rows = np.flatnonzero(owner == s)
        take = min(PROBE_SET_SIZE, rows.size)
        chosen.append(xs[rng.choice(rows, size=take, replace=False)])
    return np.concatenate(chosen) if chosen else np.zeros((0, xs.shape[1]))


def interference(
    trace: LifetimeTrace, meta: MetaParams, episode: Episode, seed: int = 0
) -> list[InterferenceRecord]:
    """Mean squared output change on earlier sub-tasks' data across each later segment."""
    if episode.ordering != "continual":
        raise ValueError(f"interference is defined for continual episodes, got {episode.ordering!r}")
    if len(trace) != episode.n_steps:
        raise ValueError(f"trace has {len(trace)} steps, episode has {episode.n_steps}")
    segs = _segments(episode)
    ws0, cs0 = _initial_weights(meta)
    rng = np.random.default_rng(seed)
    probes = {s: probe_inputs(episode, [s], rng) for s, _, _ in segs}

    def outputs(n_steps: int, x: np.ndarray) -> np.ndarray:
        pw, pc = trace.weights_after(n_steps)
        ws = [pw.get(i, w) for i, w in enumerate(ws0)]
        cs = [pc.get(i, c) for i, c in enumerate(cs0)]
        return predict(ws, cs, meta.arch, x)

    records = []
    for t, (_, start, end) in enumerate(segs, start=1):
        if t < 2:
            continue
        x = np.concatenate([probes[s] for s, _, _ in segs[: t - 1]])
        drift = float(np.mean((outputs(end, x) - outputs(start, x)) ** 2))
        records.append(InterferenceRecord(t, drift))
    return records


# gradient alignment ----------------------------------------------------------


def _cosine(u: np.ndarray, v: np.ndarray) -> float | None:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return None
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def loss_gradient(
    meta: MetaParams,
    weights: dict[int, np.ndarray],
    biases: dict[int, np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Batch-loss gradient for the layers in ``weights``; other layers use their initialization."""
    arch = meta.arch
    ws0, cs0 = _initial_weights(meta)
    tape = ad.Tape()
    leaves = {i: (tape.leaf(weights[i], f"W{i}"), tape.leaf(biases[i], f"c{i}")) for i in weights}
    h = ad.as_tensor(x)
    for layer in range(arch.n_layers):
        w, c = leaves.get(layer, (ws0[layer], cs0[layer]))
        h = layer_forward(arch, layer, h, w, c)
    loss = loss_fn(meta, h, np.asarray(y, dtype=np.float64).reshape(h.shape))
    order = sorted(leaves)
    grads = ad.grad(loss, [t for i in order for t in leaves[i]])
    return {i: (grads[2 * k], grads[2 * k + 1]) for k, i in enumerate(order)}


def gradient_alignment(
    meta: MetaParams,
    weights: dict[int, np.ndarray],
    biases: dict[int, np.ndarray],
    batch: tuple[np.ndarray, np.ndarray],
    updates: dict[int, tuple[np.ndarray, np.ndarray]],
    step: int = 0,
    rates: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
) -> list[AlignmentRecord]:
    """Cosine between each layer's actual (dW, dc) and the negative loss gradient.

    ``weights``/``biases`` are the plastic layers before the update. With
    ``rates`` given, the reference direction is ``-rates * gradient``, the
    step a per-weight-rate gradient learner would take.
    """
    grads = loss_gradient(meta, weights, biases, *batch)
    out = []
    for layer in sorted(updates):
        gW, gc = grads[layer]
        if rates is not None:
            gW, gc = rates[layer][0] * gW, rates[layer][1] * gc
        ref = -np.concatenate([gW.ravel(), gc.ravel()])
        dW, dc = updates[layer]
        out.append(AlignmentRecord(step, layer, _cosine(np.concatenate([dW.ravel(), dc.ravel()]), ref)))
    return out


def lifetime_alignment(
    trace: LifetimeTrace, meta: MetaParams, episode: Episode, use_rates: bool = False
) -> list[AlignmentRecord]:
    """:func:`gradient_alignment` at every step of a recorded lifetime."""
    ws, cs = dict(trace.initial_weights), dict(trace.initial_biases)
    rates = None
    if use_rates:
        rates = {i: (meta.values[f"aW{i}"], meta.values[f"ac{i}"]) for i in ws}
    out = []
    for rec in trace.records:
        batch = (episode.inputs[rec.step], episode.targets[rec.step])
        out += gradient_alignment(meta, ws, cs, batch, rec.updates, rec.step, rates)
        for layer, (dw, dc) in rec.updates.items():
            ws[layer] = ws[layer] + dw
            cs[layer] = cs[layer] + dc
    return out


# update magnitudes -------------------------------------------------------------


def update_magnitudes(trace: LifetimeTrace) -> list[MagnitudeRecord]:
    """Frobenius norm of every recorded weight update."""
    return [
        MagnitudeRecord(rec.step, layer, float(np.linalg.norm(dw)))
        for rec in trace.records
        for layer, (dw, _) in sorted(rec.updates.items())
    ]

"""Outer loop: unroll a lifetime on a tape, differentiate the query loss, Adam-step.

One episode per meta-step by default. Training episodes come from a
generator seeded by ``config.seed`` whose state is checkpointed, so a
resumed run continues exactly where an uninterrupted one would be.
Evaluation always replays the same held-out episodes (``eval_seed``).
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import baseline, plasticity
from .adam import AdamState, adam_step
from .autodiff import NumericError
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .lifetime import Lifetime
from .network import Architecture, sine_architecture
from .params import (
    GROUPS,
    MetaParams,
    classification_learner,
    init_meta_params,
    regression_learner,
)
from .tasks import (
    ClassDataset,
    Episode,
    MetaSplit,
    SineTaskConfig,
    load_omniglot,
    meta_split,
    sample_classification_episode,
    sample_sine_episode,
    synth_classes,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "metric", "value", "stderr", "wallclock_s")


def run_lifetime(meta: MetaParams, episode: Episode, params=None, record: bool = True) -> Lifetime:
    if meta.learner.kind == "flp":
        return plasticity.run_lifetime(meta, episode, params, record)
    return baseline.run_lifetime(meta, episode, params, record)


# tasks -----------------------------------------------------------------------


class TaskFamily:
    """Builds the architecture and samples meta-train / held-out episodes for a config."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    @cached_property
    def sine(self) -> SineTaskConfig:
        c = self.cfg
        return SineTaskConfig(
            n_functions=c.n_functions,
            x_range=(c.x_min, c.x_max),
            n_batches=c.n_batches,
            batch_size=c.batch_size,
            queries_per_function=c.queries_per_function,
        )

    @cached_property
    def split(self) -> MetaSplit:
        c = self.cfg
        if c.task == "omniglot":
            return load_omniglot(c.omniglot_path, c.resolution, c.n_train_classes, c.n_test_classes)
        data = synth_classes(
            np.random.default_rng(c.data_seed),
            c.synth_train_classes + c.synth_test_classes,
            c.synth_dim,
            c.synth_examples,
            c.synth_noise,
        )
        return meta_split(data, c.synth_train_classes, c.synth_test_classes)

    @property
    def input_dim(self) -> int:
        if self.cfg.task == "sine":
            return self.sine.input_dim
        if self.cfg.task == "synthetic":
            return self.cfg.synth_dim
        return self.cfg.resolution**2

    def architecture(self, n_plastic: int | None = None) -> Architecture:
        c = self.cfg
        n_plastic = c.n_plastic if n_plastic is None else n_plastic
        if c.task == "sine":
            return sine_architecture(c.n_functions, c.width, c.n_layers, n_plastic, c.wide_layer, c.wide_width)
        hidden = [c.width] * (c.n_layers - 1)
        return Architecture((self.input_dim, *hidden, c.n_way), n_plastic)

    def learner(self):
        c = self.cfg
        kw = dict(rule=c.rule, presyn_mode=c.presyn_mode)
        if c.feedback_mode is not None:
            kw["feedback_mode"] = c.feedback_mode
        if c.task == "sine":
            return regression_learner(c.learner, **kw)
        return classification_learner(c.learner, **kw)

    def episode(self, rng: np.random.Generator, ordering: str | None = None, held_out: bool = False) -> Episode:
        c = self.cfg
        ordering = c.ordering if ordering is None else ordering
        if c.task == "sine":
            return sample_sine_episode(rng, self.sine, ordering)
        data: ClassDataset = self.split.test if held_out else self.split.train
        return sample_classification_episode(data, rng, c.n_way, c.k_shot, ordering, c.queries_per_class)


def init_meta(cfg: TrainConfig, family: TaskFamily | None = None) -> MetaParams:
    family = family or TaskFamily(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    learner = family.learner()
    meta = init_meta_params(
        family.architecture(),
        learner,
        rng,
        init_beta=cfg.init_beta,
        init_alpha=cfg.init_alpha,
        feedback_scale=cfg.feedback_scale,
        frozen_groups=cfg.frozen_groups(),
    )
    if cfg.init_from:
        meta = warm_start(meta, load_checkpoint(cfg.init_from).meta)
    return meta


def warm_start(meta: MetaParams, source: MetaParams) -> MetaParams:
    """Copy the forward-weight initialization of ``source`` into ``meta``."""
    if source.arch.layer_widths != meta.arch.layer_widths:
        raise ValueError(
            f"cannot warm start from widths {source.arch.layer_widths}; need {meta.arch.layer_widths}"
        )
    return meta.with_values({k: v.copy() for k, v in source.values.items() if k[0] in "Wc"})


def new_adam_states(cfg: TrainConfig) -> dict[str, AdamState]:
    return {g: AdamState(lr) for g, lr in cfg.group_lrs().items()}


# one meta-step -----------------------------------------------------------------


def meta_gradient(meta: MetaParams, episode: Episode) -> tuple[float, dict[str, np.ndarray]]:
    """Query loss of one lifetime and its gradient for every learnable meta-parameter."""
    tape = ad.Tape()
    params = meta.tensors(tape)
    life = run_lifetime(meta, episode, params, record=False)
    names = [n for n in params if meta.learnable(n)]
    grads = ad.grad(life.query_loss, [params[n] for n in names])
    return life.query_loss.item(), dict(zip(names, grads))


def meta_step(
    meta: MetaParams, episodes: Episode | list[Episode], adam: dict[str, AdamState]
) -> tuple[MetaParams, float]:
    """Average the meta-gradient over ``episodes`` and take one Adam step per group.

    ``adam`` is advanced in place. A non-finite value anywhere aborts the
    step without touching ``meta``.
    """
    if isinstance(episodes, Episode):
        episodes = [episodes]
    total, losses = None, []
    for ep in episodes:
        try:
            loss, grads = meta_gradient(meta, ep)
        except NumericError as exc:
            worst = {k: float(np.abs(v).max()) for k, v in meta.values.items()}
            raise NumericError(f"{exc}; largest |value| per parameter: {worst}") from exc
        losses.append(loss)
        total = grads if total is None else {k: total[k] + grads[k] for k in total}
    scale = 1.0 / len(episodes)
    grads = {k: v * scale for k, v in total.items()}
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite meta-gradient for {name}")

    updated = {}
    for group in GROUPS:
        names = [n for n in grads if meta.group(n) == group]
        if not names:
            continue
        new, _ = adam_step({n: meta.values[n] for n in names}, {n: grads[n] for n in names}, adam[group])
        updated.update(new)
    return meta.with_values(updated), float(np.mean(losses))


# evaluation ------------------------------------------------------------------


def lifetime_metric(meta: MetaParams, episode: Episode) -> float:
    """Query MSE (regression) or percent error (classification) after one lifetime.

    A lifetime whose plastic weights overflow scores ``inf``.
    """
    try:
        life = run_lifetime(meta, episode, record=False)
    except NumericError as exc:
        log.warning("evaluation lifetime diverged: %s", str(exc).split(";")[0])
        return float("inf")
    if meta.learner.loss == "mse":
        return life.query_loss.item()
    wrong = life.query_prediction.data.argmax(axis=1) != episode.query_labels
    return 100.0 * float(wrong.mean())


def eval_episodes(cfg: TrainConfig, n_lifetimes: int, ordering: str | None = None, family=None) -> list[Episode]:
    family = family or TaskFamily(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.eval_seed, 7]))
    return [family.episode(rng, ordering, held_out=True) for _ in range(n_lifetimes)]


def _metric_worker(args):
    meta, ep = args
    return lifetime_metric(meta, ep)


def evaluate(
    source: Checkpoint | MetaParams,
    n_lifetimes: int | None = None,
    ordering: str | None = None,
    cfg: TrainConfig | None = None,
    episodes: list[Episode] | None = None,
) -> tuple[float, float, np.ndarray]:
    """Mean metric, its standard error across lifetimes, and the per-lifetime values."""
    meta = source.meta if isinstance(source, Checkpoint) else source
    if cfg is None:
        if not isinstance(source, Checkpoint) or source.config is None:
            raise ValueError("evaluate needs a config to sample held-out episodes")
        cfg = TrainConfig(**source.config)
    if episodes is None:
        n = cfg.eval_lifetimes if n_lifetimes is None else n_lifetimes
        episodes = eval_episodes(cfg, n, ordering)
    workers = int(os.environ.get("FLP_THREADS", "1") or 1)
    if workers > 1 and len(episodes) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            values = np.array(list(pool.map(_metric_worker, [(meta, ep) for ep in episodes])))
    else:
        values = np.array([lifetime_metric(meta, ep) for ep in episodes])
    stderr = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(values.mean()), stderr, values


def metric_name(cfg: TrainConfig) -> str:
    return "error_pct" if cfg.is_classification else "mse"


# training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[tuple]


def _write_metrics(path: Path, rows: list[tuple], append: bool) -> None:
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


def _format_row(step: int, metric: str, value: float, stderr: float, wall: float) -> tuple:
    return (step, metric, repr(float(value)), repr(float(stderr)), f"{wall:.3f}")


def meta_train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | str | Path | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Meta-train for ``cfg.n_meta_epochs`` episodes (or until ``stop_at``).

    With ``out_dir`` set, appends to ``metrics.csv`` and writes
    ``checkpoint.flp`` at each checkpoint interval and at the end.
    """
    family = TaskFamily(cfg)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, cfg.hash())
        meta, adam, start = ckpt.meta, ckpt.adam, ckpt.step
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
    else:
        meta = init_meta(cfg, family)
        adam = new_adam_states(cfg)
        start = 0
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None:
            _write_metrics(out / "metrics.csv", [], append=False)
    stop = cfg.n_meta_epochs if stop_at is None else min(stop_at, cfg.n_meta_epochs)
    episodes_eval = eval_episodes(cfg, cfg.eval_lifetimes, family=family) if cfg.eval_interval else []
    name = metric_name(cfg)
    t0 = time.perf_counter()
    rows: list[tuple] = []
    recent: list[float] = []

    def checkpoint(step: int) -> Checkpoint:
        return Checkpoint(meta, adam, step, cfg.to_dict(), cfg.hash(), rng.bit_generator.state)

    for step in range(start + 1, stop + 1):
        batch = [family.episode(rng) for _ in range(cfg.meta_batch)]
        try:
            meta, loss = meta_step(meta, batch, adam)
            recent.append(loss)
        except NumericError as exc:
            if not cfg.skip_nonfinite:
                raise
            log.warning("step %d skipped: %s", step, exc)
        if cfg.eval_interval and step % cfg.eval_interval == 0:
            mean, err, _ = evaluate(meta, cfg=cfg, episodes=episodes_eval)
            row = _format_row(step, name, mean, err, time.perf_counter() - t0)
            rows.append(row)
            if out is not None:
                _write_metrics(out / "metrics.csv", [row], append=True)
            log.info("step %d  train loss %.5g  eval %s %.5g (%.2g)", step, np.mean(recent) if recent else float("nan"), name, mean, err)
            recent.clear()
        if out is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            save_checkpoint(checkpoint(step), out / f"checkpoint_{step:07d}.flp")

    final = checkpoint(stop)
    if out is not None:
        save_checkpoint(final, out / "checkpoint.flp")
    return TrainResult(final, rows)

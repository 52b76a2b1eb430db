"""Run configuration: one flat key-value document per run, with named presets.

Config files are YAML mappings of :class:`TrainConfig` fields. A file may
name a ``preset``; its own keys then override the preset's values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

TASKS = ("sine", "synthetic", "omniglot")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "sine"
    learner: str = "flp"
    rule: str = "oja"
    presyn_mode: str = "pre"
    # errors for regression and targets for classification when unset
    feedback_mode: str | None = None
    n_plastic: int = 2
    ordering: str = "iid"
    seed: int = 0

    # network
    n_layers: int = 4
    width: int = 64
    wide_layer: int | None = None
    wide_width: int | None = None

    # sine regression
    n_functions: int = 3
    n_batches: int = 60
    batch_size: int = 16
    queries_per_function: int = 1
    x_min: float = -5.0
    x_max: float = 5.0

    # classification
    n_way: int = 5
    k_shot: int = 5
    queries_per_class: int = 1
    data_seed: int = 0
    synth_train_classes: int = 200
    synth_test_classes: int = 100
    synth_dim: int = 32
    synth_examples: int = 20
    synth_noise: float = 0.1
    omniglot_path: str | None = None
    resolution: int = 14
    n_train_classes: int = 963
    n_test_classes: int = 660

    # meta-optimization (Adam); readout plasticity rate defaults to the other one
    n_meta_epochs: int = 2000
    meta_batch: int = 1
    lr_feedforward: float = 1e-4
    lr_feedback: float = 1e-4
    lr_beta: float = 1e-4
    lr_plasticity: float = 1e-8
    lr_plasticity_readout: float | None = None
    init_beta: float = 0.5
    init_alpha: float = 0.0
    feedback_scale: float = 1.0
    freeze_w_init: bool = False
    learn_beta: bool = True
    learn_alpha: bool = True
    learn_feedback: bool = True
    init_from: str | None = None
    # a lifetime that overflows skips its meta-step instead of ending the run
    skip_nonfinite: bool = True

    # evaluation and checkpointing
    eval_interval: int = 500
    eval_lifetimes: int = 50
    eval_seed: int = 1000
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        for name in ("lr_feedforward", "lr_feedback", "lr_beta", "lr_plasticity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lr_plasticity_readout is not None and self.lr_plasticity_readout < 0:
            raise ValueError("lr_plasticity_readout must be nonnegative")

    @property
    def is_classification(self) -> bool:
        return self.task != "sine"

    def group_lrs(self) -> dict[str, float]:
        readout = self.lr_plasticity if self.lr_plasticity_readout is None else self.lr_plasticity_readout
        return {
            "feedforward": self.lr_feedforward,
            "feedback": self.lr_feedback,
            "beta": self.lr_beta,
            "plasticity": self.lr_plasticity,
            "plasticity_readout": readout,
        }

    def frozen_groups(self) -> frozenset[str]:
        frozen = set()
        if self.freeze_w_init:
            frozen.add("feedforward")
        if not self.learn_beta:
            frozen.add("beta")
        if not self.learn_alpha:
            frozen.update(("plasticity", "plasticity_readout"))
        if not self.learn_feedback:
            frozen.add("feedback")
        return frozenset(frozen)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


# Full-scale values follow the published hyperparameter tables; desk presets
# shrink the problem and raise the meta learning rates to match.
PRESETS: dict[str, dict] = {
    "regression-full": dict(
        task="sine", n_layers=9, width=300, wide_layer=5, wide_width=900, n_functions=10,
        n_batches=400, batch_size=32, n_plastic=2, n_meta_epochs=20000,
        lr_feedforward=1e-4, lr_feedback=1e-4, lr_beta=1e-4, lr_plasticity=1e-8,
        eval_interval=1000, eval_lifetimes=50,
    ),
    "regression-desk": dict(
        task="sine", n_layers=4, width=64, n_functions=3, n_batches=60, batch_size=16,
        n_plastic=2, n_meta_epochs=2000, queries_per_function=8,
        lr_feedforward=1e-3, lr_feedback=1e-3, lr_beta=1e-3, lr_plasticity=1e-5,
        lr_plasticity_readout=1e-4, eval_interval=500, eval_lifetimes=50,
    ),
    "omniglot-full": dict(
        task="omniglot", n_layers=3, width=128, resolution=28, n_train_classes=963,
        n_test_classes=660, n_plastic=2, n_meta_epochs=40000, lr_feedforward=1e-4,
        lr_feedback=1e-4, lr_plasticity=1e-3, lr_plasticity_readout=1e-5,
        eval_interval=2000, eval_lifetimes=500,
    ),
    "omniglot-desk": dict(
        task="omniglot", n_layers=3, width=64, resolution=14, n_train_classes=64,
        n_test_classes=20, n_plastic=2, n_meta_epochs=2000, lr_feedforward=1e-3,
        lr_feedback=1e-3, lr_plasticity=1e-3, lr_plasticity_readout=1e-3,
        eval_interval=500, eval_lifetimes=500,
    ),
    "synthetic-desk": dict(
        task="synthetic", n_layers=3, width=64, n_plastic=2, n_meta_epochs=2000, synth_noise=1.5,
        lr_feedforward=1e-3, lr_feedback=1e-3, lr_plasticity=1e-3, lr_plasticity_readout=1e-3,
        eval_interval=500, eval_lifetimes=500,
    ),
}

DEFAULT_PRESET = {"sine": "regression-desk", "synthetic": "synthetic-desk", "omniglot": "omniglot-desk"}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def from_mapping(data: dict) -> TrainConfig:
    data = dict(data or {})
    name = data.pop("preset", None)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    if name and name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}")
    base = dict(PRESETS[name]) if name else {}
    return TrainConfig(**{**base, **data})


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    return from_mapping(yaml.safe_load(path.read_text()))


def dump_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))

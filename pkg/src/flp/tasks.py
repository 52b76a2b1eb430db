"""Episode generators: incremental sine regression and online few-shot classification.

Every generator draws from one ``numpy.random.Generator``. The example pool
and the queries are drawn before the presentation order, so an i.i.d. and a
continual episode built from the same seed contain the same examples.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

ORDERINGS = ("iid", "continual")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".pgm", ".ppm"}


@dataclass
class Episode:
    """One lifetime's data.

    ``inputs`` is (steps, batch, in_dim) and ``targets`` (steps, batch, out_dim).
    ``example_subtasks`` gives each example's sub-task; ``subtasks`` is the
    per-batch sub-task index, or -1 when a batch mixes sub-tasks.
    """

    inputs: np.ndarray
    targets: np.ndarray
    example_subtasks: np.ndarray
    query_inputs: np.ndarray
    query_targets: np.ndarray
    query_subtasks: np.ndarray
    ordering: str
    n_subtasks: int
    kind: str = "sine"
    task_params: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def subtasks(self) -> np.ndarray:
        first = self.example_subtasks[:, 0]
        same = (self.example_subtasks == first[:, None]).all(axis=1)
        return np.where(same, first, -1)

    @property
    def batches(self):
        for x, y, s in zip(self.inputs, self.targets, self.subtasks):
            yield {"inputs": x, "targets": y, "sub_task_index": int(s)}

    @property
    def labels(self) -> np.ndarray:
        return self.targets.argmax(axis=-1)

    @property
    def query_labels(self) -> np.ndarray:
        return self.query_targets.argmax(axis=-1)

    def truncated(self, n_steps: int) -> "Episode":
        return Episode(
            self.inputs[:n_steps],
            self.targets[:n_steps],
            self.example_subtasks[:n_steps],
            self.query_inputs,
            self.query_targets,
            self.query_subtasks,
            self.ordering,
            self.n_subtasks,
            self.kind,
            self.task_params,
        )


def _check_ordering(ordering: str) -> None:
    if ordering not in ORDERINGS:
        raise ValueError(f"ordering must be one of {ORDERINGS}, got {ordering!r}")


def _order(rng: np.random.Generator, groups: np.ndarray, ordering: str) -> np.ndarray:
    """Permutation of example indices: fully shuffled, or grouped by sub-task."""
    n = len(groups)
    if ordering == "iid":
        return rng.permutation(n)
    perm = rng.permutation(n)
    return perm[np.argsort(groups[perm], kind="stable")]


# sine regression -------------------------------------------------------------


@dataclass(frozen=True)
class SineTaskConfig:
    n_functions: int = 10
    amplitude_range: tuple[float, float] = (0.1, 5.0)
    phase_range: tuple[float, float] = (0.0, np.pi)
    x_range: tuple[float, float] = (-5.0, 5.0)
    n_batches: int = 400
    batch_size: int = 32
    queries_per_function: int = 1

    def __post_init__(self):
        if self.n_functions < 1 or self.n_batches < 1 or self.batch_size < 1:
            raise ValueError("sizes must be positive")
        if self.n_batches % self.n_functions:
            raise ValueError("n_batches must be a multiple of n_functions")

    @property
    def input_dim(self) -> int:
        return 1 + self.n_functions


def sine(x, amplitude, phase):
    return amplitude * np.sin(x + phase)


def encode_sine_inputs(x: np.ndarray, index: np.ndarray, n_functions: int) -> np.ndarray:
    """Concatenate the scalar input with a one-hot function index."""
    out = np.zeros((len(x), 1 + n_functions))
    out[:, 0] = x
    out[np.arange(len(x)), 1 + np.asarray(index)] = 1.0
    return out


def sample_sine_episode(rng: np.random.Generator, cfg: SineTaskConfig, ordering: str = "iid") -> Episode:
    _check_ordering(ordering)
    n_fn = cfg.n_functions
    amp = rng.uniform(*cfg.amplitude_range, size=n_fn)
    phase = rng.uniform(*cfg.phase_range, size=n_fn)

    total = cfg.n_batches * cfg.batch_size
    per_fn = total // n_fn
    index = np.repeat(np.arange(n_fn), per_fn)
    x = rng.uniform(*cfg.x_range, size=total)
    y = sine(x, amp[index], phase[index])

    q_index = np.repeat(np.arange(n_fn), cfg.queries_per_function)
    q_x = rng.uniform(*cfg.x_range, size=len(q_index))
    q_y = sine(q_x, amp[q_index], phase[q_index])

    perm = _order(rng, index, ordering)
    x, y, index = x[perm], y[perm], index[perm]
    shape = (cfg.n_batches, cfg.batch_size)
    return Episode(
        inputs=encode_sine_inputs(x, index, n_fn).reshape(*shape, -1),
        targets=y.reshape(*shape, 1),
        example_subtasks=index.reshape(shape),
        query_inputs=encode_sine_inputs(q_x, q_index, n_fn),
        query_targets=q_y[:, None],
        query_subtasks=q_index,
        ordering=ordering,
        n_subtasks=n_fn,
        kind="sine",
        task_params={"amplitude": amp, "phase": phase, "x_range": cfg.x_range},
    )


# classification ----------------------------------------------------------------


@dataclass
class ClassDataset:
    classes: list[np.ndarray]
    class_ids: list[str]
    split: str = "all"
    source: str = "synthetic"

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.classes[0].shape[1]


class MetaSplit(NamedTuple):
    train: ClassDataset
    test: ClassDataset


def meta_split(dataset: ClassDataset, n_train: int, n_test: int | None = None) -> MetaSplit:
    """First ``n_train`` classes for meta-training, the next ``n_test`` for meta-testing."""
    n_test = len(dataset) - n_train if n_test is None else n_test
    if n_train < 1 or n_test < 1 or n_train + n_test > len(dataset):
        raise ValueError(f"cannot split {len(dataset)} classes into {n_train} + {n_test}")
    stop = n_train + n_test
    return MetaSplit(
        ClassDataset(dataset.classes[:n_train], dataset.class_ids[:n_train], "meta-train", dataset.source),
        ClassDataset(dataset.classes[n_train:stop], dataset.class_ids[n_train:stop], "meta-test", dataset.source),
    )


def synth_classes(
    rng: np.random.Generator,
    n_classes: int,
    dim: int,
    examples_per_class: int,
    noise: float = 0.1,
) -> ClassDataset:
    """Each class is a random unit-variance prototype plus isotropic Gaussian noise."""
    if min(n_classes, dim, examples_per_class) < 1:
        raise ValueError("sizes must be positive")
    protos = rng.normal(size=(n_classes, dim))
    classes = [p + noise * rng.normal(size=(examples_per_class, dim)) for p in protos]
    return ClassDataset(classes, [f"synth{i:04d}" for i in range(n_classes)], "all", "synthetic")


def sample_classification_episode(
    dataset: ClassDataset,
    rng: np.random.Generator,
    n_way: int = 5,
    k_shot: int = 5,
    ordering: str = "iid",
    queries_per_class: int = 1,
) -> Episode:
    """N*k single-example steps; queries are unseen examples of the same classes.

    Labels 0..N-1 are assigned in the order the classes were drawn, which is
    also the presentation order in the continual variant.
    """
    _check_ordering(ordering)
    need = k_shot + queries_per_class
    eligible = [i for i, c in enumerate(dataset.classes) if len(c) >= need]
    if len(eligible) < n_way:
        raise ValueError(
            f"need {n_way} classes with at least {need} examples, dataset has {len(eligible)}"
        )
    chosen = rng.choice(eligible, size=n_way, replace=False)
    train_x, train_lab, query_x, query_lab = [], [], [], []
    for label, cls in enumerate(chosen):
        examples = dataset.classes[cls]
        pick = rng.choice(len(examples), size=need, replace=False)
        train_x.append(examples[pick[:k_shot]])
        query_x.append(examples[pick[k_shot:]])
        train_lab += [label] * k_shot
        query_lab += [label] * queries_per_class
    x = np.concatenate(train_x)
    lab = np.asarray(train_lab)
    q_x = np.concatenate(query_x)
    q_lab = np.asarray(query_lab)

    perm = _order(rng, lab, ordering)
    x, lab = x[perm], lab[perm]
    eye = np.eye(n_way)
    return Episode(
        inputs=x[:, None, :],
        targets=eye[lab][:, None, :],
        example_subtasks=lab[:, None],
        query_inputs=q_x,
        query_targets=eye[q_lab],
        query_subtasks=q_lab,
        ordering=ordering,
        n_subtasks=n_way,
        kind="classification",
        task_params={"classes": [dataset.class_ids[c] for c in chosen]},
    )


# Omniglot --------------------------------------------------------------------


def _load_image(path: Path, resolution: int, invert: bool) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            img = img.convert("L").resize((resolution, resolution), Image.Resampling.BOX)
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return (1.0 - arr if invert else arr).reshape(-1)


def load_omniglot(
    path: str | os.PathLike | None = None,
    resolution: int = 14,
    n_train: int = 963,
    n_test: int = 660,
    invert: bool = True,
) -> MetaSplit:
    """Read ``<root>/<alphabet>/<character>/<image>`` into a class-disjoint split.

    Classes are ordered by (alphabet, character) directory name and images
    by file name, so repeated loads give identical data. Pixels are scaled to
    [0, 1]; with ``invert`` the pen strokes are 1 and the background 0.
    ``path`` defaults to ``$FLP_DATA_DIR``.
    """
    if path is None:
        path = os.environ.get("FLP_DATA_DIR")
        if not path:
            raise FileNotFoundError("no Omniglot path given and FLP_DATA_DIR is unset")
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"Omniglot root {root} does not exist")
    char_dirs = sorted(
        c for a in sorted(p for p in root.iterdir() if p.is_dir()) for c in a.iterdir() if c.is_dir()
    )
    needed = n_train + n_test
    if len(char_dirs) < needed:
        raise ValueError(f"found {len(char_dirs)} character classes under {root}, need {needed}")
    classes, ids = [], []
    for char_dir in char_dirs[:needed]:
        files = sorted(f for f in char_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"no images in {char_dir}")
        classes.append(np.stack([_load_image(f, resolution, invert) for f in files]))
        ids.append(f"{char_dir.parent.name}/{char_dir.name}")
    return meta_split(ClassDataset(classes, ids, "all", "omniglot-files"), n_train, n_test)

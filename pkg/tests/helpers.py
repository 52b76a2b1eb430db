import numpy as np

from flp.network import Architecture
from flp.params import MetaParams, init_meta_params, regression_learner
from flp.tasks import Episode


def episode(inputs, targets, queries=None, query_targets=None, subtasks=None, ordering="iid"):
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    steps, batch = inputs.shape[:2]
    if queries is None:
        queries, query_targets = inputs.reshape(-1, inputs.shape[-1])[:2], targets.reshape(-1, targets.shape[-1])[:2]
    if subtasks is None:
        subtasks = np.zeros((steps, batch), dtype=int)
    subtasks = np.asarray(subtasks)
    return Episode(
        inputs, targets, subtasks, np.asarray(queries, float), np.asarray(query_targets, float),
        np.zeros(len(queries), dtype=int), ordering, int(subtasks.max(initial=0)) + 1,
    )


def random_episode(rng, steps, batch, in_dim, out_dim, **kw):
    return episode(
        rng.uniform(-1, 1, (steps, batch, in_dim)),
        rng.normal(size=(steps, batch, out_dim)),
        rng.uniform(-1, 1, (3, in_dim)),
        rng.normal(size=(3, out_dim)),
        **kw,
    )


def toy_meta(widths=(3, 4, 4, 1), n_plastic=3, learner=None, seed=0, alpha=0.05) -> MetaParams:
    """Small regression meta-parameters with random nonzero rates and biases."""
    rng = np.random.default_rng(seed)
    arch = Architecture(widths, n_plastic)
    meta = init_meta_params(arch, learner or regression_learner("flp"), rng)
    vals = {}
    for k, v in meta.values.items():
        if k.startswith(("aW", "ac")):
            vals[k] = alpha * rng.uniform(0.5, 1.5, size=v.shape)
        elif k.startswith(("c", "fb")):
            vals[k] = 0.1 * rng.normal(size=v.shape)
        elif k.startswith("beta"):
            vals[k] = np.asarray(rng.normal())
    return meta.with_values(vals)

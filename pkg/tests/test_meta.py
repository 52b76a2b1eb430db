import csv
import logging

import numpy as np
import pytest

from flp import checkpoint as ck
from flp.adam import AdamState
from flp.autodiff import NumericError
from flp.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from flp.config import TrainConfig, dump_config, load_config, preset
from flp.meta import (
    TaskFamily,
    evaluate,
    init_meta,
    meta_step,
    meta_train,
    new_adam_states,
    run_lifetime,
)
from flp.params import GROUPS

TINY = dict(task="sine", n_layers=3, width=8, n_functions=2, n_batches=4, batch_size=4,
            queries_per_function=2, n_meta_epochs=6, eval_interval=2, eval_lifetimes=3,
            lr_feedforward=1e-3, lr_feedback=1e-3, lr_beta=1e-3, lr_plasticity=1e-3)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def metrics_without_wallclock(path):
    with open(path, newline="") as fh:
        return [row[:-1] for row in csv.reader(fh)]


def test_zero_learning_rates_leave_params_unchanged():
    cfg = tiny(lr_feedforward=0, lr_feedback=0, lr_beta=0, lr_plasticity=0, init_alpha=0.01)
    fam = TaskFamily(cfg)
    meta = init_meta(cfg, fam)
    new, _ = meta_step(meta, fam.episode(np.random.default_rng(0)), new_adam_states(cfg))
    for k, v in meta.values.items():
        np.testing.assert_array_equal(new.values[k], v)


@pytest.mark.parametrize("learner", ["flp", "gradient"])
def test_overfits_a_single_episode(learner):
    cfg = tiny(learner=learner, lr_feedforward=1e-2, lr_feedback=1e-2, lr_beta=1e-2, lr_plasticity=1e-3)
    fam = TaskFamily(cfg)
    meta, adam = init_meta(cfg, fam), new_adam_states(cfg)
    ep = fam.episode(np.random.default_rng(3))
    _, first = meta_step(meta, ep, new_adam_states(cfg))
    for _ in range(200):
        meta, loss = meta_step(meta, ep, adam)
    assert loss < 0.1 * first


def test_beta_stays_in_unit_interval():
    cfg = tiny(lr_beta=1.0)
    fam = TaskFamily(cfg)
    meta, adam = init_meta(cfg, fam), new_adam_states(cfg)
    rng = np.random.default_rng(0)
    for _ in range(20):
        meta, _ = meta_step(meta, fam.episode(rng), adam)
        for layer in meta.feedback_layers():
            assert 0.0 <= meta.beta(layer) <= 1.0


def test_first_prediction_ignores_feedback_matrices():
    cfg = tiny()
    fam = TaskFamily(cfg)
    meta = init_meta(cfg, fam)
    ep = fam.episode(np.random.default_rng(0))
    other = meta.with_values({k: 5.0 * v + 1.0 for k, v in meta.values.items() if k.startswith("B")})
    a = run_lifetime(meta, ep).trace.records[0].prediction
    b = run_lifetime(other, ep).trace.records[0].prediction
    np.testing.assert_array_equal(a, b)


def test_evaluate_single_lifetime_has_zero_stderr():
    cfg = tiny()
    mean, err, values = evaluate(init_meta(cfg), n_lifetimes=1, cfg=cfg)
    assert err == 0.0 and values.shape == (1,) and mean == values[0]


def test_evaluate_without_config_raises():
    with pytest.raises(ValueError):
        evaluate(init_meta(tiny()), n_lifetimes=1)


# checkpoints -------------------------------------------------------------------


def trained_checkpoint(tmp_path, **kw):
    return meta_train(tiny(**kw), tmp_path / "run").checkpoint


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    ckpt = trained_checkpoint(tmp_path)
    p1 = save_checkpoint(ckpt, tmp_path / "a.flp")
    p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "b.flp")
    assert p1.read_bytes() == p2.read_bytes()
    loaded = load_checkpoint(tmp_path / "run")
    for k, v in ckpt.meta.values.items():
        np.testing.assert_array_equal(loaded.meta.values[k], v)
    assert loaded.adam["feedforward"].step_count == ckpt.adam["feedforward"].step_count == 6


def test_checkpoint_corruption_is_detected(tmp_path):
    data = ck.to_bytes(trained_checkpoint(tmp_path))
    with pytest.raises(CheckpointError):
        ck.from_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        ck.from_bytes(b"NOTACKPT" + data[8:])
    bumped = data.replace(b'"format_version":1', b'"format_version":9')
    with pytest.raises(CheckpointError, match="format_version"):
        ck.from_bytes(bumped)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.flp")


def test_config_hash_mismatch_warns(tmp_path):
    data = ck.to_bytes(trained_checkpoint(tmp_path))
    with pytest.warns(UserWarning, match="differs"):
        ck.from_bytes(data, expected_hash="0" * 64)


def test_empty_adam_state_round_trips():
    meta = init_meta(tiny())
    ckpt = ck.Checkpoint(meta, {g: AdamState(0.1) for g in GROUPS})
    assert ck.to_bytes(ck.from_bytes(ck.to_bytes(ckpt))) == ck.to_bytes(ckpt)


# training loop -----------------------------------------------------------------


def test_same_config_same_metrics(tmp_path):
    meta_train(tiny(), tmp_path / "a")
    meta_train(tiny(), tmp_path / "b")
    a = metrics_without_wallclock(tmp_path / "a" / "metrics.csv")
    assert a == metrics_without_wallclock(tmp_path / "b" / "metrics.csv")
    assert a[0] == ["step", "metric", "value", "stderr"]
    assert [r[0] for r in a[1:]] == ["2", "4", "6"]
    assert (tmp_path / "a" / "checkpoint.flp").read_bytes() == (tmp_path / "b" / "checkpoint.flp").read_bytes()


def test_different_seed_different_metrics(tmp_path):
    meta_train(tiny(), tmp_path / "a")
    meta_train(tiny(seed=1), tmp_path / "b")
    assert metrics_without_wallclock(tmp_path / "a" / "metrics.csv") != metrics_without_wallclock(
        tmp_path / "b" / "metrics.csv"
    )


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny()
    meta_train(cfg, tmp_path / "full")
    half = meta_train(cfg, tmp_path / "part", stop_at=3)
    assert half.checkpoint.step == 3
    meta_train(cfg, tmp_path / "part", resume=tmp_path / "part" / "checkpoint.flp")
    assert (tmp_path / "full" / "checkpoint.flp").read_bytes() == (tmp_path / "part" / "checkpoint.flp").read_bytes()
    assert metrics_without_wallclock(tmp_path / "full" / "metrics.csv") == metrics_without_wallclock(
        tmp_path / "part" / "metrics.csv"
    )


def test_warm_start_copies_forward_weights(tmp_path):
    src = trained_checkpoint(tmp_path)
    cfg = tiny(learner="gradient", init_from=str(tmp_path / "run" / "checkpoint.flp"))
    meta = init_meta(cfg)
    for k in ("W0", "c0", "W1", "c2"):
        np.testing.assert_array_equal(meta.values[k], src.meta.values[k])
    assert "B1" not in meta.values
    with pytest.raises(ValueError):
        init_meta(tiny(width=9, init_from=str(tmp_path / "run" / "checkpoint.flp")))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_step_is_skipped_or_raised(caplog):
    cfg = tiny(init_alpha=1e6, eval_interval=0, n_meta_epochs=2)
    with caplog.at_level(logging.WARNING):
        meta_train(cfg)
    assert "skipped" in caplog.text
    with pytest.raises(NumericError):
        meta_train(tiny(init_alpha=1e6, eval_interval=0, n_meta_epochs=2, skip_nonfinite=False))


def test_meta_batch_averages_gradients():
    cfg = tiny(meta_batch=2)
    fam = TaskFamily(cfg)
    meta = init_meta(cfg, fam)
    rng = np.random.default_rng(0)
    eps = [fam.episode(rng) for _ in range(2)]
    _, loss = meta_step(meta, eps, new_adam_states(cfg))
    singles = [meta_step(meta, e, new_adam_states(cfg))[1] for e in eps]
    assert loss == pytest.approx(np.mean(singles))


# config ------------------------------------------------------------------------


def test_config_yaml_round_trip(tmp_path):
    cfg = preset("regression-desk", seed=4)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    (tmp_path / "bad.yaml").write_text("nonsense_key: 1\n")
    with pytest.raises(KeyError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ValueError):
        TrainConfig(lr_plasticity=-1)
    with pytest.raises(KeyError):
        preset("no-such-preset")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_lifetime_scores_inf():
    cfg = tiny(init_alpha=1e6)
    mean, _, values = evaluate(init_meta(cfg), n_lifetimes=2, cfg=cfg)
    assert np.isinf(values).all() and np.isinf(mean)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flp.adam import AdamState, adam_step

from oracles import scalar_adam


def test_first_step_moves_by_lr():
    g = np.array([0.3, -2.0, 1e-3])
    new, st_ = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(lr=1e-3))
    np.testing.assert_allclose(np.abs(new["w"]), 1e-3, rtol=1e-4)
    assert (np.sign(new["w"]) == -np.sign(g)).all()
    assert st_.step_count == 1


def test_zero_gradient_leaves_params():
    p = np.array([1.0, -1.0])
    new, _ = adam_step({"w": p}, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(new["w"], p)


def test_quadratic_converges_and_matches_reference():
    state, w = AdamState(lr=0.1), {"w": np.array(0.0)}
    for _ in range(100):
        w, _ = adam_step(w, {"w": 2 * (w["w"] - 2.0)}, state)
    ref = scalar_adam(lambda v: 2 * (v - 2.0), 0.0, 0.1, 100)
    assert abs(float(w["w"]) - 2.0) < 0.1
    assert float(w["w"]) == pytest.approx(ref, abs=1e-12)
    assert state.step_count == 100


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(lr=1.0))


def test_moments_match_param_shapes_and_copy_is_deep():
    state = AdamState(lr=0.01)
    adam_step({"a": np.zeros((2, 3)), "b": np.zeros(4)}, {"a": np.ones((2, 3)), "b": np.ones(4)}, state)
    assert state.first_moment["a"].shape == (2, 3) and state.second_moment["b"].shape == (4,)
    clone = state.copy()
    clone.first_moment["a"][0, 0] = 99.0
    assert state.first_moment["a"][0, 0] != 99.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(1e-4, 1.0))
def test_step_count_and_bounded_moves(gs, lr):
    state, w = AdamState(lr=lr), {"w": np.array(0.0)}
    for i, g in enumerate(gs, start=1):
        prev = float(w["w"])
        w, _ = adam_step(w, {"w": np.array(g)}, state)
        assert state.step_count == i
        # bias-corrected Adam never moves a scalar by much more than lr per step
        assert abs(float(w["w"]) - prev) <= lr * 3.2

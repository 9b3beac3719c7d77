import numpy as np
import pytest
from hypothesis import given, strategies as st

from desknav.reward import RewardWeights, reward_terms, total_reward

S_STAT = np.full((36, 5), 2.0)
ORIGIN = (0.0, 0.0, 1.0)
GOAL = (10.0, 0.0, 1.0)


def terms(pos=(2, 0, 1), vel=(0, 0, 0), prev=(0, 0, 0), s_stat=S_STAT, tracks=(), start=ORIGIN, goal=GOAL):
    return reward_terms(pos, vel, prev, goal, start, s_stat, tracks)


def test_velocity_term():
    assert terms(vel=(2, 0, 0))[0] == pytest.approx(2.0)
    assert terms(vel=(0, 2, 0))[0] == pytest.approx(0.0)
    u = np.array([3.0, 4.0, 0.0]) / 5
    assert terms(pos=(0, 0, 1), goal=(3, 4, 1), vel=2 * u)[0] == pytest.approx(2.0)


def test_static_term():
    assert terms(s_stat=np.full((36, 5), np.e))[1] == pytest.approx(1.0)
    # the 1e-3 clamp keeps a zero-length ray finite
    s = S_STAT.copy()
    s[0, 0] = 0.0
    assert np.isfinite(terms(s_stat=s)[1])


def test_dynamic_term():
    assert terms()[2] == 0.0
    assert terms(tracks=[(2 + np.e, 0, 1), (2, np.e**2, 1)])[2] == pytest.approx(1.5)
    on_top = terms(tracks=[(2, 0, 1)])[2]
    assert on_top == pytest.approx(np.log(1e-3))


def test_smooth_and_height_terms():
    assert terms(vel=(1, 1, 0), prev=(1, 1, 0))[3] == 0.0
    assert terms(vel=(1, 0, 0), prev=(0, 0, 0))[3] == pytest.approx(-1.0)
    assert terms(pos=(2, 0, 1))[4] == 0.0
    assert terms(pos=(2, 0, 1.05))[4] == 0.0  # inside the 0.1 m band
    assert terms(pos=(2, 0, 1.5))[4] == pytest.approx(-0.25)
    assert terms(pos=(2, 0, 0.5), goal=(10, 0, 2))[4] == pytest.approx(-0.25)


def test_total_reward_examples():
    w = RewardWeights()
    assert total_reward((0, 0, 0, 0, 0), w) == 0
    assert total_reward((1, 0, 0, 0, 0), RewardWeights(1, 0, 0, 0, 0)) == 1
    assert total_reward((2, 1, 1, -0.5, -0.25), w) == pytest.approx(2.225)


def test_weights_must_be_nonnegative():
    with pytest.raises(ValueError):
        RewardWeights(smooth=-0.1)


vec = st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2)).map(np.array)
pos = st.tuples(st.floats(0, 20), st.floats(0, 20), st.floats(0, 5)).map(np.array)


@given(pos, vec, vec, st.floats(0.05, 4.0), st.lists(pos, max_size=4))
def test_reward_invariants(p, v, prev, d, tracks):
    t = reward_terms(p, v, prev, (15, 15, 2), (3, 3, 1), np.full((36, 5), d), tracks)
    assert abs(t[0]) <= np.linalg.norm(v) + 1e-9
    assert t[3] <= 0 and t[4] <= 0
    bigger = reward_terms(p, v, prev, (15, 15, 2), (3, 3, 1), np.full((36, 5), 1.5 * d),
                          [p + 1.5 * (np.asarray(q) - p) for q in tracks])
    assert bigger[1] > t[1]
    if tracks:
        assert bigger[2] >= t[2]


@given(st.lists(st.floats(-10, 10), min_size=5, max_size=5),
       st.lists(st.floats(0, 5), min_size=5, max_size=5))
def test_total_is_linear_in_weights(tm, w):
    w1 = RewardWeights(*w)
    w2 = RewardWeights(*(2 * x for x in w))
    assert total_reward(tm, w2) == pytest.approx(2 * total_reward(tm, w1), abs=1e-9)

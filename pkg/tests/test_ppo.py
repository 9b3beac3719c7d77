import copy
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from desknav.env import RUNNING, TIMEOUT, EnvConfig, NavEnv, WorldSpec
from desknav.nn import Adam, PolicyConfig, PolicyNet
from desknav.nn import tensor as T
from desknav.nn.beta import beta_logprob_np
from desknav.ppo import NumericError, PpoConfig, collect, combined_loss, gae, normalize, ppo_loss, update
from oracles import gae_direct


def small_env(B=3, seed=0, n_static=15, n_dynamic=2, timeout=None):
    cfg = EnvConfig(world=WorldSpec(n_static=n_static, n_dynamic=n_dynamic), dynamic_schedule=(n_dynamic,))
    if timeout is not None:
        cfg.robot.timeout = timeout
    env = NavEnv(cfg, B, seed=seed)
    env.reset_all()
    return env


def test_config_validation():
    assert PpoConfig().mb_size == 256 * 64 // 8
    for bad in ({"clip": 0.0}, {"gamma": 1.5}, {"gae_lambda": -0.1}, {"lr": 0.0}):
        with pytest.raises(ValueError):
            PpoConfig(**bad)


def test_gae_single_terminal_step():
    adv, ret = gae([[2.0]], [[0.5]], [[1.0]], [9.0], 0.99, 0.95)
    assert adv[0, 0] == pytest.approx(1.5)
    assert ret[0, 0] == pytest.approx(2.0)


def test_gae_telescopes_without_discount():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(12, 2))
    v = rng.normal(size=(12, 2))
    adv, _ = gae(r, v, np.zeros((12, 2)), np.zeros(2), 1.0, 1.0)
    expect = np.cumsum(r[::-1], axis=0)[::-1] - v
    assert np.allclose(adv, expect, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gae_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    T_, B = 50, 4
    r, v = rng.normal(size=(T_, B)), rng.normal(size=(T_, B))
    d = (rng.random((T_, B)) < 0.1).astype(float)
    last = rng.normal(size=B)
    adv, ret = gae(r, v, d, last, 0.99, 0.95)
    ref = np.stack([gae_direct(r[:, j], v[:, j], d[:, j], last[j], 0.99, 0.95) for j in range(B)], axis=1)
    assert np.max(np.abs(adv - ref)) < 1e-9
    assert np.allclose(ret, ref + v, atol=1e-9)


@given(arrays(np.float64, st.integers(2, 300), elements=st.floats(-1e4, 1e4)))
def test_advantage_normalization(a):
    if np.ptp(a) < 1e-6:
        return  # constant batch: no spread to normalise
    z = normalize(a)
    assert abs(z.mean()) < 1e-9
    assert abs(z.std() - 1.0) < 1e-6


def toy_batch(n=6, seed=0, net=None):
    rng = np.random.default_rng(seed)
    net = net or PolicyNet(PolicyConfig(), seed=seed)
    from desknav.state import StateBundle
    b = StateBundle(rng.normal(size=(n, 7)), rng.normal(size=(n, 5, 9)), rng.uniform(0.2, 4.1, (n, 36, 5)))
    x = rng.uniform(0.1, 0.9, (n, 3))
    with T.no_grad():
        p, _ = net.evaluate(b)
    old = beta_logprob_np(*p.arrays(), x)
    return net, b, x, old


def test_same_policy_gives_unit_ratio():
    net, b, x, old = toy_batch()
    adv = normalize(np.random.default_rng(1).normal(size=6))
    _, st_ = ppo_loss(net, b, x, old, adv, np.zeros(6), PpoConfig())
    assert st_["policy_loss"] == pytest.approx(0.0, abs=1e-12)
    assert st_["kl"] == pytest.approx(0.0, abs=1e-12) and st_["clip_frac"] == 0.0


def test_clipped_branch():
    net, b, x, old = toy_batch()
    adv = np.full(6, 2.0)
    _, st_ = ppo_loss(net, b, x, old - math.log(1.3), adv, np.zeros(6), PpoConfig(clip=0.1))
    assert st_["policy_loss"] == pytest.approx(-1.1 * 2.0, abs=1e-9)
    assert st_["clip_frac"] == 1.0
    assert st_["kl"] == pytest.approx(0.3 - math.log(1.3), abs=1e-9)
    # A < 0 takes the unclipped ratio (min picks the more pessimistic term)
    _, st_ = ppo_loss(net, b, x, old - math.log(1.3), -adv, np.zeros(6), PpoConfig(clip=0.1))
    assert st_["policy_loss"] == pytest.approx(1.3 * 2.0, abs=1e-9)


@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_kl_and_clip_fraction_bounds(shift):
    net, b, x, old = toy_batch(seed=3)
    _, st_ = ppo_loss(net, b, x, old + np.array(shift), np.ones(6), np.zeros(6), PpoConfig())
    assert st_["kl"] >= -1e-6
    assert 0.0 <= st_["clip_frac"] <= 1.0


def test_collect_buffer_length():
    env = small_env(B=2)
    net = PolicyNet(PolicyConfig(), seed=0)
    buf = collect(env, net, 1, np.random.default_rng(0))
    assert len(buf) == 2
    assert buf.actions.shape == (1, 2, 3) and np.all(np.isfinite(buf.logp))
    assert np.all((buf.actions > 0) & (buf.actions < 1))


def test_collect_deterministic_mode_repeats():
    bufs = []
    for _ in range(2):
        env = small_env(B=2, seed=4)
        net = PolicyNet(PolicyConfig(), seed=1)
        bufs.append(collect(env, net, 6, np.random.default_rng(9), deterministic=True))
    for k in ("s_int", "s_dyn", "s_stat", "actions", "logp", "rewards", "values", "dones", "last_value"):
        assert np.array_equal(getattr(bufs[0], k), getattr(bufs[1], k)), k


def test_collect_resets_terminal_envs():
    env = small_env(B=2, timeout=1)
    net = PolicyNet(PolicyConfig(), seed=0)
    seeds0 = env.world_seeds.copy()
    buf = collect(env, net, 3, np.random.default_rng(0), bootstrap_timeout=False)
    assert np.all(buf.dones == 1.0)
    assert env.episode.tolist() == [3, 3]
    assert np.all(env.outcome == RUNNING)
    assert not np.any(env.world_seeds == seeds0)
    # each tick starts from a fresh world: the step counter in s_int history is
    # not observable, but the start position is
    assert not np.array_equal(buf.s_int[0], buf.s_int[1])
    assert len(buf.episodes) == 6 and all(e[1] == TIMEOUT for e in buf.episodes)


def test_timeout_bootstrap_adds_discounted_value():
    env_a, env_b = small_env(B=2, timeout=1), small_env(B=2, timeout=1)
    net = PolicyNet(PolicyConfig(), seed=0)
    net.ret_norm.mean = 3.0  # make the bootstrap value clearly nonzero
    a = collect(env_a, net, 1, np.random.default_rng(0), bootstrap_timeout=False)
    b = collect(env_b, net, 1, np.random.default_rng(0), bootstrap_timeout=True)
    assert np.all(b.rewards - a.rewards > 0.99 * 2.0)


def descent_buffer(seed=0):
    env = small_env(B=4, seed=seed)
    net = PolicyNet(PolicyConfig(), seed=seed)
    buf = collect(env, net, 8, np.random.default_rng(seed))
    return net, buf


@pytest.mark.parametrize("seed", range(4))
def test_single_update_decreases_loss(seed):
    # one call of update() with the default epochs/minibatches; a lone Adam
    # step is close to a sign step and can overshoot on a 148k-weight net
    net, buf = descent_buffer(seed)
    cfg = PpoConfig(horizon=8, n_envs=4)
    adv, ret = gae(buf.rewards, buf.values, buf.dones, buf.last_value, cfg.gamma, cfg.gae_lambda)
    adv = normalize(adv).ravel()
    norm = copy.deepcopy(net.ret_norm)
    norm.update(ret.ravel())
    target = (ret.ravel() - norm.mean) / norm.std
    before = combined_loss(net, buf, cfg, adv, target)
    update(net, Adam(net.parameters(), lr=5e-4), buf, cfg, np.random.default_rng(0))
    assert net.ret_norm.state() == norm.state()
    after = combined_loss(net, buf, cfg, adv, target)
    assert after < before


def test_chunked_accumulation_matches_full_batch():
    grads = []
    for chunk in (32, 5):
        net, buf = descent_buffer(0)
        cfg = PpoConfig(epochs=1, minibatch_size=len(buf), horizon=8, n_envs=4, chunk=chunk)
        opt = Adam(net.parameters(), lr=5e-4)
        opt.step = lambda: None  # capture the accumulated gradient only
        update(net, opt, buf, cfg, np.random.default_rng(0))
        grads.append(np.concatenate([p.grad.ravel() for p in net.parameters()]))
    assert np.allclose(grads[0], grads[1], rtol=1e-9, atol=1e-12)


def test_positive_advantage_raises_logprob_until_clipped():
    net, b, x, old = toy_batch(n=1, seed=5)
    cfg = PpoConfig(entropy_coef=0.0, value_coef=0.0, clip=0.1)
    opt = Adam(net.parameters(), lr=1e-4)
    hist = [old[0]]
    for _ in range(200):
        opt.zero_grad()
        loss, _ = ppo_loss(net, b, x, old, np.ones(1), np.zeros(1), cfg)
        loss.backward()
        opt.step()
        with T.no_grad():
            p, _ = net.evaluate(b)
        hist.append(beta_logprob_np(*p.arrays(), x)[0])
        if hist[-1] - old[0] >= math.log(1.1):
            break
    assert hist[-1] - old[0] >= math.log(1.1)
    assert np.all(np.diff(hist) > 0)


def test_non_finite_loss_raises():
    net, buf = descent_buffer(0)
    buf.rewards[0, 0] = np.nan
    cfg = PpoConfig(epochs=1, horizon=8, n_envs=4)
    with pytest.raises(NumericError):
        update(net, Adam(net.parameters()), buf, cfg, np.random.default_rng(0))


def test_update_report():
    net, buf = descent_buffer(1)
    cfg = PpoConfig(epochs=2, horizon=8, n_envs=4, minibatch_size=8)
    rep = update(net, Adam(net.parameters()), buf, cfg, np.random.default_rng(0))
    assert rep["n_minibatches"] == 2 * 4
    assert rep["kl"] >= -1e-6 and 0 <= rep["clip_frac"] <= 1
    assert rep["value_loss"] >= 0 and all(np.isfinite(v) for v in rep.values())

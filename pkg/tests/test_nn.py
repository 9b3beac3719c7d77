import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from desknav.nn import (Adam, BetaParams, CheckpointError, PolicyConfig, PolicyNet, Tensor, adam_step,
                        beta_logprob, beta_mean, beta_sample, forward, load_checkpoint, read_header,
                        save_checkpoint, scale_action)
from desknav.nn import tensor as T
from desknav.nn.beta import beta_entropy, beta_logprob_np
from desknav.nn.special import digamma, lgamma, trigamma
from desknav.state import StateBundle
from nn_cases import CASES

SPECIAL_POINTS = [1e-3, 0.1, 0.5, 0.9999, 1.0, 1.5, 2.0, 2.5, 3.7, 6.0, 7.25, 10.0, 33.3, 150.0, 1e4]


@pytest.mark.parametrize("x", SPECIAL_POINTS)
def test_special_functions_against_mpmath(x):
    mpmath.mp.dps = 40
    assert lgamma(np.array(x)) == pytest.approx(float(mpmath.loggamma(x)), rel=1e-12, abs=1e-12)
    assert digamma(np.array(x)) == pytest.approx(float(mpmath.digamma(x)), rel=1e-10, abs=1e-10)
    assert trigamma(np.array(x)) == pytest.approx(float(mpmath.polygamma(1, x)), rel=1e-8)


def test_special_known_values():
    assert lgamma(np.array([1.0, 2.0]))[0] == pytest.approx(0.0, abs=1e-14)
    assert lgamma(np.array(0.5)) == pytest.approx(0.5 * math.log(math.pi), abs=1e-14)
    assert digamma(np.array(1.0)) == pytest.approx(-0.5772156649015329, abs=1e-12)
    assert trigamma(np.array(1.0)) == pytest.approx(math.pi**2 / 6, rel=1e-10)


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    errs = [CASES[name](seed) for seed in range(20)]
    assert max(errs) < 1e-3, f"{name}: {max(errs):.2e}"


def test_sum_of_squares_gradient():
    p = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    T.sum(T.square(p)).backward()
    assert np.allclose(p.grad, 2 * p.data)


def test_backward_on_unrecorded_tensor_errors():
    x = Tensor(np.ones(3))
    with pytest.raises(RuntimeError):
        T.sum(T.exp(x)).backward()
    with T.no_grad():
        y = T.sum(T.exp(Tensor(np.ones(3), requires_grad=True)))
    with pytest.raises(RuntimeError):
        y.backward()


def test_adam_first_step():
    lr = 5e-4
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    p = Tensor(np.zeros(4), requires_grad=True)
    opt = Adam([p], lr=lr)
    p.grad = g.copy()
    opt.step()
    # bias-corrected first step: m_hat = g, v_hat = g^2 -> -lr g/(|g| + eps)
    assert np.allclose(p.data, -lr * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.allclose(np.abs(p.data), lr, rtol=1e-4)
    assert p.grad is None
    out, m, v, t = adam_step([np.zeros(4)], [g], lr)
    assert np.allclose(out[0], -lr * g / (np.abs(g) + 1e-8)) and t == 1


def test_functional_adam_matches_class():
    rng = np.random.default_rng(1)
    p = Tensor(rng.normal(size=5), requires_grad=True)
    opt = Adam([p], lr=1e-2)
    arr, m, v, t = [p.data.copy()], None, None, 0
    for _ in range(5):
        g = rng.normal(size=5)
        p.grad = g.copy()
        opt.step()
        arr, m, v, t = adam_step(arr, [g], 1e-2, m=m, v=v, t=t)
    assert np.allclose(arr[0], p.data, atol=1e-14)


def test_adam_grad_clip():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([p], lr=1.0, max_grad_norm=0.5)
    p.grad = np.array([30.0, 40.0])
    assert opt.grad_norm() == pytest.approx(50.0)
    opt.step()
    assert np.allclose(p.data, [-1.0, -1.0], atol=1e-6)


def test_beta_logprob_examples():
    ones = np.ones((1, 3))
    lp = beta_logprob(BetaParams(ones, ones), np.full((1, 3), 0.3))
    assert lp.data[0] == pytest.approx(0.0, abs=1e-12)
    lp = beta_logprob(BetaParams(2 * ones, 2 * ones), np.full((1, 3), 0.5))
    assert lp.data[0] == pytest.approx(3 * math.log(1.5), abs=1e-12)


def test_beta_logprob_boundary_clamped_and_flagged():
    p = BetaParams(np.full((2, 3), 2.0), np.full((2, 3), 3.0))
    lp, flag = beta_logprob(p, np.array([[0.0, 0.5, 0.5], [0.2, 0.5, 0.7]]), return_flag=True)
    assert flag.tolist() == [True, False]
    assert np.all(np.isfinite(lp.data))


def test_beta_density_integrates_to_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.uniform(1, 8, 2)
        val, _ = integrate.quad(lambda x: math.exp(beta_logprob_np(np.array([a]), np.array([b]), np.array([x]))),
                                0, 1, epsabs=1e-12, limit=200)
        assert abs(val - 1) <= 1e-4


def test_beta_entropy_matches_quadrature():
    for a, b in [(1.5, 2.0), (3.0, 7.0), (6.0, 1.2)]:
        def integrand(x):
            lp = beta_logprob_np(np.array([a]), np.array([b]), np.array([x]))
            return -math.exp(lp) * lp
        ref, _ = integrate.quad(integrand, 0, 1, limit=200)
        ent = beta_entropy(BetaParams(np.array([[a, a, a]]), np.array([[b, b, b]]))).data[0]
        assert ent == pytest.approx(3 * ref, abs=1e-7)


def test_beta_sampling_and_mean():
    assert beta_mean(BetaParams(np.array([2.5]), np.array([2.5])))[0] == 0.5
    assert beta_mean(BetaParams(np.array([3.0]), np.array([1.0])))[0] == 0.75
    rng = np.random.default_rng(0)
    n = 100_000
    x = beta_sample(BetaParams(np.full(n, 2.0), np.full(n, 5.0)), rng)
    var = 2 * 5 / (49 * 8)
    assert abs(x.mean() - 2 / 7) <= 3 * math.sqrt(var / n)
    assert np.all((x > 0) & (x < 1))


def test_scale_action():
    assert np.allclose(scale_action(np.full(3, 0.5), 2.0), 0)
    assert np.allclose(scale_action(np.ones(3), 2.0), 2)
    assert np.allclose(scale_action(np.zeros(3), 2.0), -2)


def bundle(n, rng, cfg=PolicyConfig()):
    return StateBundle(rng.normal(size=(n, 7)), rng.normal(size=(n, cfg.n_d, 9)),
                       rng.uniform(0.1, 4.1, (n, cfg.n_h, cfg.n_v)))


@pytest.mark.parametrize("extractor", ["conv", "dense"])
def test_policy_forward_contract(extractor):
    cfg = PolicyConfig(extractor=extractor)
    net = PolicyNet(cfg, seed=0)
    b = bundle(4, np.random.default_rng(0), cfg)
    p, v = forward(net, b)
    a, bb = p.arrays()
    assert a.shape == (4, 3) and v.shape == (4,)
    assert np.all(a > 1) and np.all(bb > 1)
    p2, v2 = forward(net, b)
    assert np.array_equal(p2.arrays()[0], a) and np.array_equal(v2, v)


def test_zero_heads_give_one_plus_ln2():
    net = PolicyNet(PolicyConfig(), seed=0)
    net.actor.head.w.data[:] = 0
    net.actor.head.b.data[:] = 0
    a, b = forward(net, bundle(3, np.random.default_rng(1)))[0].arrays()
    assert np.allclose(a, 1 + math.log(2)) and np.allclose(b, 1 + math.log(2))


def test_policy_shape_mismatch_message():
    net = PolicyNet(PolicyConfig(), seed=0)
    rng = np.random.default_rng(0)
    b = bundle(2, rng)
    b.s_stat = b.s_stat[:, :30]
    with pytest.raises(ValueError, match=r"s_stat shape mismatch: expected \(2, 36, 5\), got \(2, 30, 5\)"):
        forward(net, b)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_alpha_beta_exceed_one_for_any_logit(l1, l2):
    a = T.softplus(Tensor(np.array([l1, l2]))) + 1.0
    assert np.all(a.data >= 1.0)
    assert np.all(np.abs(scale_action(np.clip(a.data / (a.data + 1.0), 0, 1), 2.0)) <= 2.0)


def test_policy_gradient_reaches_every_parameter():
    net = PolicyNet(PolicyConfig(), seed=0)
    p, v = net.evaluate(bundle(3, np.random.default_rng(2)))
    loss = T.sum(beta_logprob(p, np.full((3, 3), 0.4))) + T.sum(T.square(v))
    loss.backward()
    assert all(q.grad is not None and np.any(q.grad != 0) for q in net.parameters())


def test_checkpoint_roundtrip(tmp_path):
    net = PolicyNet(PolicyConfig(), seed=3)
    opt = Adam(net.parameters())
    for q in net.parameters():
        q.grad = np.ones_like(q.data)
    opt.step()
    net.ret_norm.update(np.arange(10.0))
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, net, opt, meta={"update": 7})
    raw = path.read_bytes()
    assert raw[:4] == b"DNCK"
    other = PolicyNet(PolicyConfig(), seed=99)
    opt2 = Adam(other.parameters())
    _, header = load_checkpoint(path, other, opt2)
    assert np.array_equal(other.flat_params(), net.flat_params())
    assert opt2.t == 1 and all(np.array_equal(a, b) for a, b in zip(opt.m, opt2.m))
    assert other.ret_norm.state() == net.ret_norm.state()
    assert header["meta"]["update"] == 7
    fresh, _ = load_checkpoint(path)
    assert np.array_equal(fresh.flat_params(), net.flat_params())
    # payload is little-endian float64 right after the JSON header
    h, body = read_header(path)
    assert np.array_equal(np.frombuffer(body, "<f8")[:h["n_params"]], net.flat_params())


def test_checkpoint_rejects_other_architecture(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, PolicyNet(PolicyConfig(), seed=0))
    with pytest.raises(CheckpointError, match="architecture hash mismatch"):
        load_checkpoint(path, PolicyNet(PolicyConfig(hidden=(64, 64)), seed=0))
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)

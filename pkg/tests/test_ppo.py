import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slimsched.core import ActionTriple
from slimsched.neural import Adam, forward, init_params, softmax_logprob_entropy
from slimsched.ppo import (Batch, ExplorationSchedule, PPOHyper, PPORouter, RandomRouter,
                           RewardWeights, Transition, advantages, compute_reward, epsilon_at,
                           joint_logprob, mixed_server_logprob, ppo_losses, random_router,
                           select_action, update)
from slimsched.simkernel import Simulator, WorkloadSpec, named_rng

from conftest import make_cluster
from gradcheck import max_relative_error, random_instance


def test_epsilon_schedule():
    s = ExplorationSchedule(eps_min=0.05, eps_max=0.3, T_dec=20000)
    assert epsilon_at(s, 0) == 0.3
    assert epsilon_at(s, 20000) == pytest.approx(0.05)
    assert epsilon_at(s, 10**6) == 0.05
    assert epsilon_at(ExplorationSchedule(0.1, 0.3, 1000), 500) == pytest.approx(0.2)


def test_mixed_server_logprob():
    p = np.array([0.7, 0.1, 0.1, 0.1])
    assert mixed_server_logprob(p, 2, 0.0) == pytest.approx(math.log(0.1))
    assert mixed_server_logprob(p, 0, 1.0) == pytest.approx(math.log(0.25))
    assert mixed_server_logprob(np.array([0.5, 0.5]), 0, 0.2) == pytest.approx(math.log(0.5))


def test_joint_logprob():
    u = np.full(4, 0.25)
    a = ActionTriple(1, 2, 3)
    assert joint_logprob(u, u, u, a, 0.0) == pytest.approx(3 * math.log(0.25))
    assert joint_logprob(np.array([0.9, 0.1]), u, u, a._replace(srv=1), 1.0) == pytest.approx(
        math.log(0.5) + 2 * math.log(0.25))
    ps, pw, pg = np.array([0.6, 0.4]), np.array([0.1, 0.9]), np.array([0.3, 0.7])
    a = ActionTriple(0, 1, 0)
    assert math.exp(joint_logprob(ps, pw, pg, a, 0.0)) == pytest.approx(0.6 * 0.9 * 0.3)


def _server_params(rng, n=2, bias=None):
    p = init_params(n, 4, 4, 8, rng)
    if bias is not None:
        p.arrays["Ws"][:] = 0.0
        p.arrays["bs"][:] = bias
    return p


def test_select_action_uniform_under_full_exploration():
    rng = np.random.default_rng(0)
    p = _server_params(rng, n=3, bias=[10.0, 0.0, -10.0])
    x = np.zeros(p.input_dim)
    n = 100_000
    counts = np.bincount([select_action(p, x, 1.0, rng)[0].srv for _ in range(n)], minlength=3)
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) <= 3 * sigma)


def test_select_action_follows_confident_logits():
    rng = np.random.default_rng(1)
    p = _server_params(rng, bias=[10.0, -10.0])
    x = np.zeros(p.input_dim)
    hits = sum(select_action(p, x, 0.0, rng)[0].srv == 0 for _ in range(10_000))
    assert hits / 10_000 >= 0.999


def test_select_action_logprob_is_consistent(rng):
    p = init_params(3, 4, 4, 8, rng)
    x = rng.normal(size=p.input_dim)
    a, logp, v = select_action(p, x, 0.2, rng)
    ls, lw, lg, v2, _ = forward(p, x)
    probs = [softmax_logprob_entropy(l)[0] for l in (ls, lw, lg)]
    assert logp == pytest.approx(joint_logprob(*probs, a, 0.2), abs=1e-12)
    assert v == v2


def test_reward_examples():
    w = RewardWeights(alpha=1, beta=0, gamma=0, delta=0)
    assert compute_reward(0.7030, 0.3, 100.0, [0.1, 0.9], w) == pytest.approx(0.7030)
    w = RewardWeights(alpha=0, beta=1, gamma=0, delta=0)
    assert compute_reward(0.9, 0.5, 100.0, [0.5], w) == pytest.approx(-0.5)
    w = RewardWeights(alpha=1, beta=0.5, gamma=0.01, delta=1)
    assert compute_reward(0.743, 0.1, 20.0, [0.4, 0.6], w) == pytest.approx(0.663)


def test_reward_rejects_bad_inputs():
    with pytest.raises(ValueError):
        compute_reward(0.7, -0.1, 1.0, [0.5], RewardWeights())
    with pytest.raises(ValueError):
        compute_reward(0.7, 0.1, 1.0, [1.5], RewardWeights())
    with pytest.raises(ValueError):
        RewardWeights(beta=-1.0)


@given(st.floats(0, 1), st.floats(0, 5), st.floats(1, 300),
       st.lists(st.floats(0, 1), min_size=1, max_size=4),
       st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_reward_is_affine_in_the_weights(p, L, P, us, a, b, g, d):
    base = RewardWeights(0, 0, 0, 0)
    terms = [compute_reward(p, L, P, us, RewardWeights(**{**base.__dict__, k: 1.0}))
             for k in ("alpha", "beta", "gamma", "delta")]
    full = compute_reward(p, L, P, us, RewardWeights(a, b, g, d))
    expect = a * terms[0] + b * terms[1] + g * terms[2] + d * terms[3]
    assert full == pytest.approx(expect, rel=1e-9, abs=1e-9)


def test_advantages_examples():
    np.testing.assert_allclose(advantages([1.0, 3.0], [0.0, 0.0]), [-1.0, 1.0], atol=1e-7)
    np.testing.assert_array_equal(advantages([2.0, 2.0], [2.0, 2.0]), [0.0, 0.0])
    a = advantages([0.3, 1.7, -2.0], [0.1, 0.2, 0.3])
    np.testing.assert_allclose(advantages([5.3, 6.7, 3.0], [0.1, 0.2, 0.3]), a, atol=1e-9)


def _batch(ratio, adv):
    # one sample with a controlled ratio: logp_old = logp - log(ratio)
    rng = np.random.default_rng(0)
    p = init_params(2, 2, 2, 4, rng)
    x = np.zeros((1, p.input_dim))
    a = np.array([[0, 1, 0]])
    ls, lw, lg, _, _ = forward(p, x)
    logp = (math.log(softmax_logprob_entropy(ls[0])[0][0])
            + softmax_logprob_entropy(lw[0])[1][1] + softmax_logprob_entropy(lg[0])[1][0])
    b = Batch(x, a, np.array([logp - math.log(ratio)]), np.zeros(1), np.array([adv]),
              np.zeros(1))
    return p, b


def test_clip_arithmetic():
    p, b = _batch(1.5, 2.0)
    assert ppo_losses(p, b, clip=0.2)[0].clip == pytest.approx(2.4)
    p, b = _batch(0.5, -1.0)
    assert ppo_losses(p, b, clip=0.2)[0].clip == pytest.approx(-0.8)


@given(st.floats(0.05, 5.0), st.floats(-3, 3), st.floats(0.05, 0.5))
def test_clipped_surrogate_is_a_lower_bound(ratio, adv, clip):
    p, b = _batch(ratio, adv)
    l = ppo_losses(p, b, clip=clip, with_grad=False)[0].clip
    assert l <= ratio * adv + 1e-9
    assert l <= np.clip(ratio, 1 - clip, 1 + clip) * adv + 1e-9


def _collected(rng, n=6):
    p = init_params(3, 4, 4, 8, rng)
    ts = []
    for i in range(n):
        x = rng.normal(size=p.input_dim)
        eps = float(rng.uniform(0, 0.3))
        a, logp, v = select_action(p, x, eps, rng)
        ts.append(Transition(x, a, logp, v, float(rng.normal()), eps))
    return p, Batch.from_transitions(ts)


def test_identity_ratio_after_collection(rng):
    p, b = _collected(rng)
    l, _ = ppo_losses(p, b)
    np.testing.assert_allclose(l.ratio, 1.0, atol=1e-9)
    assert l.clip == pytest.approx(float(np.mean(b.adv)), abs=1e-12)


def test_update_k0_is_noop_and_trace_length(rng):
    p, b = _collected(rng)
    before = p.copy()
    assert update(p, Adam(p), b, PPOHyper(K=0)) == []
    for k in p.arrays:
        np.testing.assert_array_equal(p.arrays[k], before.arrays[k])
    assert len(update(p, Adam(p), b, PPOHyper(K=3))) == 3


def test_update_raises_the_logprob_of_a_good_action(rng):
    p = init_params(3, 4, 4, 8, rng)
    x = rng.normal(size=p.input_dim)
    a, logp, v = select_action(p, x, 0.1, rng)
    b = Batch.from_transitions([Transition(x, a, logp, v, v + 1.0, 0.1)])
    assert b.adv[0] > 0
    update(p, Adam(p, lr=1e-2), b, PPOHyper(K=1, c_H=0.0))
    after = ppo_losses(p, b, with_grad=False)[0].ratio[0]
    assert after >= 1.0


def test_update_restores_params_on_non_finite_loss(rng):
    p, b = _collected(rng)
    b.returns[0] = np.inf
    before = p.copy()
    with pytest.raises(FloatingPointError):
        update(p, Adam(p), b, PPOHyper(K=2))
    for k in p.arrays:
        np.testing.assert_array_equal(p.arrays[k], before.arrays[k])


def test_gradient_spot_check():
    rng = np.random.default_rng(11)
    for _ in range(5):
        p, b = random_instance(rng)
        assert max_relative_error(p, b) <= 1e-4


def test_random_router_frequencies_and_blindness():
    rng = np.random.default_rng(3)
    n = 100_000
    srv = np.bincount([random_router(None, rng, 4, 4, 4).srv for _ in range(n)], minlength=4)
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(srv - n / 4) <= 3 * sigma)
    a = random_router(np.zeros(5), np.random.default_rng(9), 3, 4, 4)
    b = random_router(np.ones(5) * 7, np.random.default_rng(9), 3, 4, 4)
    assert a == b
    assert all(random_router(None, rng, 1, 4, 4).srv == 0 for _ in range(100))


def test_checkpointed_router_reproduces_decisions(tmp_path):
    from slimsched.neural import RunningNorm, load_checkpoint, save_checkpoint
    rng = np.random.default_rng(2)
    p = init_params(3, 4, 4, 8, rng)
    norm = RunningNorm(p.input_dim)
    for _ in range(20):
        norm.update(rng.normal(size=p.input_dim) * 5)
    norm.frozen = True
    save_checkpoint(tmp_path / "c.json", p, norm)
    q, qn, _ = load_checkpoint(tmp_path / "c.json")
    wl = WorkloadSpec(rate=100, horizon=2.0, seed=6)

    def blocks(params, nrm):
        sim = Simulator(make_cluster(), wl, PPORouter(params, nrm, named_rng(1, "policy")))
        sim.run()
        return [(b.server, b.width, b.size) for b in sim.blocks]

    assert blocks(p, norm) == blocks(q, qn)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semctl import agents as ag
from semctl import nn

P = ag.RewardParams(5.0, 20.0)


def test_reward_params_validation():
    with pytest.raises(ValueError):
        ag.RewardParams(5.0, 5.0)
    with pytest.raises(ValueError):
        ag.RewardParams(0.0, 1.0)
    assert P.c1 == 12.5
    assert P.c2 == pytest.approx(17.5 / 15.0)
    assert P.c2 > 1


def test_huber_values():
    assert ag.huber(0.0, P) == 0.0
    assert ag.huber(5.0, P) == pytest.approx(12.5)
    assert ag.huber(5.0 - 1e-12, P) == pytest.approx(12.5)
    assert ag.huber(10.0, P) == pytest.approx(37.5)


def test_reward_equal_at_upper_bound():
    v = ag.huber(P.delta_u, P)
    r0, r1 = ag.hybrid_reward(v, 0, P), ag.hybrid_reward(v, 1, P)
    assert r0 == pytest.approx(r1, rel=1e-12)
    assert r1 == pytest.approx(0.5 * 25 - 5 * 20)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 100.0), st.floats(1.001, 50.0), st.floats(0.0, 1.0))
def test_reward_ordering(delta_l, ratio, frac):
    p = ag.RewardParams(delta_l, delta_l * ratio)
    below = frac * delta_l * 0.999
    v = ag.huber(below, p)
    assert ag.hybrid_reward(v, 0, p) > ag.hybrid_reward(v, 1, p)
    above = p.delta_u * (1.0 + 1e-6 + 10 * frac)
    v = ag.huber(above, p)
    assert ag.hybrid_reward(v, 0, p) < ag.hybrid_reward(v, 1, p)


def test_silent_reward_falls_faster_above_delta_l():
    e = np.linspace(P.delta_l, 5 * P.delta_u, 200)
    h = 1e-3
    slope = lambda a: (ag.hybrid_reward(ag.huber(e + h, P), a, P) - ag.hybrid_reward(ag.huber(e, P), a, P)) / h
    assert np.all(slope(0) < slope(1))


def test_state_normalisation():
    norm = ag.StateNormalizer(m_mean=1.0, m_std=2.0)
    s = norm.tx(3.0, 60.0, 4800.0)
    np.testing.assert_allclose(s, [1.0, 0.5, 20.0 / 30.0])
    r = norm.rx(np.array([[400.0, -200.0, 0.0]]), np.array([1]), 4800.0)
    np.testing.assert_allclose(r, [[1.0, -0.5, 0.0, 1.0, 20.0 / 30.0]])
    assert norm.tx(np.zeros(4), np.zeros(4), np.full(4, 1.0)).shape == (4, 3)


def test_idle_time():
    assert ag.update_idle_time(5.0, 1) == 0.0
    assert ag.update_idle_time(5.0, 0, 1.0) == 6.0
    t = 0.0
    for _ in range(7):
        t = ag.update_idle_time(t, 0, 0.5)
    assert t == 3.5


def dueling_with_heads(value, adv):
    net = ag.DuelingQNet(input_size=1, hidden=(2,), zero=True)
    net.trunk.biases[0] = np.array([1.0, 0.0])
    net.value.weights[0] = np.array([[value], [0.0]])
    net.advantage.weights[0] = np.array([[adv[0], adv[1]], [0.0, 0.0]])
    return net


def test_dueling_combination_hand_computed():
    net = dueling_with_heads(2.0, (1.0, 3.0))
    q0, q1 = ag.dueling_q_values(net, np.zeros(1))
    assert (q0, q1) == pytest.approx((1.0, 3.0))
    q0, q1 = ag.dueling_q_values(dueling_with_heads(2.0, (4.0, 4.0)), np.zeros(1))
    assert q0 == q1 == pytest.approx(2.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100), st.integers(0, 1000))
def test_dueling_advantage_shift_invariance(c, seed):
    net = ag.DuelingQNet(rng=seed)
    s = np.random.default_rng(seed).standard_normal((5, 3))
    before = net.forward(s)
    net.advantage.biases[0] = net.advantage.biases[0] + c
    after = net.forward(s)
    np.testing.assert_allclose(after, before, atol=1e-9)
    np.testing.assert_array_equal(ag.greedy_from_q(after), ag.greedy_from_q(before))


def test_select_transmission_ties_go_silent():
    assert ag.greedy_from_q(np.array([1.0, 2.0])) == 1
    assert ag.greedy_from_q(np.array([2.0, 1.0])) == 0
    assert ag.greedy_from_q(np.array([1.5, 1.5])) == 0
    assert ag.select_transmission(dueling_with_heads(0.0, (0.0, 0.0)), np.zeros(1)) == 0


def test_q_learning_target():
    online = dueling_with_heads(0.0, (0.0, 1.0))  # picks a* = 1
    target = dueling_with_heads(2.0, (5.0, 5.0))  # Q = 2 for both actions
    s = np.zeros((1, 1))
    assert ag.q_learning_target(online, target, [1.0], s, [0.0], 0.99)[0] == pytest.approx(2.98)
    assert ag.q_learning_target(online, target, [1.0], s, [1.0], 0.99)[0] == 1.0
    assert ag.q_learning_target(online, target, [1.0], s, [0.0], 0.0)[0] == 1.0


def test_target_network_never_changes_selection():
    rng = np.random.default_rng(0)
    online, target = ag.DuelingQNet(rng=1), ag.DuelingQNet(rng=2)
    s = rng.standard_normal((64, 3))
    a_star = ag.greedy_from_q(online.forward(s))
    y1 = ag.q_learning_target(online, target, np.zeros(64), s, np.zeros(64), 1.0)
    manual = np.take_along_axis(target.forward(s), a_star[:, None], axis=1)[:, 0]
    np.testing.assert_allclose(y1, manual)
    target2 = ag.DuelingQNet(rng=3)
    y2 = ag.q_learning_target(online, target2, np.zeros(64), s, np.zeros(64), 1.0)
    np.testing.assert_allclose(y2, np.take_along_axis(target2.forward(s), a_star[:, None], axis=1)[:, 0])
    assert not np.allclose(y1, y2)


def test_dqn_loss_values_and_gradient():
    net = ag.DuelingQNet(rng=0)
    rng = np.random.default_rng(1)
    s, a = rng.standard_normal((16, 3)), rng.integers(0, 2, 16)
    Q = net.forward(s)[np.arange(16), a]
    assert ag.dqn_loss(net, Q, s, a)[0] == pytest.approx(0.0, abs=1e-20)
    assert ag.dqn_loss(net, Q + 2.0, s, a)[0] == pytest.approx(4.0)
    Y = rng.standard_normal(16)

    def loss(out):
        r = out[np.arange(16), a] - Y
        d = np.zeros_like(out)
        d[np.arange(16), a] = 2 * r / 16
        return float(np.mean(r * r)), d

    assert nn.gradient_check(net, loss, s, n_directions=100, rng=2) <= 1e-4
    _, grads = ag.dqn_loss(net, Y, s, a)
    _, ref = nn.value_and_grad(net, loss, s)
    for g, h in zip(grads, ref):
        np.testing.assert_allclose(g, h, atol=1e-12)


def test_actor_action_and_gain():
    rng = np.random.default_rng(0)
    zero_actor = nn.Mlp.preset("actor", zero=True)
    assert ag.actor_action(zero_actor, np.zeros(5), 0.0, rng) == 0.0
    actor = nn.Mlp.preset("actor", rng=1)
    k = ag.actor_action(actor, rng.standard_normal((10_000, 5)), 4.0, rng)
    assert np.all((k >= -1) & (k <= 1))
    assert ag.gain_from_action(-1.0) == 0.0
    assert ag.gain_from_action(1.0) == 30.0
    assert ag.gain_from_action(0.0) == 15.0
    with pytest.raises(ValueError):
        ag.gain_from_action(1.01)
    ks = np.linspace(-1, 1, 101)
    assert np.all(np.diff(ag.gain_from_action(ks)) > 0)


def test_actor_action_clips_large_means():
    actor = nn.Mlp((5, 1), output_activation="tanh", zero=True)
    actor.biases[0] = np.array([np.arctanh(0.95)])

    class FixedNoise:
        def normal(self, loc, scale, size):
            return np.full(size, 0.2)

    assert ag.actor_action(actor, np.zeros((1, 5)), 0.04, FixedNoise())[0] == 1.0


def test_td3_target():
    rng = np.random.default_rng(0)
    actor = nn.Mlp.preset("actor", rng=1)
    c = nn.Mlp((6, 1), zero=True)
    c.biases[0] = np.array([1.0])
    s = rng.standard_normal((3, 5))
    y = ag.td3_target(actor, c, c, [2.0] * 3, s, [0, 0, 1], 0.99, 0.2, 0.1, rng)
    np.testing.assert_allclose(y, [-1.01, -1.01, -2.0])
    c2 = nn.Mlp((6, 1), zero=True)
    c2.biases[0] = np.array([0.5])
    y = ag.td3_target(actor, c, c2, [0.0], s[:1], [0], 1.0, 0.2, 0.1, rng)
    assert y[0] == pytest.approx(0.5)


def test_critic_and_actor_losses():
    rng = np.random.default_rng(0)
    actor, critic = nn.Mlp.preset("actor", rng=1), nn.Mlp.preset("critic", rng=2)
    s, k = rng.standard_normal((32, 5)), rng.uniform(-1, 1, 32)
    q = critic.forward(ag.critic_input(s, k))[:, 0]
    assert ag.critic_loss(critic, s, k, q)[0] == pytest.approx(0.0, abs=1e-20)
    mu = actor.forward(s)[:, 0]
    assert ag.actor_loss(actor, critic, s)[0] == pytest.approx(-critic.forward(ag.critic_input(s, mu)).mean())

    y = rng.standard_normal(32)
    for net, fn in ((critic, lambda: ag.critic_loss(critic, s, k, y)), (actor, lambda: ag.actor_loss(actor, critic, s))):
        base = [p.copy() for p in net.params()]
        _, grads = fn()
        for trial in range(5):
            d = [rng.standard_normal(p.shape) for p in base]
            eps = 1e-6
            net.set_params([p + eps * x for p, x in zip(base, d)])
            up = fn()[0]
            net.set_params([p - eps * x for p, x in zip(base, d)])
            down = fn()[0]
            net.set_params(base)
            analytic = sum(float(np.sum(g * x)) for g, x in zip(grads, d))
            assert abs((up - down) / (2 * eps) - analytic) <= 1e-4 * max(abs(analytic), 1e-8)


def test_actor_step_leaves_critic_untouched():
    actor, critic = nn.Mlp.preset("actor", rng=1), nn.Mlp.preset("critic", rng=2)
    before = [p.copy() for p in critic.params()]
    _, grads = ag.actor_loss(actor, critic, np.random.default_rng(0).standard_normal((8, 5)))
    assert len(grads) == len(actor.params())
    for p, q in zip(before, critic.params()):
        np.testing.assert_array_equal(p, q)


def transition(n, value=0.0):
    return {
        "tx": np.full((n, 3), value), "rx": np.full((n, 5), value), "a": np.full(n, 1.0), "k": np.zeros(n),
        "r": np.full(n, value), "v": np.zeros(n), "tx_next": np.zeros((n, 3)), "rx_next": np.zeros((n, 5)),
        "done": np.zeros(n),
    }


def test_replay_ring_eviction_and_errors():
    buf = ag.ReplayBuffer(2)
    for v in (1.0, 2.0, 3.0):
        buf.push(**transition(1, v))
    assert len(buf) == 2
    assert set(buf.data["r"]) == {2.0, 3.0}
    with pytest.raises(ValueError):
        buf.sample(3, np.random.default_rng(0))
    big = ag.ReplayBuffer(3)
    big.push(**{k: np.arange(5.0) if v.ndim == 1 else np.tile(np.arange(5.0)[:, None], (1, v.shape[1]))
                for k, v in transition(5).items()})
    assert sorted(big.data["r"]) == [2.0, 3.0, 4.0]


def test_replay_sampling_is_uniform():
    from scipy.stats import chisquare

    buf = ag.ReplayBuffer(10)
    buf.push(**{**transition(10), "r": np.arange(10.0)})
    rng = np.random.default_rng(0)
    draws = np.concatenate([buf.sample(10, rng)["r"] for _ in range(1000)])
    assert draws.min() >= 0 and draws.max() <= 9
    counts = np.bincount(draws.astype(int), minlength=10)
    assert chisquare(counts).pvalue > 0.01


def test_epsilon_greedy():
    rng = np.random.default_rng(0)
    assert np.all(ag.epsilon_greedy_decision(0.0, 0.4, np.ones(1000, dtype=int), rng) == 1)
    a = ag.epsilon_greedy_decision(1.0, 0.4, np.zeros(100_000, dtype=int), rng)
    assert abs(a.mean() - 0.4) <= 0.01
    assert np.all(ag.epsilon_greedy_decision(1.0, 0.0, np.ones(1000, dtype=int), rng) == 0)
    assert ag.epsilon_greedy_decision(0.0, 0.4, 1, rng) == 1

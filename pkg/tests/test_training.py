import numpy as np
import pytest

from semctl import agents as ag
from semctl import env, mine, nn, sfr
from semctl import training as tr

SMALL = dict(T=20, M=3, episode_len=150, batch_size=64, buffer_size=5000, n_envs=3)


@pytest.fixture(scope="module")
def parts():
    cfg = tr.TrainConfig(**SMALL)
    mine_model = mine.MineModel(nn.Mlp((6, 8, 1), rng=0), input_scale=5.0)
    sfr_model = sfr.SfrModel(T=20, M=3, hidden_size=4, num_layers=1, vel_scale=2.0, out_scale=5.0, rng=1)
    bundle = tr.AgentBundle.create(cfg, ag.StateNormalizer(), np.random.default_rng(2))
    return cfg, mine_model, sfr_model, bundle


def force_decision(bundle, a):
    b = tr.AgentBundle(nn.clone(bundle.q), bundle.actor, bundle.critic1, bundle.critic2, bundle.normalizer, bundle.reward,
                       bundle.k_max, bundle.targets)
    for W in b.q.advantage.weights:
        W[:] = 0.0
    b.q.advantage.biases[0] = np.array([0.0, 100.0]) if a == 1 else np.array([100.0, 0.0])
    return b


def specs(cfg, n=3, psnr=20.0, seed=0):
    return [tr.episode_spec(seed, k, cfg, psnr_db=psnr) for k in range(n)]


def test_config_parsing():
    cfg = tr.parse_config_text("# comment\nepisodes = 10\ndelta_l = 15  # mm\nn_envs=4\n")
    assert (cfg.episodes, cfg.delta_l, cfg.n_envs) == (10, 15.0, 4)
    assert isinstance(cfg.episodes, int)
    assert tr.parse_config_text(tr.format_config(cfg)) == cfg
    with pytest.raises(ValueError, match="unknown"):
        tr.parse_config_text("learning_rate = 1\n")
    with pytest.raises(ValueError, match="line 1"):
        tr.parse_config_text("episodes 10\n")
    with pytest.raises(ValueError):
        tr.parse_config_text("rho = -1\n")
    with pytest.raises(ValueError):
        tr.TrainConfig(delta_l=30.0, delta_u=20.0)


def test_exploration_schedules():
    cfg = tr.TrainConfig()
    assert cfg.epsilon(0) == 1.0
    assert cfg.epsilon(1000) == pytest.approx(0.3)
    assert cfg.epsilon(1357) > cfg.eps_min
    assert cfg.epsilon(1358) == cfg.eps_min
    assert cfg.exploration_var(2) == pytest.approx(0.2 * 0.999 ** 2)
    np.testing.assert_allclose(cfg.psnr_choices, [8, 10, 12, 14, 16, 18, 20, 22, 24])


def test_episode_specs_are_deterministic(parts):
    cfg = parts[0]
    a, b = tr.episode_spec(3, 7, cfg), tr.episode_spec(3, 7, cfg)
    np.testing.assert_array_equal(a.trajectory, b.trajectory)
    assert (a.psnr_db, a.seed) == (b.psnr_db, b.seed)
    assert a.psnr_db in cfg.psnr_choices
    assert tr.episode_spec(3, 8, cfg).seed != a.seed


def test_warmup_forces_transmission(parts):
    cfg, mine_model, sfr_model, bundle = parts
    silent = force_decision(bundle, 0)
    out = tr.rollout(specs(cfg), tr.PROPOSED, cfg, silent, mine_model, sfr_model, record=True)
    for t in out.traces:
        assert np.all(t.a[:cfg.T + 1] == 1)
        assert np.all(t.a[cfg.T + 1:] == 0)


def test_always_transmit_policy_matches_baseline(parts):
    cfg, mine_model, sfr_model, bundle = parts
    loud = force_decision(bundle, 1)
    learned = tr.rollout(specs(cfg), tr.PROPOSED, cfg, loud, mine_model, sfr_model, record=True).traces
    base = tr.rollout(specs(cfg), tr.RolloutPolicy("always", "learned"), cfg, loud, mine_model, sfr_model, record=True).traces
    for a, b in zip(learned, base):
        assert a.duty_cycle == 1.0
        np.testing.assert_array_equal(a.x_bar, b.x_bar)
        np.testing.assert_array_equal(a.K, b.K)


def test_batch_composition_does_not_change_episodes(parts):
    cfg, mine_model, sfr_model, bundle = parts
    s = specs(cfg, n=3)
    together = tr.rollout(s, tr.PROPOSED, cfg, bundle, mine_model, sfr_model, eps=0.5, expl_var=0.1, record=True).traces
    alone = tr.rollout(s[1:2], tr.PROPOSED, cfg, bundle, mine_model, sfr_model, eps=0.5, expl_var=0.1, record=True).traces
    np.testing.assert_allclose(together[1].x_bar, alone[0].x_bar, atol=1e-9)
    np.testing.assert_array_equal(together[1].a, alone[0].a)


def test_noise_free_tracking_of_slow_sinusoid():
    cfg = tr.TrainConfig(episode_len=1200)
    t = np.arange(1200) / env.SENSING_RATE_HZ
    centre = np.array([79.0, 25.0, -60.0])
    traj = centre + 50.0 * np.sin(2 * np.pi * 0.05 * t)[:, None] * np.array([1.0, 0.5, -0.8])
    policy = tr.RolloutPolicy("always", "fixed", use_sfr=False, fixed_gain=15.0)
    trace = tr.rollout([tr.EnvSpec(traj, None, 0)], policy, cfg, record=True).traces[0]
    assert np.mean(trace.e[200:]) < 2.0
    assert trace.duty_cycle == 1.0


def test_periodic_policy_duty_cycle(parts):
    cfg = parts[0]
    for S in (2, 3, 4):
        t = tr.rollout(specs(cfg, n=1), tr.RolloutPolicy("periodic", "fixed", use_sfr=False, period=S), cfg).traces[0]
        assert abs(t.duty_cycle - 1 / S) <= 1 / cfg.episode_len


def test_transitions_chain_and_bounds(parts):
    cfg, mine_model, sfr_model, bundle = parts
    out = tr.rollout(specs(cfg), tr.PROPOSED, cfg, bundle, mine_model, sfr_model, eps=0.5, expl_var=0.2, collect=True)
    tx, tx_next, done = out.transitions["tx"], out.transitions["tx_next"], out.transitions["done"]
    L = cfg.episode_len
    for e in range(3):
        rows = slice(e * L, (e + 1) * L)
        np.testing.assert_array_equal(tx_next[rows][:-1], tx[rows][1:])
        np.testing.assert_array_equal(out.transitions["rx_next"][rows][:-1], out.transitions["rx"][rows][1:])
        assert done[rows][-1] == 1 and not done[rows][:-1].any()
    assert np.all(np.abs(out.transitions["k"]) <= 1)
    assert set(np.unique(out.transitions["a"])) <= {0.0, 1.0}
    assert np.all(out.transitions["v"] >= 0)


def test_rewards_follow_error_definition(parts):
    cfg, mine_model, sfr_model, bundle = parts
    t = tr.rollout(specs(cfg, n=1), tr.PROPOSED, cfg, bundle, mine_model, sfr_model, record=True).traces[0]
    x_hat_b = env.map_touch_to_panda(t.x_hat)
    np.testing.assert_allclose(t.e, np.linalg.norm(t.x_bar - x_hat_b, axis=1))
    np.testing.assert_allclose(t.v, ag.huber(t.e, bundle.reward))
    np.testing.assert_allclose(t.r, ag.hybrid_reward(t.v, t.a, bundle.reward))
    assert t.S_e == pytest.approx(env.control_error_metric(x_hat_b, t.x_bar))
    assert t.total_reward == pytest.approx(t.r.sum())


def test_missing_models_are_errors(parts):
    cfg, mine_model, sfr_model, bundle = parts
    with pytest.raises(ValueError):
        tr.rollout(specs(cfg), tr.PROPOSED, cfg, None, mine_model, sfr_model)
    with pytest.raises(ValueError):
        tr.rollout(specs(cfg), tr.PROPOSED, cfg, bundle, None, sfr_model)
    with pytest.raises(ValueError):
        tr.rollout(specs(cfg), tr.PROPOSED, cfg, bundle, mine_model, None)


def synthetic_replay(n, rng):
    buf = ag.ReplayBuffer(n)
    buf.push(
        tx=rng.standard_normal((n, 3)), rx=rng.standard_normal((n, 5)), a=rng.integers(0, 2, n).astype(float),
        k=rng.uniform(-1, 1, n), r=-rng.random(n), v=rng.random(n), tx_next=rng.standard_normal((n, 3)),
        rx_next=rng.standard_normal((n, 5)), done=(rng.random(n) < 0.01).astype(float),
    )
    return buf


def test_update_cadence_and_finite_losses():
    rng = np.random.default_rng(0)
    cfg = tr.TrainConfig(**SMALL)
    learner = tr.Learner(tr.AgentBundle.create(cfg, ag.StateNormalizer(), rng), cfg)
    replay = synthetic_replay(500, rng)
    actor_steps = []
    for step in range(1, 101):
        before = learner.bundle.targets["actor"].params()[0].copy()
        losses = tr.train_step_batch(learner, replay, (step - 1) % cfg.n_updates + 1, rng)
        assert all(np.isfinite(v) for v in losses.values())
        changed = not np.array_equal(before, learner.bundle.targets["actor"].params()[0])
        assert ("actor" in losses) == changed
        if "actor" in losses:
            actor_steps.append((step - 1) % cfg.n_updates + 1)
    assert actor_steps[:6] == [3, 6, 9, 12, 15, 18]
    assert len(actor_steps) == 5 * (cfg.n_updates // cfg.policy_delay)


def test_update_requires_enough_replay():
    rng = np.random.default_rng(0)
    cfg = tr.TrainConfig(**SMALL)
    learner = tr.Learner(tr.AgentBundle.create(cfg, ag.StateNormalizer(), rng), cfg)
    with pytest.raises(ValueError):
        tr.train_step_batch(learner, synthetic_replay(10, rng), 1, rng)


def test_full_soft_update_copies_online_networks():
    rng = np.random.default_rng(0)
    cfg = tr.TrainConfig(**{**SMALL, "rho": 1.0})
    learner = tr.Learner(tr.AgentBundle.create(cfg, ag.StateNormalizer(), rng), cfg)
    tr.train_step_batch(learner, synthetic_replay(500, rng), 3, rng)
    for name in tr.AgentBundle.ONLINE:
        for p, q in zip(getattr(learner.bundle, name).params(), learner.bundle.targets[name].params()):
            np.testing.assert_array_equal(p, q)


def test_train_logs_every_episode_and_is_reproducible(parts, tmp_path):
    _, mine_model, sfr_model, _ = parts
    cfg = tr.TrainConfig(**{**SMALL, "episodes": 4, "n_envs": 2, "n_updates": 3, "seed": 5})
    res = tr.train(cfg, mine_model, sfr_model, log_path=tmp_path / "log.csv")
    rows = tr.read_log(tmp_path / "log.csv")
    assert [r["episode"] for r in rows] == [0, 1, 2, 3]
    assert list(rows[0]) == list(tr.LOG_FIELDS)
    assert all(np.isfinite(r["loss_q"]) for r in rows)
    again = tr.train(cfg, mine_model, sfr_model)
    for p, q in zip(res.bundle.q.params(), again.bundle.q.params()):
        np.testing.assert_array_equal(p, q)
    tr.save_bundle(tmp_path / "agents.npz", res.bundle, cfg)
    back, back_cfg = tr.load_bundle(tmp_path / "agents.npz")
    assert back_cfg == cfg
    assert back.normalizer == res.bundle.normalizer
    for p, q in zip(res.bundle.actor.params(), back.actor.params()):
        np.testing.assert_array_equal(p, q)

import math

import numpy as np
import pytest

from semctl import mine, nn


def small_model(seed=0, **kw):
    return mine.MineModel(nn.Mlp((6, 16, 1), rng=seed), **kw)


def test_dv_from_scores_hand_value():
    joint, marg = np.array([1.0, 2.0, 3.0]), np.array([0.0, math.log(3.0)])
    assert mine.dv_from_scores(joint, marg) == pytest.approx(2.0 - math.log(2.0))


def test_dv_estimate_is_overflow_safe():
    big = np.array([1000.0, 1001.0])
    assert mine.dv_from_scores(big, big) == pytest.approx(1000.5 - (1001.0 + math.log((math.exp(-1) + 1) / 2)))


def test_dv_estimate_rejects_empty_batches():
    model = small_model()
    with pytest.raises(ValueError):
        mine.dv_estimate(model, (np.zeros((0, 3)), np.zeros((0, 3))), (np.zeros((2, 3)), np.zeros((2, 3))))


def test_score_of_pair_matches_vectorised_scores():
    model = small_model()
    rng = np.random.default_rng(1)
    cur, anc = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    batch = mine.mine_scores(model, cur, anc)
    for i in range(5):
        assert mine.mine_score(model, mine.MiSamplePair(cur[i], anc[i])) == pytest.approx(batch[i])


def test_zero_network_scores_zero_and_estimates_zero():
    model = mine.MineModel(nn.Mlp((6, 4, 1), zero=True))
    x = np.ones((4, 3))
    assert mine.dv_estimate(model, (x, x), (x, -x)) == 0.0


def test_moving_average_recursion_per_step():
    rng = np.random.default_rng(2)
    model = small_model(gamma_ma=0.9)
    opt = nn.Optimizer(model.stats_net)
    for _ in range(5):
        joint = (rng.standard_normal((32, 3)), rng.standard_normal((32, 3)))
        marg = (rng.standard_normal((32, 3)), rng.standard_normal((32, 3)))
        before = model.e_bar0
        e_bar = float(np.mean(np.exp(mine.mine_scores(model, *marg))))
        mine.mine_train_step(model, opt, joint, marg)
        assert model.e_bar0 == pytest.approx(0.9 * before + 0.1 * e_bar, rel=1e-12)


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    model = small_model(seed=4, input_scale=2.0)
    n = 16
    X = np.concatenate([rng.standard_normal((n, 6)), rng.standard_normal((n, 6))])
    e_bar0 = 1.3

    def loss(out):
        value, dj, dm = mine.moving_average_objective(out[:n, 0], out[n:, 0], e_bar0)
        return -value, -np.concatenate([dj, dm])[:, None]

    assert nn.gradient_check(model.stats_net, loss, X, n_directions=50, rng=5) <= 1e-6


def test_training_separates_joint_from_marginal_pairs():
    rng = np.random.default_rng(6)
    x, z = mine.correlated_gaussian_pairs(8000, 0.8, rng)
    model, hist = mine.train_mine(mine.corpus_from_pairs(x, z), mine.MineTrainConfig(batch_size=256, max_epochs=8))
    x2, z2 = mine.correlated_gaussian_pairs(4000, 0.8, np.random.default_rng(7))
    joint = mine.mine_scores(model, x2, z2).mean()
    marg = mine.mine_scores(model, x2, z2[np.random.default_rng(8).permutation(4000)]).mean()
    assert joint > marg
    assert mine.estimate_mi(model, x2, z2, rng=9) > 0.5
    assert len(hist.objective) == len(hist.dv) == len(hist.val_dv) == 8
    assert hist.val_dv[hist.best_epoch] == max(hist.val_dv)


def test_train_rejects_small_corpus():
    x = np.zeros((10, 3))
    with pytest.raises(ValueError):
        mine.train_mine(mine.corpus_from_pairs(x, x), mine.MineTrainConfig(batch_size=64))


def test_gaussian_mi_reference_values():
    # three independent coordinate pairs, each carrying -log(1 - rho^2) / 2
    assert mine.gaussian_mi(0.9) == pytest.approx(2.4911, abs=1e-4)
    assert mine.gaussian_mi(0.5) == pytest.approx(0.4315, abs=1e-4)


def test_corpus_anchor_is_last_earlier_transmission():
    rng = np.random.default_rng(0)
    traj = np.cumsum(rng.standard_normal((50, 3)), axis=0)
    corpus = mine.build_corpus([traj], np.random.default_rng(1), psnr_choices=None, p_transmit=0.3)
    vel = np.diff(traj, axis=0, prepend=traj[:1])
    # replay the pattern from the same seed to recover which slots were sent
    g = np.random.default_rng(1)
    g.normal(0.0, 0.0, size=(50, 3))
    sent = g.random(50) < 0.3
    sent[0] = True
    for i in range(1, 50):
        t = max(j for j in range(i) if sent[j])
        np.testing.assert_array_equal(corpus.v_anchor[i - 1], vel[t])
    np.testing.assert_array_equal(corpus.pool, vel[sent])


def test_checkpoint_round_trip(tmp_path):
    model = small_model(e_bar0=1.7, input_scale=3.0, score_mean=0.2, score_std=0.9)
    mine.save_mine(tmp_path / "m.npz", model)
    back = mine.load_mine(tmp_path / "m.npz")
    assert back.meta() == model.meta()
    x = np.ones((2, 3))
    np.testing.assert_array_equal(mine.mine_scores(back, x, x), mine.mine_scores(model, x, x))

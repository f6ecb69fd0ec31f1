"""Mutual-information scoring of the current velocity against the last sent one.

The statistics network sees the concatenation ``[v_current; v_anchor]`` (both
divided by ``input_scale``). Training ascends the moving-average corrected
Donsker-Varadhan objective

    V = mean(T_joint) - (e_bar / e_bar0) * log(e_bar),   e_bar = mean(exp(T_marginal))

with ``e_bar0 <- gamma * e_bar0 + (1 - gamma) * e_bar`` updated before each step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from semctl import nn
from semctl.env import DEFAULT_BOUNDS, NoiseConfig, psnr_to_sigma2

log = logging.getLogger(__name__)


@dataclass
class MiSamplePair:
    v_current: np.ndarray
    v_anchor: np.ndarray


@dataclass
class MineModel:
    stats_net: nn.Mlp
    e_bar0: float = 1.0
    gamma_ma: float = 0.99
    input_scale: float = 1.0
    # statistics of joint-pair scores, used to standardise m_i for the agents
    score_mean: float = 0.0
    score_std: float = 1.0

    def __post_init__(self):
        if not self.e_bar0 > 0:
            raise ValueError("e_bar0 must be positive")
        if not 0.0 < self.gamma_ma <= 1.0:
            raise ValueError("gamma_ma must lie in (0, 1]")

    @classmethod
    def create(cls, rng=None, **kwargs):
        return cls(nn.Mlp.preset("mine", rng=rng), **kwargs)

    def meta(self):
        return {
            "e_bar0": self.e_bar0,
            "gamma_ma": self.gamma_ma,
            "input_scale": self.input_scale,
            "score_mean": self.score_mean,
            "score_std": self.score_std,
        }


def save_mine(path, model):
    nn.save_checkpoint(path, {"stats_net": model.stats_net}, {"kind": "mine", **model.meta()})


def load_mine(path):
    nets, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "mine":
        raise ValueError(f"{path} is not a MINE checkpoint")
    meta = {k: v for k, v in meta.items() if k != "kind"}
    return MineModel(nets["stats_net"], **meta)


def _pair_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and not isinstance(batch[0], MiSamplePair):
        cur, anc = (np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in batch)
    else:
        batch = list(batch)
        cur = np.array([p.v_current for p in batch], dtype=np.float64)
        anc = np.array([p.v_anchor for p in batch], dtype=np.float64)
    if cur.shape != anc.shape or cur.ndim != 2 or cur.shape[1] != 3:
        raise nn.ShapeError(f"velocity pairs must be (N, 3) each, got {cur.shape} and {anc.shape}")
    return cur, anc


def _inputs(model, cur, anc):
    return np.concatenate([cur, anc], axis=1) / model.input_scale


def mine_scores(model, v_current, v_anchor):
    """Vectorised statistics-network output for (N, 3) velocity arrays."""
    cur = np.atleast_2d(np.asarray(v_current, dtype=np.float64))
    anc = np.atleast_2d(np.asarray(v_anchor, dtype=np.float64))
    return model.stats_net.forward(_inputs(model, cur, anc))[:, 0]


def mine_score(model, pair):
    """The per-slot score m_i of a single (current, anchor) velocity pair."""
    cur, anc = _pair_arrays([pair] if isinstance(pair, MiSamplePair) else (pair[0], pair[1]))
    return float(mine_scores(model, cur, anc)[0])


def log_mean_exp(x):
    x = np.asarray(x, dtype=np.float64)
    shift = float(np.max(x))
    return shift + math.log(float(np.mean(np.exp(x - shift))))


def dv_from_scores(joint_scores, marginal_scores):
    joint_scores = np.asarray(joint_scores, dtype=np.float64)
    marginal_scores = np.asarray(marginal_scores, dtype=np.float64)
    if joint_scores.size == 0 or marginal_scores.size == 0:
        raise ValueError("DV estimate needs non-empty joint and marginal batches")
    return float(np.mean(joint_scores)) - log_mean_exp(marginal_scores)


def dv_estimate(model, joint_batch, marginal_batch):
    """mean T(joint) - log mean exp T(marginal)."""
    jc, ja = _pair_arrays(joint_batch)
    mc, ma = _pair_arrays(marginal_batch)
    if len(jc) == 0 or len(mc) == 0:
        raise ValueError("DV estimate needs non-empty joint and marginal batches")
    return dv_from_scores(mine_scores(model, jc, ja), mine_scores(model, mc, ma))


def moving_average_objective(joint_scores, marginal_scores, e_bar0):
    """Objective value and its derivatives w.r.t. the joint / marginal scores.

    ``e_bar0`` is treated as a constant.
    """
    n_j, n_m = len(joint_scores), len(marginal_scores)
    exp_m = np.exp(marginal_scores)
    e_bar = float(np.mean(exp_m))
    if not np.isfinite(e_bar) or e_bar <= 0.0:
        raise nn.DivergenceError(f"marginal exp-mean is {e_bar}")
    value = float(np.mean(joint_scores)) - e_bar / e_bar0 * math.log(e_bar)
    d_joint = np.full(n_j, 1.0 / n_j)
    d_marg = -(math.log(e_bar) + 1.0) / e_bar0 * exp_m / n_m
    return value, d_joint, d_marg


def mine_train_step(model, opt, joint_batch, marginal_batch):
    """Update e_bar0, then take one Adam step ascending the objective.

    Returns ``(model, opt, loss)`` where ``loss`` is the negated objective.
    """
    jc, ja = _pair_arrays(joint_batch)
    mc, ma = _pair_arrays(marginal_batch)
    if len(jc) < 2 or len(mc) < 2:
        raise ValueError("MINE batches need at least 2 pairs")
    X = np.concatenate([_inputs(model, jc, ja), _inputs(model, mc, ma)])
    out, cache = model.stats_net.forward_train(X)
    scores = out[:, 0]
    n = len(jc)
    e_bar = float(np.mean(np.exp(scores[n:])))
    if not np.isfinite(e_bar):
        raise nn.DivergenceError("exp(score) overflowed on the marginal batch")
    model.e_bar0 = model.gamma_ma * model.e_bar0 + (1.0 - model.gamma_ma) * e_bar
    value, d_joint, d_marg = moving_average_objective(scores[:n], scores[n:], model.e_bar0)
    d_out = -np.concatenate([d_joint, d_marg])[:, None]
    grads, _ = model.stats_net.backward(cache, d_out)
    opt.apply(grads)
    return model, opt, -value


@dataclass
class MineCorpus:
    """Joint pairs (v_i, v_t) and the pool marginal partners are drawn from."""

    v_current: np.ndarray
    v_anchor: np.ndarray
    pool: np.ndarray

    def __len__(self):
        return len(self.v_current)


@dataclass
class MineTrainConfig:
    batch_size: int = 1024
    gamma_ma: float = 0.99
    lr: float = 1e-3
    max_epochs: int = 200
    steps_per_epoch: int | None = None
    tol: float = 1e-4
    patience: int = 10
    # share of pairs held out to pick the stopping epoch; 0 stops on the training objective
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class MineHistory:
    objective: list = field(default_factory=list)
    dv: list = field(default_factory=list)
    e_bar0: list = field(default_factory=list)
    val_dv: list = field(default_factory=list)
    best_epoch: int = 0


def marginal_batch(corpus, idx, rng):
    partners = rng.integers(0, len(corpus.pool), size=len(idx))
    return corpus.v_current[idx], corpus.pool[partners]


def _split(corpus, fraction, rng):
    n_val = int(round(fraction * len(corpus)))
    if n_val < 2:
        return corpus, None
    perm = rng.permutation(len(corpus))
    val, fit = perm[:n_val], perm[n_val:]
    return MineCorpus(corpus.v_current[fit], corpus.v_anchor[fit], corpus.pool), (corpus.v_current[val], corpus.v_anchor[val])


def train_mine(corpus, config=MineTrainConfig(), model=None):
    """Unbiased MINE training loop; returns ``(model, history)``.

    A ``val_fraction`` share of the pairs is held out; training stops once the
    held-out DV estimate has not improved by ``tol`` for ``patience`` epochs
    (or after ``max_epochs``) and the best held-out parameters are kept. With
    ``val_fraction = 0`` the epoch-mean training objective is monitored instead.
    """
    if len(corpus) < config.batch_size or len(corpus.pool) < 2:
        raise ValueError(f"corpus of {len(corpus)} pairs is smaller than batch size {config.batch_size}")
    rng = np.random.default_rng(config.seed)
    if model is None:
        scale = float(np.std(np.concatenate([corpus.v_current, corpus.v_anchor]))) or 1.0
        model = MineModel.create(rng=rng, gamma_ma=config.gamma_ma, input_scale=scale)
    fit, val = _split(corpus, config.val_fraction, rng)
    if len(fit) < config.batch_size:
        fit, val = corpus, None
    val_seed = int(rng.integers(2**31))
    opt = nn.Optimizer(model.stats_net, lr=config.lr)
    steps = config.steps_per_epoch or max(1, len(fit) // config.batch_size)
    hist = MineHistory()
    best = -np.inf
    best_params = None
    for epoch in range(config.max_epochs):
        values, dvs = [], []
        for _ in range(steps):
            idx = rng.integers(0, len(fit), size=config.batch_size)
            joint = (fit.v_current[idx], fit.v_anchor[idx])
            _, _, loss = mine_train_step(model, opt, joint, marginal_batch(fit, idx, rng))
            values.append(-loss)
        idx = rng.integers(0, len(fit), size=config.batch_size)
        dvs.append(dv_estimate(model, (fit.v_current[idx], fit.v_anchor[idx]), marginal_batch(fit, idx, rng)))
        hist.objective.append(float(np.mean(values)))
        hist.dv.append(float(np.mean(dvs)))
        hist.e_bar0.append(model.e_bar0)
        if val is not None:
            hist.val_dv.append(estimate_mi(model, *val, rng=val_seed))
        monitored = hist.val_dv[-1] if val is not None else hist.objective[-1]
        log.info("MINE epoch %d: objective %.4f, DV %.4f nats, monitored %.4f", epoch, hist.objective[-1], hist.dv[-1], monitored)
        if monitored > best + config.tol:
            best, hist.best_epoch = monitored, epoch
            best_params = ([p.copy() for p in model.stats_net.params()], model.e_bar0)
        elif epoch - hist.best_epoch >= config.patience:
            break
    if val is not None and best_params is not None:
        model.stats_net.set_params(best_params[0])
        model.e_bar0 = best_params[1]
    scores = mine_scores(model, corpus.v_current, corpus.v_anchor)
    model.score_mean = float(np.mean(scores))
    model.score_std = float(np.std(scores)) or 1.0
    return model, hist


def estimate_mi(model, v_current, v_anchor, rng=None, n_shuffles=4):
    """Held-out DV estimate; marginal pairs come from shuffled anchors."""
    rng = np.random.default_rng(rng)
    joint = mine_scores(model, v_current, v_anchor)
    marg = np.concatenate([mine_scores(model, v_current, v_anchor[rng.permutation(len(v_anchor))]) for _ in range(n_shuffles)])
    return dv_from_scores(joint, marg)


def correlated_gaussian_pairs(n, rho, rng, dim=3):
    """Pairs with per-axis correlation ``rho`` and unit variances; MI = -dim/2 ln(1 - rho^2)."""
    x = rng.standard_normal((n, dim))
    z = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, dim))
    return x, z


def gaussian_mi(rho, dim=3):
    return -0.5 * dim * math.log(1.0 - rho * rho)


def corpus_from_pairs(v_current, v_anchor):
    return MineCorpus(np.asarray(v_current, float), np.asarray(v_anchor, float), np.asarray(v_anchor, float))


def build_corpus(trajectories, rng, psnr_choices=(8, 10, 12, 14, 16, 18, 20, 22, 24), p_transmit=0.4, bounds=DEFAULT_BOUNDS):
    """Sensed-velocity pairs from trajectories under a random transmission pattern.

    Each trajectory gets a PSNR drawn from ``psnr_choices`` (``None`` = clean).
    The anchor of slot i is the velocity at the last slot before i that was
    transmitted; the marginal pool holds all transmitted velocities.
    """
    cur_all, anc_all, pool = [], [], []
    for traj in trajectories:
        samples = np.asarray(getattr(traj, "samples", traj), dtype=np.float64)
        psnr = psnr_choices[rng.integers(len(psnr_choices))] if psnr_choices else None
        noise = NoiseConfig() if psnr is None else NoiseConfig.from_sigma2(psnr_to_sigma2(psnr, bounds))
        sensed = samples + rng.normal(0.0, math.sqrt(noise.sigma_s2), size=samples.shape)
        vel = np.diff(sensed, axis=0, prepend=sensed[:1])
        sent = rng.random(len(vel)) < p_transmit
        sent[0] = True
        last = np.maximum.accumulate(np.where(sent, np.arange(len(vel)), 0))
        # anchor for slot i is the last transmission strictly before i
        anchor_idx = np.concatenate([[0], last[:-1]])
        cur_all.append(vel[1:])
        anc_all.append(vel[anchor_idx[1:]])
        pool.append(vel[sent])
    return MineCorpus(np.concatenate(cur_all), np.concatenate(anc_all), np.concatenate(pool))

"""Closed-loop rollouts and joint training of the two agents.

Episodes are simulated in lockstep batches: every environment in a batch
advances one slot at a time, so the networks are evaluated once per slot for
the whole batch. Each environment draws all of its randomness from its own
seed, so an episode's outcome does not depend on which batch it ran in.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semctl import agents as ag
from semctl import nn
from semctl.env import (
    DEFAULT_BOUNDS,
    NoiseConfig,
    TrajectoryConfig,
    control_command,
    generate_trajectory,
    map_touch_to_panda,
    plant_step,
    psnr_to_sigma2,
)
from semctl.mine import mine_scores
from semctl.sfr import RxHistory, predict_next_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = 0.99
    rho: float = 0.005
    eps_decay: float = 7e-4
    eps_min: float = 0.05
    eps_start: float = 1.0
    expl_var: float = 0.2
    expl_decay: float = 0.999
    policy_var: float = 0.2
    noise_clip: float = 0.1
    k_max: float = 30.0
    T: int = 80
    M: int = 20
    policy_delay: int = 3
    n_updates: int = 20
    p_a: float = 0.4
    batch_size: int = 1024
    buffer_size: int = 1_000_000
    episode_len: int = 2400
    episodes: int = 2000
    psnr_min: float = 8.0
    psnr_max: float = 24.0
    psnr_step: float = 2.0
    delta_l: float = 5.0
    delta_u: float = 20.0
    # rewards are multiplied by this before entering the TD targets
    reward_scale: float = 1.0
    lr: float = 1e-3
    max_grad_norm: float = 10.0
    n_envs: int = 32
    seed: int = 0
    eval_every: int = 0
    eval_episodes: int = 8
    eval_psnr: float = 20.0

    def __post_init__(self):
        positive = ("gamma", "rho", "eps_decay", "eps_min", "k_max", "T", "M", "policy_delay", "n_updates",
                    "p_a", "batch_size", "buffer_size", "episode_len", "episodes", "n_envs", "lr", "reward_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.eps_min < 1.0:
            raise ValueError("eps_min must be below 1")
        if not self.psnr_min <= self.psnr_max:
            raise ValueError("psnr_min must not exceed psnr_max")
        if self.episode_len <= self.T:
            raise ValueError("episode_len must exceed the warm-up length T")
        ag.RewardParams(self.delta_l, self.delta_u)

    @property
    def psnr_choices(self):
        n = int(math.floor((self.psnr_max - self.psnr_min) / self.psnr_step + 1e-9)) + 1
        return self.psnr_min + self.psnr_step * np.arange(n)

    @property
    def reward(self):
        return ag.RewardParams(self.delta_l, self.delta_u)

    def epsilon(self, episode):
        return max(self.eps_start - self.eps_decay * episode, self.eps_min)

    def exploration_var(self, episode):
        return self.expl_var * self.expl_decay ** episode


def _coerce(text, kind):
    kind = kind if isinstance(kind, type) else {"float": float, "int": int, "str": str, "bool": bool}[kind]
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(float(text)) if float(text).is_integer() else int(text)
    return kind(text)


def parse_config_text(text, base=None):
    """Read ``key = value`` lines (``#`` starts a comment) into a TrainConfig."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = dataclasses.asdict(base or TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown setting {key!r}")
        try:
            values[key] = _coerce(val, types[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    return TrainConfig(**values)


def load_config(path):
    return parse_config_text(Path(path).read_text())


def format_config(config):
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(config).items())


# --- agents ----------------------------------------------------------------------------------


@dataclass
class AgentBundle:
    q: ag.DuelingQNet
    actor: nn.Mlp
    critic1: nn.Mlp
    critic2: nn.Mlp
    normalizer: ag.StateNormalizer
    reward: ag.RewardParams
    k_max: float = 30.0
    targets: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config, normalizer, rng):
        b = cls(
            ag.DuelingQNet(rng=rng),
            nn.Mlp.preset("actor", rng=rng),
            nn.Mlp.preset("critic", rng=rng),
            nn.Mlp.preset("critic", rng=rng),
            normalizer,
            config.reward,
            config.k_max,
        )
        b.targets = {name: nn.clone(getattr(b, name)) for name in b.ONLINE}
        return b

    ONLINE = ("q", "actor", "critic1", "critic2")

    def networks(self):
        nets = {name: getattr(self, name) for name in self.ONLINE}
        nets.update({f"{name}_target": net for name, net in self.targets.items()})
        return nets


def save_bundle(path, bundle, config=None):
    meta = {
        "kind": "agents",
        "normalizer": dataclasses.asdict(bundle.normalizer),
        "reward": dataclasses.asdict(bundle.reward),
        "k_max": bundle.k_max,
        "config": dataclasses.asdict(config) if config is not None else None,
    }
    nn.save_checkpoint(path, bundle.networks(), meta)


def load_bundle(path):
    nets, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "agents":
        raise ValueError(f"{path} is not an agent bundle")
    b = AgentBundle(
        nets["q"], nets["actor"], nets["critic1"], nets["critic2"],
        ag.StateNormalizer(**meta["normalizer"]), ag.RewardParams(**meta["reward"]), meta["k_max"],
    )
    b.targets = {name: nets.get(f"{name}_target", nn.clone(nets[name])) for name in b.ONLINE}
    config = TrainConfig(**meta["config"]) if meta.get("config") else None
    return b, config


# --- rollouts --------------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutPolicy:
    """How the transmitter decides and how the gain is chosen.

    ``transmit`` is ``always``, ``periodic`` (every ``period`` slots) or
    ``learned``; ``gain`` is ``fixed`` or ``learned``. Learned transmission
    forces ``a = 1`` for the first ``T`` slots when ``warmup`` is set.
    """

    transmit: str = "learned"
    gain: str = "learned"
    use_sfr: bool = True
    period: int = 1
    fixed_gain: float = 30.0
    warmup: bool = True

    def __post_init__(self):
        if self.transmit not in ("always", "periodic", "learned"):
            raise ValueError(f"unknown transmit mode {self.transmit!r}")
        if self.gain not in ("fixed", "learned"):
            raise ValueError(f"unknown gain mode {self.gain!r}")
        if self.transmit == "periodic" and self.period < 1:
            raise ValueError("period must be >= 1")

    @property
    def needs_agents(self):
        return self.transmit == "learned" or self.gain == "learned"


PROPOSED = RolloutPolicy()


@dataclass
class EpisodeTrace:
    """Summary of one episode plus, optionally, its per-slot records."""

    psnr_db: float
    S_e: float
    duty_cycle: float
    total_reward: float
    seed: int = 0
    x: np.ndarray | None = None
    x_hat: np.ndarray | None = None
    a: np.ndarray | None = None
    x_tilde: np.ndarray | None = None
    K: np.ndarray | None = None
    x_bar: np.ndarray | None = None
    r: np.ndarray | None = None
    v: np.ndarray | None = None
    e: np.ndarray | None = None

    @property
    def done(self):
        d = np.zeros(len(self.a), dtype=np.int64)
        d[-1] = 1
        return d


@dataclass
class EnvSpec:
    """One episode to simulate: a sensor-space trajectory, its PSNR and noise seed."""

    trajectory: np.ndarray
    psnr_db: float | None
    seed: int


def episode_spec(base_seed, index, config, traj_config=None, psnr_db=None):
    """Deterministic episode ``index``: trajectory, PSNR draw and noise seed."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    traj_seq, noise_seq, psnr_seq = ss.spawn(3)
    tc = traj_config or TrajectoryConfig()
    traj = generate_trajectory(tc, np.random.default_rng(traj_seq), n_slots=config.episode_len).samples
    if psnr_db is None:
        choices = config.psnr_choices
        psnr_db = float(choices[np.random.default_rng(psnr_seq).integers(len(choices))])
    return EnvSpec(traj, psnr_db, int(noise_seq.generate_state(1)[0]))


@dataclass
class Rollout:
    traces: list
    transitions: dict | None = None


def rollout(
    specs,
    policy,
    config,
    bundle=None,
    mine_model=None,
    sfr_model=None,
    eps=0.0,
    expl_var=0.0,
    record=False,
    collect=False,
    bounds=DEFAULT_BOUNDS,
):
    """Simulate a batch of episodes in lockstep.

    ``eps`` and ``expl_var`` may be scalars or one value per episode. With
    ``collect`` the transitions are returned flattened, ready for the replay
    buffer; with ``record`` every trace carries its per-slot arrays.
    """
    E = len(specs)
    L = min(len(s.trajectory) for s in specs)
    T = config.T
    if policy.needs_agents and bundle is None:
        raise ValueError("this policy needs trained agents")
    if policy.transmit == "learned" and mine_model is None:
        raise ValueError("learned transmission needs a MINE model")
    if policy.use_sfr and policy.transmit != "always" and sfr_model is None:
        raise ValueError("prediction at the receiver needs an SFR model")
    if sfr_model is not None and sfr_model.T != T:
        raise ValueError(f"SFR window {sfr_model.T} differs from config T={T}")
    norm = bundle.normalizer if bundle is not None else ag.StateNormalizer()
    reward = bundle.reward if bundle is not None else config.reward
    k_max = bundle.k_max if bundle is not None else config.k_max
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (E,))
    expl_std = np.sqrt(np.broadcast_to(np.asarray(expl_var, dtype=np.float64), (E,)))

    X = np.stack([s.trajectory[:L] for s in specs])  # (E, L, 3) sensor space
    sigma2 = np.array([0.0 if s.psnr_db is None else psnr_to_sigma2(s.psnr_db, bounds) for s in specs])
    noise = [NoiseConfig.from_sigma2(s2) for s2 in sigma2]
    sd_s = np.array([math.sqrt(n.sigma_s2) for n in noise])[:, None]
    sd_c = np.array([math.sqrt(n.sigma_c2) for n in noise])[:, None]
    draws = []
    for s in specs:
        g = np.random.default_rng(s.seed)
        draws.append((g.standard_normal((L, 3)), g.standard_normal((L, 3)), g.random(L), g.random(L), g.standard_normal(L)))
    n_sense, n_chan, u_explore, u_coin, n_actor = (np.stack(d) for d in zip(*draws))

    x_hat = X + n_sense * sd_s[:, :, None]
    x_hat_b = map_touch_to_panda(x_hat, bounds)
    x_r_b = map_touch_to_panda(x_hat + n_chan * sd_c[:, :, None], bounds)
    vel = np.zeros_like(x_hat)
    vel[:, 1:] = x_hat[:, 1:] - x_hat[:, :-1]

    a_all = np.zeros((E, L), dtype=np.int64)
    k_all = np.zeros((E, L))
    e_all = np.zeros((E, L))
    tx_all = np.zeros((E, L, ag.TX_DIM)) if collect else None
    rx_all = np.zeros((E, L, ag.RX_DIM)) if collect else None
    x_tilde_all = np.zeros((E, L, 3)) if record else None
    x_bar_all = np.zeros((E, L, 3)) if record else None

    x_bar = map_touch_to_panda(X[:, 0], bounds)
    x_tilde = x_bar.copy()
    history = RxHistory(T, n_env=E)
    tau_hat = np.zeros(E)
    anchor = np.zeros((E, 3))
    rows = np.arange(E)

    for i in range(L):
        # transmitter
        if policy.transmit == "learned":
            m = mine_scores(mine_model, vel[:, i], anchor)
            s_tx = norm.tx(m, tau_hat, sigma2)
            if policy.warmup and i <= T:
                a = np.ones(E, dtype=np.int64)
            else:
                greedy = ag.greedy_from_q(bundle.q.forward(s_tx))
                coin = (u_coin[:, i] < config.p_a).astype(np.int64)
                a = np.where(u_explore[:, i] < eps, coin, greedy)
            if collect:
                tx_all[:, i] = s_tx
        elif policy.transmit == "periodic":
            a = np.full(E, int(i % policy.period == 0), dtype=np.int64)
        else:
            a = np.ones(E, dtype=np.int64)

        # receiver
        sent = a == 1
        x_tilde = np.where(sent[:, None], x_r_b[:, i], x_tilde)
        if policy.use_sfr and history.full and not sent.all():
            idle = rows[~sent]
            x_tilde[idle] = predict_next_batch(sfr_model, history.window()[idle])
        history.push(x_tilde)

        # gain agent and plant
        dx = x_bar - x_tilde
        if policy.gain == "learned":
            s_rx = norm.rx(dx, a, sigma2)
            mu = bundle.actor.forward(s_rx)[:, 0]
            k = np.clip(mu + expl_std * n_actor[:, i], -1.0, 1.0)
            if collect:
                rx_all[:, i] = s_rx
        else:
            k = np.full(E, ag.action_from_gain(policy.fixed_gain, k_max))
        K = ag.gain_from_action(k, k_max)
        x_bar = plant_step(x_bar, control_command(K, x_bar, x_tilde))
        e_all[:, i] = np.linalg.norm(x_bar - x_hat_b[:, i], axis=1)

        a_all[:, i] = a
        k_all[:, i] = k
        if record:
            x_tilde_all[:, i] = x_tilde
            x_bar_all[:, i] = x_bar
        tau_hat = ag.update_idle_time(tau_hat, a)
        anchor = np.where(sent[:, None], vel[:, i], anchor)

    v_all = ag.huber(e_all, reward)
    r_all = ag.hybrid_reward(v_all, a_all, reward)
    traces = []
    for j, s in enumerate(specs):
        tr = EpisodeTrace(
            psnr_db=s.psnr_db, S_e=float(e_all[j].mean()), duty_cycle=float(a_all[j].mean()),
            total_reward=float(r_all[j].sum()), seed=s.seed,
        )
        if record:
            tr.x, tr.x_hat, tr.a = X[j], x_hat[j], a_all[j]
            tr.x_tilde, tr.x_bar = x_tilde_all[j], x_bar_all[j]
            tr.K = ag.gain_from_action(k_all[j], k_max)
            tr.r, tr.v, tr.e = r_all[j], v_all[j], e_all[j]
        traces.append(tr)

    transitions = None
    if collect:
        done = np.zeros((E, L))
        done[:, -1] = 1.0

        def shifted(arr):
            out = np.empty_like(arr)
            out[:, :-1] = arr[:, 1:]
            out[:, -1] = arr[:, -1]
            return out

        transitions = {
            "tx": tx_all, "rx": rx_all, "a": a_all.astype(np.float64), "k": k_all, "r": r_all, "v": v_all,
            "tx_next": shifted(tx_all), "rx_next": shifted(rx_all), "done": done,
        }
        transitions = {name: arr.reshape(E * L, *arr.shape[2:]) for name, arr in transitions.items()}
    return Rollout(traces, transitions)


def run_episode(spec, bundle, mine_model, sfr_model, config, policy=PROPOSED, eps=0.0, expl_var=0.0, collect=False):
    """One fully recorded episode; returns ``(trace, transitions)``."""
    out = rollout([spec], policy, config, bundle, mine_model, sfr_model, eps, expl_var, record=True, collect=collect)
    return out.traces[0], out.transitions


# --- updates ---------------------------------------------------------------------------------


@dataclass
class Learner:
    """Agents plus their optimizers."""

    bundle: AgentBundle
    config: TrainConfig
    opts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.opts:
            self.opts = {
                name: nn.Optimizer(getattr(self.bundle, name), lr=self.config.lr, max_grad_norm=self.config.max_grad_norm)
                for name in AgentBundle.ONLINE
            }


def train_step_batch(learner, replay, step_index, rng):
    """One Q and twin-critic update; actor and soft target updates every ``policy_delay`` steps."""
    cfg, b = learner.config, learner.bundle
    if len(replay) < cfg.batch_size:
        raise ValueError(f"replay holds {len(replay)} transitions, need {cfg.batch_size}")
    batch = replay.sample(cfg.batch_size, rng)
    scale = cfg.reward_scale
    losses = {}

    Y = ag.q_learning_target(b.q, b.targets["q"], scale * batch["r"], batch["tx_next"], batch["done"], cfg.gamma)
    losses["q"], grads = ag.dqn_loss(b.q, Y, batch["tx"], batch["a"])
    learner.opts["q"].apply(grads)

    y = ag.td3_target(
        b.targets["actor"], b.targets["critic1"], b.targets["critic2"], scale * batch["v"], batch["rx_next"],
        batch["done"], cfg.gamma, cfg.policy_var, cfg.noise_clip, rng,
    )
    for name in ("critic1", "critic2"):
        losses[name], grads = ag.critic_loss(getattr(b, name), batch["rx"], batch["k"], y)
        learner.opts[name].apply(grads)

    if step_index % cfg.policy_delay == 0:
        losses["actor"], grads = ag.actor_loss(b.actor, b.critic1, batch["rx"])
        learner.opts["actor"].apply(grads)
        for name in AgentBundle.ONLINE:
            nn.soft_update(b.targets[name], getattr(b, name), cfg.rho)
    return losses


# --- training loop ---------------------------------------------------------------------------

LOG_FIELDS = ("episode", "reward", "S_e", "duty_cycle", "eps", "loss_q", "loss_c1", "loss_c2", "loss_actor")


@dataclass
class TrainResult:
    bundle: AgentBundle
    log: list


def _nanmean(values):
    return float(np.mean(values)) if values else float("nan")


def train(config, mine_model, sfr_model, log_path=None, traj_config=None, progress=None):
    """Run ``config.episodes`` episodes of joint training.

    Per-episode rows go to ``log_path`` (CSV) as soon as each batch finishes.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    normalizer = ag.StateNormalizer(m_mean=mine_model.score_mean, m_std=mine_model.score_std)
    bundle = AgentBundle.create(config, normalizer, rng)
    learner = Learner(bundle, config)
    replay = ag.ReplayBuffer(config.buffer_size)
    rows = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    try:
        for start in range(0, config.episodes, config.n_envs):
            t0 = time.time()
            idx = list(range(start, min(start + config.n_envs, config.episodes)))
            specs = [episode_spec(config.seed, n, config, traj_config) for n in idx]
            eps = [config.epsilon(n) for n in idx]
            out = rollout(
                specs, PROPOSED, config, bundle, mine_model, sfr_model,
                eps=eps, expl_var=[config.exploration_var(n) for n in idx], collect=True,
            )
            replay.push(**out.transitions)
            t_roll = time.time() - t0
            for n, tr, e in zip(idx, out.traces, eps):
                losses = {"q": [], "critic1": [], "critic2": [], "actor": []}
                if len(replay) >= config.batch_size:
                    for j in range(1, config.n_updates + 1):
                        try:
                            step = train_step_batch(learner, replay, j, rng)
                        except nn.DivergenceError as exc:
                            raise nn.DivergenceError(f"episode {n}, update {j}: {exc}") from exc
                        for key, val in step.items():
                            losses[key].append(val)
                row = (n, tr.total_reward, tr.S_e, tr.duty_cycle, e, _nanmean(losses["q"]),
                       _nanmean(losses["critic1"]), _nanmean(losses["critic2"]), _nanmean(losses["actor"]))
                rows.append(dict(zip(LOG_FIELDS, row)))
                if writer:
                    writer.writerow(row)
            if fh:
                fh.flush()
            log.info("episodes %d-%d: rollout %.1fs, total %.1fs, mean DC %.3f, mean S_e %.1f",
                     idx[0], idx[-1], t_roll, time.time() - t0,
                     np.mean([t.duty_cycle for t in out.traces]), np.mean([t.S_e for t in out.traces]))
            if progress:
                progress(idx[-1] + 1, bundle)
            if config.eval_every and (idx[-1] + 1) // config.eval_every > idx[0] // config.eval_every:
                ev = evaluate(bundle, mine_model, sfr_model, config, PROPOSED, config.eval_psnr, config.eval_episodes)
                log.info("eval after %d episodes at %.0f dB: S_e %.2f mm, DC %.3f",
                         idx[-1] + 1, config.eval_psnr, ev[0], ev[1])
    finally:
        if fh:
            fh.close()
    return TrainResult(bundle, rows)


def evaluate(bundle, mine_model, sfr_model, config, policy, psnr_db, n_episodes, seed=12345, traj_config=None):
    """Greedy evaluation; returns mean ``(S_e, duty_cycle)`` over ``n_episodes``."""
    specs = [episode_spec(seed, n, config, traj_config, psnr_db=psnr_db) for n in range(n_episodes)]
    traces = []
    for k in range(0, n_episodes, config.n_envs):
        traces += rollout(specs[k:k + config.n_envs], policy, config, bundle, mine_model, sfr_model).traces
    return float(np.mean([t.S_e for t in traces])), float(np.mean([t.duty_cycle for t in traces]))


def read_log(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_summary(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")

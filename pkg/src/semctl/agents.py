"""The transmission agent (dueling double DQN) and the gain agent (TD3).

The transmission agent sees the Tx state ``(m_i, tau_hat, sigma2)`` and picks
``a_i`` in {0, 1}; the gain agent sees the Rx state ``(delta_x, a_i, sigma2)``
and outputs ``k_i`` in [-1, 1], mapped linearly to a gain in [0, K_max].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semctl import nn
from semctl.env import DEFAULT_BOUNDS, sigma2_to_psnr

# --- rewards ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardParams:
    delta_l: float = 5.0
    delta_u: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.delta_l < self.delta_u:
            raise ValueError(f"need 0 < delta_l < delta_u, got {self.delta_l}, {self.delta_u}")

    @property
    def c1(self):
        return 0.5 * self.delta_l ** 2

    @property
    def c2(self):
        return (self.delta_u - 0.5 * self.delta_l) / (self.delta_u - self.delta_l)


def huber(e, params):
    """Quadratic below delta_l, linear above."""
    e = np.asarray(e, dtype=np.float64)
    dl = params.delta_l
    return np.where(e < dl, 0.5 * e * e, dl * e - 0.5 * dl * dl)


def hybrid_reward(v, a, params):
    """-v when transmitting, c2 (c1 - v) when silent."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(np.asarray(a) == 1, -v, params.c2 * (params.c1 - v))


# --- state assembly --------------------------------------------------------------------------


@dataclass(frozen=True)
class StateNormalizer:
    """Brings agent inputs to unit scale."""

    m_mean: float = 0.0
    m_std: float = 1.0
    tau_scale: float = 120.0
    psnr_scale: float = 30.0
    dx_scale: float = 400.0

    def psnr_feature(self, sigma2):
        return sigma2_to_psnr(sigma2, DEFAULT_BOUNDS) / self.psnr_scale

    def tx(self, m, tau_hat, sigma2):
        """(..., 3) Tx state from MINE score, idle time (slots) and sigma^2."""
        m, tau_hat, sigma2 = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (m, tau_hat, sigma2)))
        return np.stack([(m - self.m_mean) / self.m_std, tau_hat / self.tau_scale, self.psnr_feature(sigma2)], axis=-1)

    def rx(self, delta_x, a, sigma2):
        """(..., 5) Rx state from x_bar - x_tilde, the decision and sigma^2."""
        delta_x = np.asarray(delta_x, dtype=np.float64)
        lead = delta_x.shape[:-1]
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), lead)
        p = np.broadcast_to(self.psnr_feature(sigma2), lead)
        return np.concatenate([delta_x / self.dx_scale, a[..., None], p[..., None]], axis=-1)


def update_idle_time(tau_hat, a, tau_slot=1.0):
    return np.where(np.asarray(a) == 1, 0.0, np.asarray(tau_hat, dtype=np.float64) + tau_slot)


# --- transmission agent ----------------------------------------------------------------------


@nn.register
class DuelingQNet:
    """Shared ReLU trunk with a value head and a two-way advantage head."""

    def __init__(self, input_size=3, hidden=(64, 128, 128, 64), n_actions=2, rng=None, zero=False):
        rng = nn._rng(rng)
        self.input_size, self.hidden, self.n_actions = int(input_size), tuple(hidden), int(n_actions)
        self.trunk = nn.Mlp((self.input_size, *self.hidden), output_activation="relu", rng=rng, zero=zero)
        self.value = nn.Mlp((self.hidden[-1], 1), rng=rng, zero=zero)
        self.advantage = nn.Mlp((self.hidden[-1], self.n_actions), rng=rng, zero=zero)

    def config(self):
        return {"input_size": self.input_size, "hidden": list(self.hidden), "n_actions": self.n_actions}

    def _parts(self):
        return (self.trunk, self.value, self.advantage)

    def params(self):
        return [p for part in self._parts() for p in part.params()]

    def set_params(self, params):
        params = list(params)
        k = 0
        for part in self._parts():
            n = len(part.params())
            part.set_params(params[k:k + n])
            k += n
        if k != len(params):
            raise nn.ShapeError("parameter count mismatch")

    def heads(self, s):
        z = self.trunk.forward(np.atleast_2d(s))
        return self.value.forward(z), self.advantage.forward(z)

    def forward(self, s):
        s = np.asarray(s, dtype=np.float64)
        V, A = self.heads(s)
        Q = V + A - A.mean(axis=1, keepdims=True)
        return Q[0] if s.ndim == 1 else Q

    __call__ = forward

    def forward_train(self, s):
        z, c_t = self.trunk.forward_train(np.atleast_2d(s))
        V, c_v = self.value.forward_train(z)
        A, c_a = self.advantage.forward_train(z)
        return V + A - A.mean(axis=1, keepdims=True), (c_t, c_v, c_a)

    def backward(self, cache, d_q):
        c_t, c_v, c_a = cache
        g_v, dz_v = self.value.backward(c_v, d_q.sum(axis=1, keepdims=True))
        g_a, dz_a = self.advantage.backward(c_a, d_q - d_q.mean(axis=1, keepdims=True))
        g_t, ds = self.trunk.backward(c_t, dz_v + dz_a)
        return g_t + g_v + g_a, ds


def dueling_q_values(net, s):
    """``(Q(s, 0), Q(s, 1))``; scalars for one state, arrays for a batch."""
    Q = net.forward(s)
    return Q[..., 0], Q[..., 1]


def greedy_from_q(Q):
    """Argmax over two actions with ties resolved to silence."""
    return (Q[..., 1] > Q[..., 0]).astype(np.int64)


def select_transmission(net, s):
    a = greedy_from_q(net.forward(s))
    return int(a) if np.ndim(a) == 0 else a


def q_learning_target(online, target, r, s_next, done, gamma):
    """Double-Q target: the online net picks a*, the target net scores it."""
    s_next = np.atleast_2d(s_next)
    a_star = greedy_from_q(online.forward(s_next))
    q_next = np.take_along_axis(target.forward(s_next), a_star[:, None], axis=1)[:, 0]
    return np.asarray(r, dtype=np.float64) + gamma * (1.0 - np.asarray(done, dtype=np.float64)) * q_next


def dqn_loss(net, Y, s, a):
    """Mean squared TD error and its parameter gradients."""
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    Q, cache = net.forward_train(s)
    rows = np.arange(len(a))
    resid = Q[rows, a] - Y
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise nn.DivergenceError(f"DQN loss is {loss}")
    d_q = np.zeros_like(Q)
    d_q[rows, a] = 2.0 * resid / len(a)
    grads, _ = net.backward(cache, d_q)
    return loss, grads


def epsilon_greedy_decision(eps, p_a, policy_action, rng):
    """With probability eps a Bernoulli(p_a) draw, otherwise the policy action."""
    policy_action = np.asarray(policy_action)
    explore = rng.random(policy_action.shape) < eps
    coin = (rng.random(policy_action.shape) < p_a).astype(np.int64)
    out = np.where(explore, coin, policy_action).astype(np.int64)
    return int(out) if out.ndim == 0 else out


# --- gain agent ------------------------------------------------------------------------------


def actor_action(actor, s, exploration_sigma2, rng):
    """clip(mu(s) + N(0, sigma2), -1, 1)."""
    mu = actor.forward(s)[..., 0]
    if exploration_sigma2 > 0.0:
        mu = mu + rng.normal(0.0, np.sqrt(exploration_sigma2), size=np.shape(mu))
    return np.clip(mu, -1.0, 1.0)


def gain_from_action(mu_value, k_max=30.0):
    mu_value = np.asarray(mu_value, dtype=np.float64)
    if np.any(mu_value < -1.0) or np.any(mu_value > 1.0) or not np.all(np.isfinite(mu_value)):
        raise ValueError(f"gain action must lie in [-1, 1], got {mu_value}")
    K = 0.5 * k_max * (1.0 + mu_value)
    return float(K) if K.ndim == 0 else K


def action_from_gain(K, k_max=30.0):
    return 2.0 * np.asarray(K, dtype=np.float64) / k_max - 1.0


def critic_input(s, k):
    s = np.atleast_2d(s)
    return np.concatenate([s, np.reshape(k, (len(s), 1))], axis=1)


def td3_target(target_actor, target_c1, target_c2, v, s_next, done, gamma, policy_sigma2, noise_clip, rng):
    """-v + gamma (1 - d) min of the twin target critics at a smoothed next action."""
    s_next = np.atleast_2d(s_next)
    noise = np.clip(rng.normal(0.0, np.sqrt(policy_sigma2), size=len(s_next)), -noise_clip, noise_clip)
    k_next = np.clip(target_actor.forward(s_next)[:, 0] + noise, -1.0, 1.0)
    x = critic_input(s_next, k_next)
    q_min = np.minimum(target_c1.forward(x)[:, 0], target_c2.forward(x)[:, 0])
    return -np.asarray(v, dtype=np.float64) + gamma * (1.0 - np.asarray(done, dtype=np.float64)) * q_min


def critic_loss(critic, s, k, y):
    """Mean squared error of Q(s, k) against y, with gradients."""
    q, cache = critic.forward_train(critic_input(s, k))
    resid = q[:, 0] - np.asarray(y, dtype=np.float64).reshape(-1)
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise nn.DivergenceError(f"critic loss is {loss}")
    grads, _ = critic.backward(cache, (2.0 * resid / len(resid))[:, None])
    return loss, grads


def actor_loss(actor, critic, s):
    """-mean Q1(s, mu(s)); gradients for the actor only."""
    s = np.atleast_2d(s)
    mu, a_cache = actor.forward_train(s)
    q, c_cache = critic.forward_train(critic_input(s, mu[:, 0]))
    loss = -float(np.mean(q))
    if not np.isfinite(loss):
        raise nn.DivergenceError(f"actor loss is {loss}")
    _, dx = critic.backward(c_cache, np.full_like(q, -1.0 / len(q)))
    grads, _ = actor.backward(a_cache, dx[:, -1:])
    return loss, grads


# --- experience replay -----------------------------------------------------------------------

TX_DIM, RX_DIM = 3, 5


class ReplayBuffer:
    """Ring buffer of transitions stored column-wise."""

    FIELDS = {
        "tx": (TX_DIM,),
        "rx": (RX_DIM,),
        "a": (),
        "k": (),
        "r": (),
        "v": (),
        "tx_next": (TX_DIM,),
        "rx_next": (RX_DIM,),
        "done": (),
    }

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.data = {name: np.zeros((self.capacity, *shape)) for name, shape in self.FIELDS.items()}
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def push(self, **batch):
        """Append one transition, or a batch when fields carry a leading axis."""
        n = np.shape(batch["r"])[0] if np.ndim(batch["r"]) else 1
        if set(batch) != set(self.FIELDS):
            raise KeyError(f"transition fields must be {sorted(self.FIELDS)}")
        if n > self.capacity:
            batch = {k: np.asarray(v)[-self.capacity:] for k, v in batch.items()}
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        for name, shape in self.FIELDS.items():
            self.data[name][idx] = np.reshape(batch[name], (n, *shape))
        self._next = (self._next + n) % self.capacity
        self.size = min(self.capacity, self.size + n)

    def sample(self, n, rng):
        """``n`` transitions drawn uniformly with replacement."""
        if self.size < n:
            raise ValueError(f"replay holds {self.size} transitions, need {n}")
        idx = rng.integers(0, self.size, size=n)
        return {name: arr[idx] for name, arr in self.data.items()}

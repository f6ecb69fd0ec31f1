"""Receiver-side reconstructor: an LSTM encoder-decoder predicting the next state.

The model consumes a window of the last ``T`` receiver positions (robot space,
mm). Internally the encoder sees per-slot velocities divided by ``vel_scale``
and the head emits displacements relative to the last position divided by
``out_scale``. The decoder starts from the encoder's final state and is fed the
last encoder input at every one of its ``M`` steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from semctl import nn
from semctl.env import DEFAULT_BOUNDS, mapping_gain, psnr_to_sigma2

log = logging.getLogger(__name__)


class HistoryTooShortError(RuntimeError):
    """Prediction was requested before the receiver saw ``T`` states."""


@nn.register
class SfrModel:
    def __init__(self, T=80, M=20, hidden_size=64, num_layers=3, vel_scale=1.0, out_scale=1.0, rng=None, zero=False):
        if T < 1 or M < 1:
            raise ValueError(f"T and M must be >= 1, got T={T}, M={M}")
        if vel_scale <= 0 or out_scale <= 0:
            raise ValueError("scales must be positive")
        rng = nn._rng(rng)
        self.T, self.M = int(T), int(M)
        self.vel_scale, self.out_scale = float(vel_scale), float(out_scale)
        self.encoder = nn.LstmStack(3, hidden_size, num_layers, rng=rng, zero=zero)
        self.decoder = nn.LstmStack(3, hidden_size, num_layers, rng=rng, zero=zero)
        self.head = nn.Mlp((hidden_size, 3), rng=rng, zero=zero)

    def config(self):
        return {
            "T": self.T,
            "M": self.M,
            "hidden_size": self.encoder.hidden_size,
            "num_layers": self.encoder.num_layers,
            "vel_scale": self.vel_scale,
            "out_scale": self.out_scale,
        }

    def _parts(self):
        return (self.encoder, self.decoder, self.head)

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

    # Reverse-mode protocol over encoder features (B, T, 3) -> head outputs (B, M, 3).
    def forward_train(self, features):
        F = np.asarray(features, dtype=np.float64)
        B = F.shape[0]
        (_, enc_state), enc_cache = self.encoder.forward_train((F, None))
        dec_in = np.repeat(F[:, -1:, :], self.M, axis=1)
        (dec_out, _), dec_cache = self.decoder.forward_train((dec_in, enc_state))
        H = dec_out.shape[2]
        Y, head_cache = self.head.forward_train(dec_out.reshape(B * self.M, H))
        return Y.reshape(B, self.M, 3), (enc_cache, dec_cache, head_cache, F.shape)

    def backward(self, cache, d_out):
        enc_cache, dec_cache, head_cache, shape = cache
        B = shape[0]
        g_head, d_dec = self.head.backward(head_cache, np.asarray(d_out).reshape(B * self.M, 3))
        g_dec, (d_dec_in, d_state) = self.decoder.backward(dec_cache, (d_dec.reshape(B, self.M, -1), None))
        g_enc, (dF, _) = self.encoder.backward(enc_cache, (None, d_state))
        dF = dF.copy()
        dF[:, -1, :] += d_dec_in.sum(axis=1)
        return g_enc + g_dec + g_head, dF


def window_features(positions, vel_scale):
    """Scaled per-slot velocities of (..., T, 3) windows; the first is zero."""
    P = np.asarray(positions, dtype=np.float64)
    V = np.zeros_like(P)
    V[..., 1:, :] = P[..., 1:, :] - P[..., :-1, :]
    return V / vel_scale


def _check_window(model, sequence):
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape != (model.T, 3):
        raise nn.ShapeError(f"expected a ({model.T}, 3) window, got {seq.shape}")
    if not np.all(np.isfinite(seq)):
        raise ValueError("window contains non-finite values")
    return seq


def sfr_encode(model, sequence):
    """Final encoder state ``(h, c)``, each (num_layers, hidden) for one window."""
    F = window_features(_check_window(model, sequence), model.vel_scale)
    _, (h, c) = model.encoder.run(F[None])
    return h[:, 0], c[:, 0]


def sfr_decode(model, state, last_input, steps):
    """Decoder outputs (steps, 3) from ``state = (h, c)`` and the fixed input."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h, c = (np.asarray(s, dtype=np.float64)[:, None, :] for s in state)
    x = np.broadcast_to(np.asarray(last_input, dtype=np.float64).reshape(1, 1, 3), (1, steps, 3))
    out, _ = model.decoder.run(np.ascontiguousarray(x), (h, c))
    return model.head.forward(out[0])


def predict_next_batch(model, windows):
    """One-step predictions (B, 3) for (B, T, 3) position windows."""
    W = np.asarray(windows, dtype=np.float64)
    if W.ndim != 3 or W.shape[1:] != (model.T, 3):
        raise nn.ShapeError(f"expected (B, {model.T}, 3) windows, got {W.shape}")
    F = window_features(W, model.vel_scale)
    _, state = model.encoder.run(F)
    out, _ = model.decoder.run(np.ascontiguousarray(F[:, -1:, :]), state)
    return W[:, -1, :] + model.out_scale * model.head.forward(out[:, 0, :])


def predict_next(model, history):
    """First decoder output, mapped back to a position."""
    if not history.full:
        raise HistoryTooShortError(f"history holds {history.count} of {model.T} states")
    if history.batched:
        return predict_next_batch(model, history.window())
    return predict_next_batch(model, history.window()[None])[0]


class RxHistory:
    """Ring buffer of the last ``T`` receiver states.

    With ``n_env`` set, it tracks that many environments in lockstep and
    pushes/windows carry a leading environment axis.
    """

    def __init__(self, T, n_env=None):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.T = int(T)
        self.batched = n_env is not None
        self._buf = np.zeros((n_env or 1, self.T, 3))
        self._pos = 0
        self.count = 0

    @property
    def full(self):
        return self.count >= self.T

    def push(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._buf[:, self._pos] = x if self.batched else x[None]
        self._pos = (self._pos + 1) % self.T
        self.count += 1

    def window(self):
        """Oldest-first (T, 3) window, or (n_env, T, 3) when batched."""
        w = np.concatenate([self._buf[:, self._pos:], self._buf[:, :self._pos]], axis=1)
        return w if self.batched else w[0]


def sequence_mse(S_out, S_tar):
    """Mean of squared per-entry differences over the M target rows."""
    S_out = np.asarray(S_out, dtype=np.float64)
    S_tar = np.asarray(S_tar, dtype=np.float64)
    if S_out.shape != S_tar.shape:
        raise nn.ShapeError(f"{S_out.shape} vs {S_tar.shape}")
    return float(np.mean((S_out - S_tar) ** 2))


@dataclass
class SfrTrainConfig:
    T: int = 80
    M: int = 20
    hidden_size: int = 64
    num_layers: int = 3
    batch_size: int = 32
    n_steps: int = 3000
    lr: float = 1e-3
    lr_final: float = 1e-4
    # training noise level; None trains on clean windows
    noise_psnr_db: float | None = 15.0
    # closed-loop rounds: windows come from a simulated receiver that feeds the
    # model's own predictions back into its history
    cl_rounds: int = 0
    cl_steps: int = 500
    cl_envs: int = 64
    cl_slots: int = 240
    cl_p_range: tuple = (0.1, 0.6)
    cl_lr: float = 3e-4
    seed: int = 0
    log_every: int = 100


@dataclass
class SfrHistory:
    step: list = field(default_factory=list)
    loss_mm2: list = field(default_factory=list)


def noise_std_robot(psnr_db, bounds=DEFAULT_BOUNDS):
    """Per-axis robot-space std of the overall noise at ``psnr_db``."""
    return math.sqrt(psnr_to_sigma2(psnr_db, bounds)) * mapping_gain(bounds)


class WindowSampler:
    """Draws (input window, future targets) pairs from a list of trajectories."""

    def __init__(self, corpus, T, M, noise_std=None):
        self.series = [np.asarray(c, dtype=np.float64) for c in corpus]
        self.T, self.M = T, M
        lengths = np.array([len(s) - T - M + 1 for s in self.series])
        if lengths.size == 0 or lengths.max() < 1:
            raise ValueError(f"corpus needs a trajectory of at least T + M = {T + M} states")
        self.lengths = np.maximum(lengths, 0)
        self.weights = self.lengths / self.lengths.sum()
        self.noise_std = noise_std

    def segments(self, n, length, rng):
        """``n`` clean (length, 3) segments; trajectories shorter than ``length`` are skipped."""
        ok = np.array([len(s) >= length for s in self.series])
        if not ok.any():
            raise ValueError(f"no trajectory holds {length} states")
        room = np.where(ok, np.array([len(s) - length + 1 for s in self.series]), 0)
        which = rng.choice(len(self.series), size=n, p=room / room.sum())
        starts = (rng.random(n) * room[which]).astype(int)
        span = np.arange(length)
        return np.stack([self.series[k][s + span] for k, s in zip(which, starts)])

    def noisy(self, clean, rng):
        if self.noise_std is None:
            return clean.copy()
        return clean + rng.standard_normal(clean.shape) * self.noise_std

    def sample(self, n, rng):
        seg = self.segments(n, self.T + self.M, rng)
        return self.noisy(seg[:, :self.T], rng), seg[:, self.T:]


def closed_loop_windows(model, sampler, n_env, n_slots, p_range, rng):
    """Receiver histories produced with the model's predictions fed back.

    Each environment transmits (noisy) states for the first ``T`` slots, then
    with a per-environment probability drawn from ``p_range``; silent slots
    hold the model's prediction. Returns the windows seen before each
    decision and the clean ``M`` states that follow.
    """
    T, M = model.T, model.M
    clean = sampler.segments(n_env, T + n_slots + M, rng)
    received = sampler.noisy(clean, rng)
    p = rng.uniform(*p_range, size=n_env)
    hist = RxHistory(T, n_env=n_env)
    for i in range(T):
        hist.push(received[:, i])
    windows = np.empty((n_slots, n_env, T, 3))
    targets = np.empty((n_slots, n_env, M, 3))
    for j in range(n_slots):
        i = T + j
        windows[j] = hist.window()
        targets[j] = clean[:, i:i + M]
        sent = rng.random(n_env) < p
        x = predict_next_batch(model, windows[j])
        hist.push(np.where(sent[:, None], received[:, i], x))
    return windows.reshape(-1, T, 3), targets.reshape(-1, M, 3)


def _fit_batch(model, opt, inputs, targets):
    """One Adam step on the M-row squared error; returns the loss in mm^2."""
    F = window_features(inputs, model.vel_scale)
    Y_tar = (targets - inputs[:, -1:, :]) / model.out_scale
    Y, cache = model.forward_train(F)
    diff = Y - Y_tar
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise nn.DivergenceError(f"SFR loss became {loss}")
    grads, _ = model.backward(cache, 2.0 * diff / diff.size)
    opt.apply(grads)
    return loss * model.out_scale ** 2


def train_sfr(corpus, config=SfrTrainConfig(), bounds=DEFAULT_BOUNDS):
    """Fit the encoder-decoder on noisy input windows with clean targets.

    ``corpus`` is a list of (N, 3) robot-space position arrays. Returns
    ``(model, history)``; the reported loss is the mean squared error in mm^2
    over all M target rows. After ``n_steps`` open-loop steps, each of the
    ``cl_rounds`` closed-loop rounds regenerates receiver histories with the
    current model and trains on them (half of every batch) for ``cl_steps``.
    """
    rng = np.random.default_rng(config.seed)
    noise = None if config.noise_psnr_db is None else noise_std_robot(config.noise_psnr_db, bounds)
    sampler = WindowSampler(corpus, config.T, config.M, noise)
    probe_in, probe_tar = sampler.sample(2048, rng)
    vel_scale = float(np.std(np.diff(probe_in, axis=1))) or 1.0
    out_scale = float(np.std(probe_tar - probe_in[:, -1:, :])) or 1.0
    model = SfrModel(config.T, config.M, config.hidden_size, config.num_layers, vel_scale, out_scale, rng=rng)
    opt = nn.Optimizer(model, lr=config.lr, max_grad_norm=1.0)
    hist = SfrHistory()
    running = []
    step = 0

    def record(loss, last):
        running.append(loss)
        if step % config.log_every == 0 or last:
            hist.step.append(step)
            hist.loss_mm2.append(float(np.mean(running)))
            running.clear()
            log.info("SFR step %d: loss %.2f mm^2", step, hist.loss_mm2[-1])

    decay = (config.lr_final / config.lr) ** (1.0 / max(1, config.n_steps))
    for k in range(config.n_steps):
        step += 1
        record(_fit_batch(model, opt, *sampler.sample(config.batch_size, rng)), k == config.n_steps - 1)
        opt.state.lr *= decay

    total = config.cl_rounds * config.cl_steps
    if total:
        opt.state.lr = config.cl_lr
        decay = (config.lr_final / config.cl_lr) ** (1.0 / total)
    half = config.batch_size // 2
    for _ in range(config.cl_rounds):
        cl_in, cl_tar = closed_loop_windows(model, sampler, config.cl_envs, config.cl_slots, config.cl_p_range, rng)
        for k in range(config.cl_steps):
            step += 1
            pick = rng.integers(0, len(cl_in), size=config.batch_size - half)
            fresh_in, fresh_tar = sampler.sample(half, rng)
            inputs = np.concatenate([cl_in[pick], fresh_in])
            targets = np.concatenate([cl_tar[pick], fresh_tar])
            record(_fit_batch(model, opt, inputs, targets), k == config.cl_steps - 1)
            opt.state.lr *= decay
    return model, hist


def save_sfr(path, model, meta=None):
    nn.save_checkpoint(path, {"sfr": model}, {"kind": "sfr", **(meta or {})})


def load_sfr(path):
    nets, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "sfr":
        raise ValueError(f"{path} is not an SFR checkpoint")
    return nets["sfr"]


def one_step_rmse(model, trajectories, stride=1):
    """RMSE (mm) of one-step predictions from clean windows, and of zero-order hold."""
    errs, hold = [], []
    for traj in trajectories:
        traj = np.asarray(traj, dtype=np.float64)
        idx = np.arange(model.T, len(traj), stride)
        windows = np.stack([traj[i - model.T:i] for i in idx])
        pred = predict_next_batch(model, windows)
        errs.append(pred - traj[idx])
        hold.append(windows[:, -1] - traj[idx])
    e, h = np.concatenate(errs), np.concatenate(hold)
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1)))), float(np.sqrt(np.mean(np.sum(h * h, axis=1))))

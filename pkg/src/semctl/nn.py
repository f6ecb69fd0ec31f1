"""Dense network substrate: MLPs, LSTM stacks, reverse-mode gradients, Adam.

Every network follows one small protocol so that gradient checking, Adam,
soft target updates and checkpoints work on any of them:

* ``params()`` returns the parameter arrays in a fixed order,
* ``set_params(list)`` replaces them,
* ``forward_train(inputs) -> (out, cache)`` and
  ``backward(cache, d_out) -> (grads, d_inputs)`` implement reverse mode,
* ``config()`` returns the constructor kwargs needed to rebuild the shape.

All arrays are float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from semctl import _accel

CHECKPOINT_VERSION = 1

# Layer widths of the fully connected networks. The statistics network takes
# the concatenated (current, anchor) velocity pair, hence 6 inputs.
MLP_PRESETS = {
    "mine": (6, 64, 128, 128, 64, 1),
    "q_network": (3, 64, 128, 128, 64, 2),
    "actor": (5, 64, 128, 128, 64, 1),
    "critic": (6, 64, 128, 128, 64, 1),
}
LSTM_PRESET = {"input_size": 3, "hidden_size": 64, "num_layers": 3}


class ShapeError(ValueError):
    """Input dimensions do not match the network."""


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Mlp:
    """ReLU on hidden layers, ``output_activation`` on the last one."""

    def __init__(self, layer_sizes, output_activation="identity", rng=None, zero=False):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {layer_sizes}")
        if output_activation not in ("identity", "tanh", "relu"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.output_activation = output_activation
        rng = _rng(rng)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            if zero:
                self.weights.append(np.zeros((n_in, n_out)))
            else:
                self.weights.append(_uniform_init(rng, n_in, (n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    @classmethod
    def preset(cls, name, rng=None, **kwargs):
        if name == "actor":
            kwargs.setdefault("output_activation", "tanh")
        return cls(MLP_PRESETS[name], rng=rng, **kwargs)

    def config(self):
        return {"layer_sizes": list(self.layer_sizes), "output_activation": self.output_activation}

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, params):
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise ShapeError("parameter count mismatch")
        for k in range(len(self.weights)):
            W, b = params[2 * k], params[2 * k + 1]
            if W.shape != self.weights[k].shape or b.shape != self.biases[k].shape:
                raise ShapeError(f"layer {k}: got {W.shape}/{b.shape}")
            self.weights[k] = np.array(W, dtype=np.float64)
            self.biases[k] = np.array(b, dtype=np.float64)

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.layer_sizes[0]:
            raise ShapeError(f"expected input width {self.layer_sizes[0]}, got shape {x.shape}")
        return X, single

    def _out_act(self, z):
        if self.output_activation == "tanh":
            return np.tanh(z)
        if self.output_activation == "relu":
            return np.where(z > 0.0, z, 0.0)
        return z

    def forward(self, x):
        X, single = self._as_batch(x)
        n = len(self.weights)
        for k in range(n):
            X = X @ self.weights[k] + self.biases[k]
            if k < n - 1:
                X = np.where(X > 0.0, X, 0.0)
        X = self._out_act(X)
        return X[0] if single else X

    __call__ = forward

    def forward_train(self, x):
        X, single = self._as_batch(x)
        inputs, pre = [], []
        n = len(self.weights)
        for k in range(n):
            inputs.append(X)
            z = X @ self.weights[k] + self.biases[k]
            pre.append(z)
            X = np.where(z > 0.0, z, 0.0) if k < n - 1 else self._out_act(z)
        out = X[0] if single else X
        return out, (inputs, pre, X, single)

    def backward(self, cache, d_out):
        inputs, pre, out, single = cache
        d = np.asarray(d_out, dtype=np.float64)
        d = d[None, :] if single else d
        if self.output_activation == "tanh":
            d = d * (1.0 - out * out)
        elif self.output_activation == "relu":
            d = d * (pre[-1] > 0.0)
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = inputs[k].T @ d
            grads[2 * k + 1] = d.sum(axis=0)
            d = d @ self.weights[k].T
            if k > 0:
                # subgradient 0 at the kink
                d = d * (pre[k - 1] > 0.0)
        return grads, (d[0] if single else d)


class LstmCell:
    """One LSTM layer. ``W`` is (input+hidden, 4*hidden), gates i, f, g, o."""

    def __init__(self, input_size, hidden_size, rng=None, zero=False, forget_bias=1.0):
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        if self.input_size < 1 or self.hidden_size < 1:
            raise ValueError("sizes must be positive")
        H = self.hidden_size
        fan_in = self.input_size + H
        if zero:
            self.W = np.zeros((fan_in, 4 * H))
            self.b = np.zeros(4 * H)
        else:
            self.W = _uniform_init(_rng(rng), fan_in, (fan_in, 4 * H))
            self.b = np.zeros(4 * H)
            self.b[H:2 * H] = forget_bias

    def config(self):
        return {"input_size": self.input_size, "hidden_size": self.hidden_size}

    def params(self):
        return [self.W, self.b]

    def set_params(self, params):
        W, b = params
        if W.shape != self.W.shape or b.shape != self.b.shape:
            raise ShapeError("LSTM parameter shape mismatch")
        self.W = np.array(W, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)

    def _check(self, x, h, c):
        x, h, c = (np.asarray(a, dtype=np.float64) for a in (x, h, c))
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size or c.shape != h.shape:
            raise ShapeError(
                f"expected x[...,{self.input_size}], h/c[...,{self.hidden_size}]; "
                f"got {x.shape}, {h.shape}, {c.shape}"
            )
        return x, h, c

    def _gates(self, x, h):
        D, H = self.input_size, self.hidden_size
        z = x @ self.W[:D] + h @ self.W[D:] + self.b
        i = _accel.sigmoid(z[..., :H])
        f = _accel.sigmoid(z[..., H:2 * H])
        g = np.tanh(z[..., 2 * H:3 * H])
        o = _accel.sigmoid(z[..., 3 * H:])
        return i, f, g, o

    def step(self, x, h, c):
        x, h, c = self._check(x, h, c)
        i, f, g, o = self._gates(x, h)
        c_next = f * c + i * g
        return o * np.tanh(c_next), c_next

    def forward_train(self, inputs):
        x, h, c = self._check(*inputs)
        i, f, g, o = self._gates(x, h)
        c_next = f * c + i * g
        tc = np.tanh(c_next)
        return (o * tc, c_next), (x, h, c, i, f, g, o, tc)

    def backward(self, cache, d_out):
        x, h, c, i, f, g, o, tc = cache
        dh, dc_next = d_out
        dh = np.zeros_like(tc) if dh is None else dh
        dc = (np.zeros_like(tc) if dc_next is None else dc_next) + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1.0 - i), dc * c * f * (1.0 - f), dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)],
            axis=-1,
        )
        xh = np.concatenate([x, h], axis=-1)
        if xh.ndim == 1:
            dW = np.outer(xh, dz)
            db = dz
        else:
            dW = xh.T @ dz
            db = dz.sum(axis=0)
        dxh = dz @ self.W.T
        D = self.input_size
        return [dW, db], (dxh[..., :D], dxh[..., D:], dc * f)


class LstmStack:
    """Stacked LSTM layers run over (B, T, input) sequences.

    The state is a pair of (L, B, H) arrays. ``forward_train`` takes
    ``(x_seq, state)`` and returns ``(out_seq, state)``.
    """

    def __init__(self, input_size, hidden_size, num_layers, rng=None, zero=False):
        rng = _rng(rng)
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        self.num_layers = int(num_layers)
        self.cells = [
            LstmCell(self.input_size if k == 0 else self.hidden_size, self.hidden_size, rng=rng, zero=zero)
            for k in range(self.num_layers)
        ]

    def config(self):
        return {"input_size": self.input_size, "hidden_size": self.hidden_size, "num_layers": self.num_layers}

    def params(self):
        return [p for cell in self.cells for p in cell.params()]

    def set_params(self, params):
        params = list(params)
        if len(params) != 2 * self.num_layers:
            raise ShapeError("parameter count mismatch")
        for k, cell in enumerate(self.cells):
            cell.set_params(params[2 * k:2 * k + 2])

    def zero_state(self, batch):
        shape = (self.num_layers, batch, self.hidden_size)
        return np.zeros(shape), np.zeros(shape)

    def _check_seq(self, x_seq, state):
        x_seq = np.asarray(x_seq, dtype=np.float64)
        if x_seq.ndim != 3 or x_seq.shape[2] != self.input_size:
            raise ShapeError(f"expected (B, T, {self.input_size}) sequence, got {x_seq.shape}")
        if state is None:
            state = self.zero_state(x_seq.shape[0])
        h0, c0 = (np.asarray(s, dtype=np.float64) for s in state)
        expect = (self.num_layers, x_seq.shape[0], self.hidden_size)
        if h0.shape != expect or c0.shape != expect:
            raise ShapeError(f"state shape {h0.shape} != {expect}")
        return x_seq, h0, c0

    def _stacked(self):
        H = self.hidden_size
        W0, b0 = self.cells[0].W, self.cells[0].b
        if self.num_layers > 1:
            Wr = np.stack([cell.W for cell in self.cells[1:]])
            br = np.stack([cell.b for cell in self.cells[1:]])
        else:
            Wr = np.zeros((0, 2 * H, 4 * H))
            br = np.zeros((0, 4 * H))
        return W0, b0, Wr, br

    def run(self, x_seq, state=None):
        """Inference pass through the accelerated kernel."""
        x_seq, h0, c0 = self._check_seq(x_seq, state)
        W0, b0, Wr, br = self._stacked()
        out, h, c = _accel.lstm_stack_run(np.ascontiguousarray(x_seq), W0, b0, Wr, br, h0, c0)
        return out, (h, c)

    def forward_train(self, inputs):
        x_seq, state = inputs
        x_seq, h0, c0 = self._check_seq(x_seq, state)
        B, T, _ = x_seq.shape
        H = self.hidden_size
        layer_caches = []
        hT = np.empty_like(h0)
        cT = np.empty_like(c0)
        inp = x_seq
        for k, cell in enumerate(self.cells):
            D = cell.input_size
            xproj = inp @ cell.W[:D] + cell.b
            Wh = cell.W[D:]
            hs = np.empty((B, T + 1, H))
            cs = np.empty((B, T + 1, H))
            gates = np.empty((B, T, 4 * H))
            tcs = np.empty((B, T, H))
            hs[:, 0], cs[:, 0] = h0[k], c0[k]
            for t in range(T):
                z = xproj[:, t] + hs[:, t] @ Wh
                i = _accel.sigmoid(z[:, :H])
                f = _accel.sigmoid(z[:, H:2 * H])
                g = np.tanh(z[:, 2 * H:3 * H])
                o = _accel.sigmoid(z[:, 3 * H:])
                cs[:, t + 1] = f * cs[:, t] + i * g
                tcs[:, t] = np.tanh(cs[:, t + 1])
                hs[:, t + 1] = o * tcs[:, t]
                gates[:, t, :H], gates[:, t, H:2 * H] = i, f
                gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = g, o
            layer_caches.append((inp, hs, cs, gates, tcs))
            hT[k], cT[k] = hs[:, T], cs[:, T]
            inp = hs[:, 1:]
        return (inp, (hT, cT)), layer_caches

    def backward(self, cache, d_out):
        d_seq, d_state = d_out
        layer_caches = cache
        B, T1, H = layer_caches[0][1].shape
        T = T1 - 1
        L = self.num_layers
        dh_fin = np.zeros((L, B, H)) if d_state is None or d_state[0] is None else d_state[0]
        dc_fin = np.zeros((L, B, H)) if d_state is None or d_state[1] is None else d_state[1]
        d_above = np.zeros((B, T, H)) if d_seq is None else np.asarray(d_seq, dtype=np.float64)
        grads = [None] * (2 * L)
        dh0 = np.empty((L, B, H))
        dc0 = np.empty((L, B, H))
        for k in range(L - 1, -1, -1):
            cell = self.cells[k]
            D = cell.input_size
            Wh = cell.W[D:]
            inp, hs, cs, gates, tcs = layer_caches[k]
            dz_all = np.empty((B, T, 4 * H))
            dh = dh_fin[k].copy()
            dc = dc_fin[k].copy()
            dWh = np.zeros_like(Wh)
            for t in range(T - 1, -1, -1):
                i, f = gates[:, t, :H], gates[:, t, H:2 * H]
                g, o = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
                tc = tcs[:, t]
                dh = dh + d_above[:, t]
                dc = dc + dh * o * (1.0 - tc * tc)
                dz = dz_all[:, t]
                dz[:, :H] = dc * g * i * (1.0 - i)
                dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
                dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
                dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
                dWh += hs[:, t].T @ dz
                dh = dz @ Wh.T
                dc = dc * f
            dWx = np.tensordot(inp, dz_all, axes=([0, 1], [0, 1]))
            grads[2 * k] = np.concatenate([dWx, dWh], axis=0)
            grads[2 * k + 1] = dz_all.sum(axis=(0, 1))
            dh0[k], dc0[k] = dh, dc
            d_above = dz_all @ cell.W[:D].T
        return grads, (d_above, (dh0, dc0))


# --- reverse-mode driver and verification -------------------------------------------------


def value_and_grad(net, loss_fn, inputs):
    """Evaluate ``loss_fn`` on the network output and backpropagate.

    ``loss_fn(out)`` must return ``(loss, d_loss/d_out)``.
    """
    out, cache = net.forward_train(inputs)
    loss, d_out = loss_fn(out)
    loss = float(loss)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    grads, _ = net.backward(cache, d_out)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("non-finite gradient")
    return loss, grads


def gradient_check(net, loss_fn, inputs, n_directions=100, eps=1e-5, rng=None):
    """Largest relative error between analytic and central-difference
    directional derivatives over random unit parameter directions."""
    rng = _rng(rng)
    base = [p.copy() for p in net.params()]
    _, grads = value_and_grad(net, loss_fn, inputs)
    worst = 0.0
    try:
        for _ in range(n_directions):
            dirs = [rng.standard_normal(p.shape) for p in base]
            norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
            net.set_params([p + eps * d for p, d in zip(base, dirs)])
            up = loss_fn(net.forward_train(inputs)[0])[0]
            net.set_params([p - eps * d for p, d in zip(base, dirs)])
            down = loss_fn(net.forward_train(inputs)[0])[0]
            numeric = (up - down) / (2.0 * eps)
            scale = max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic - numeric) / scale)
    finally:
        net.set_params(base)
    return worst


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, **kwargs):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kwargs)


def adam_step(state, params, grads, max_grad_norm=10.0):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Gradients are clipped to ``max_grad_norm`` (global norm) first; pass
    ``None`` to disable clipping.
    """
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("params and grads do not line up")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("non-finite gradient passed to Adam")
    grads, _ = clip_by_global_norm(grads, max_grad_norm)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1.0 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1.0 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params = [p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return new_params, AdamState(m, v, t, state.lr, b1, b2, state.eps)


class Optimizer:
    """Holds a network together with its Adam state."""

    def __init__(self, net, lr=1e-3, max_grad_norm=10.0):
        self.net = net
        self.state = AdamState.for_params(net.params(), lr=lr)
        self.max_grad_norm = max_grad_norm

    def apply(self, grads):
        params, self.state = adam_step(self.state, self.net.params(), grads, self.max_grad_norm)
        self.net.set_params(params)


def soft_update(target, online, rho):
    """target <- rho * online + (1 - rho) * target."""
    tp, op = target.params(), online.params()
    if len(tp) != len(op) or any(a.shape != b.shape for a, b in zip(tp, op)):
        raise ShapeError("target and online networks differ in shape")
    target.set_params([rho * o + (1.0 - rho) * t for t, o in zip(tp, op)])


def clone(net):
    twin = type(net)(**net.config(), zero=True)
    twin.set_params([p.copy() for p in net.params()])
    _copy_extra(net, twin)
    return twin


def _copy_extra(src, dst):
    for name in getattr(src, "extra_state", ()):
        setattr(dst, name, getattr(src, name))


# --- checkpoints -----------------------------------------------------------------------------

_REGISTRY = {}


def register(cls):
    _REGISTRY[cls.__name__] = cls
    return cls


register(Mlp)
register(LstmCell)
register(LstmStack)


def save_checkpoint(path, networks, meta=None):
    """Write named networks plus a JSON-able ``meta`` dict to one ``.npz`` file."""
    header = {"version": CHECKPOINT_VERSION, "networks": {}, "meta": meta or {}}
    arrays = {}
    for name, net in networks.items():
        params = net.params()
        extra = {k: getattr(net, k) for k in getattr(net, "extra_state", ())}
        header["networks"][name] = {
            "class": type(net).__name__,
            "config": net.config(),
            "extra": extra,
            "n_params": len(params),
        }
        for k, p in enumerate(params):
            arrays[f"{name}/{k}"] = p
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(networks, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        networks = {}
        for name, info in header["networks"].items():
            cls = _REGISTRY[info["class"]]
            net = cls(**info["config"], zero=True)
            net.set_params([data[f"{name}/{k}"] for k in range(info["n_params"])])
            for k, v in info["extra"].items():
                setattr(net, k, v)
            networks[name] = net
    return networks, header["meta"]

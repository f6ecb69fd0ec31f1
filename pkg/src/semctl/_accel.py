"""Hot inference kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``SEMCTL_DISABLE_NUMBA`` is unset
(or ``0``); it only takes small batches, where per-step Python overhead
dominates. Both paths are importable as ``*_numba`` / ``*_numpy`` so they can be
compared directly.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SEMCTL_DISABLE_NUMBA", "0") in ("", "0")


def sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_stack_run_numpy(x, W0, b0, Wr, br, h0, c0):
    """Run a stacked LSTM over ``x`` of shape (B, T, D).

    ``W0`` is (D+H, 4H) for the bottom layer, ``Wr`` is (L-1, 2H, 4H) for the
    layers above it. Gate column order is input, forget, cell, output.
    Returns the top-layer outputs (B, T, H) and the final (L, B, H) states.
    """
    L, B, H = h0.shape
    D = x.shape[2]
    h = h0.copy()
    c = c0.copy()
    out = np.empty((B, x.shape[1], H))
    W0x, W0h = W0[:D], W0[D:]
    for t in range(x.shape[1]):
        inp = x[:, t, :]
        for layer in range(L):
            if layer == 0:
                z = inp @ W0x + h[0] @ W0h + b0
            else:
                Wl = Wr[layer - 1]
                z = inp @ Wl[:H] + h[layer] @ Wl[H:] + br[layer - 1]
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = sigmoid(z[:, 3 * H:])
            c[layer] = f * c[layer] + i * g
            h[layer] = o * np.tanh(c[layer])
            inp = h[layer]
        out[:, t, :] = inp
    return out, h, c


def _lstm_stack_run_kernel(x, W0, b0, Wr, br, h0, c0):
    L, B, H = h0.shape
    T = x.shape[1]
    D = x.shape[2]
    h = h0.copy()
    c = c0.copy()
    out = np.empty((B, T, H))
    W0x = np.ascontiguousarray(W0[:D])
    W0h = np.ascontiguousarray(W0[D:])
    Wrx = np.ascontiguousarray(Wr[:, :H, :])
    Wrh = np.ascontiguousarray(Wr[:, H:, :])
    inp = np.empty((B, H))
    xt = np.empty((B, D))
    for t in range(T):
        for bi in range(B):
            for d in range(D):
                xt[bi, d] = x[bi, t, d]
        for layer in range(L):
            if layer == 0:
                z = xt @ W0x + h[0] @ W0h
                bias = b0
            else:
                z = inp @ Wrx[layer - 1] + h[layer] @ Wrh[layer - 1]
                bias = br[layer - 1]
            for bi in range(B):
                for j in range(H):
                    ig = 1.0 / (1.0 + np.exp(-(z[bi, j] + bias[j])))
                    fg = 1.0 / (1.0 + np.exp(-(z[bi, H + j] + bias[H + j])))
                    gg = 2.0 / (1.0 + np.exp(-2.0 * (z[bi, 2 * H + j] + bias[2 * H + j]))) - 1.0
                    og = 1.0 / (1.0 + np.exp(-(z[bi, 3 * H + j] + bias[3 * H + j])))
                    cn = fg * c[layer, bi, j] + ig * gg
                    c[layer, bi, j] = cn
                    hn = og * (2.0 / (1.0 + np.exp(-2.0 * cn)) - 1.0)
                    h[layer, bi, j] = hn
                    inp[bi, j] = hn
        for bi in range(B):
            for j in range(H):
                out[bi, t, j] = inp[bi, j]
    return out, h, c


if HAVE_NUMBA:
    lstm_stack_run_numba = njit(cache=True, fastmath={"nsz", "arcp", "contract", "afn", "reassoc"})(_lstm_stack_run_kernel)
else:  # pragma: no cover
    lstm_stack_run_numba = lstm_stack_run_numpy

# Above this batch size the BLAS-vectorised numpy path is faster than the
# fused kernel (scalar exp in the gate loop); see benchmarks/bench_lstm.py.
NUMBA_MAX_BATCH = 16


def lstm_stack_run(x, W0, b0, Wr, br, h0, c0):
    if USE_NUMBA and x.shape[0] <= NUMBA_MAX_BATCH:
        return lstm_stack_run_numba(x, W0, b0, Wr, br, h0, c0)
    return lstm_stack_run_numpy(x, W0, b0, Wr, br, h0, c0)

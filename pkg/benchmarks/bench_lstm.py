"""Time the numba and numpy LSTM stack kernels across batch sizes.

Run with ``python benchmarks/bench_lstm.py``; prints one row per batch size
and checks that both paths agree.
"""

import argparse
import time

import numpy as np

from semctl import _accel


def make_inputs(batch, steps, hidden, layers, rng):
    x = rng.standard_normal((batch, steps, 3))
    W0 = rng.standard_normal((3 + hidden, 4 * hidden)) * 0.1
    b0 = rng.standard_normal(4 * hidden) * 0.1
    Wr = rng.standard_normal((layers - 1, 2 * hidden, 4 * hidden)) * 0.1
    br = rng.standard_normal((layers - 1, 4 * hidden)) * 0.1
    h0 = np.zeros((layers, batch, hidden))
    return x, W0, b0, Wr, br, h0, h0.copy()


def best_time(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batches", type=int, nargs="+", default=[1, 4, 16, 64, 256])
    p.add_argument("--steps", type=int, default=80)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return 0
    rng = np.random.default_rng(0)
    warm = make_inputs(1, 2, args.hidden, args.layers, rng)
    _accel.lstm_stack_run_numba(*warm)
    print(f"{'batch':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for B in args.batches:
        inp = make_inputs(B, args.steps, args.hidden, args.layers, rng)
        diff = max(float(np.max(np.abs(a - b))) for a, b in
                   zip(_accel.lstm_stack_run_numpy(*inp), _accel.lstm_stack_run_numba(*inp)))
        t_np = best_time(_accel.lstm_stack_run_numpy, inp, args.repeats)
        t_nb = best_time(_accel.lstm_stack_run_numba, inp, args.repeats)
        print(f"{B:>6} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>8.2f} {diff:>10.2e}")
    print(f"dispatch threshold: numba for batch <= {_accel.NUMBA_MAX_BATCH}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: ``semctl <subcommand> ...``.

Exit status is 0 on success, 2 on a usage error and 1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from semctl import env, mine, sfr, training
from semctl.evaluation import BaselineCase, Checkpoints, run_baseline, sweep_psnr

log = logging.getLogger("semctl")

DEFAULT_PSNRS = [8, 10, 12, 14, 16, 18, 20, 22, 24]


def _psnr_arg(text):
    if text.lower() in ("none", "clean", "inf"):
        return None
    return float(text)


def _case_arg(text):
    try:
        return BaselineCase.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _load_segments(paths, segment):
    """Sensor-space arrays, each file cut into pieces of ``segment`` slots."""
    out = []
    for path in paths:
        samples = env.load_trajectory_csv(path).samples
        if segment and len(samples) > segment:
            out += [samples[k:k + segment] for k in range(0, len(samples) - segment + 1, segment)]
        else:
            out.append(samples)
    return out


def cmd_gen_data(args):
    cfg = env.TrajectoryConfig(duration_s=args.duration, n_sines=args.n_sines, f_low=args.f_low, f_high=args.f_high)
    seeds = np.random.SeedSequence(args.seed).spawn(args.count) if args.count > 1 else [args.seed]
    out = Path(args.out)
    paths = [out] if args.count == 1 else [out.with_name(f"{out.stem}_{k:03d}{out.suffix}") for k in range(args.count)]
    for path, seed in zip(paths, seeds):
        env.save_trajectory_csv(path, env.generate_trajectory(cfg, np.random.default_rng(seed)))
        print(path)
    return 0


def cmd_pretrain_mine(args):
    trajs = _load_segments(args.data, args.segment)
    rng = np.random.default_rng(args.seed)
    corpus = mine.build_corpus(trajs, rng, psnr_choices=tuple(args.psnr), p_transmit=args.p_transmit)
    cfg = mine.MineTrainConfig(batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed)
    model, hist = mine.train_mine(corpus, cfg)
    mine.save_mine(args.out, model)
    print(f"MINE: {len(hist.objective)} epochs, final objective {hist.objective[-1]:.4f}, "
          f"DV estimate {hist.dv[-1]:.4f} nats -> {args.out}")
    return 0


def cmd_pretrain_sfr(args):
    corpus = [env.map_touch_to_panda(t) for t in _load_segments(args.data, args.segment)]
    cfg = sfr.SfrTrainConfig(n_steps=args.steps, batch_size=args.batch_size, noise_psnr_db=args.psnr, seed=args.seed)
    model, hist = sfr.train_sfr(corpus, cfg)
    sfr.save_sfr(args.out, model, {"noise_psnr_db": args.psnr})
    print(f"SFR: {cfg.n_steps} steps, final loss {hist.loss_mm2[-1]:.3f} mm^2 -> {args.out}")
    return 0


def _train_config(args):
    config = training.load_config(args.config) if args.config else training.TrainConfig()
    overrides = {k: getattr(args, k) for k in ("episodes", "seed", "delta_l", "delta_u", "n_envs") if getattr(args, k, None) is not None}
    if overrides:
        config = training.parse_config_text("".join(f"{k} = {v}\n" for k, v in overrides.items()), config)
    return config


def cmd_train(args):
    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(training.format_config(config))
    result = training.train(config, mine.load_mine(args.mine), sfr.load_sfr(args.sfr), log_path=out / "train_log.csv")
    training.save_bundle(out / "agents.npz", result.bundle, config)
    print(f"trained {config.episodes} episodes -> {out / 'agents.npz'}")
    return 0


def _checkpoints(args):
    bundle, config = (None, None)
    if args.agents:
        bundle, config = training.load_bundle(args.agents)
    if args.config:
        config = training.load_config(args.config)
    ck = Checkpoints(
        bundle,
        mine.load_mine(args.mine) if args.mine else None,
        sfr.load_sfr(args.sfr) if args.sfr else None,
    )
    config = config or training.TrainConfig()
    if args.n_envs:
        config = training.parse_config_text(f"n_envs = {args.n_envs}\n", config)
    return ck, config


def cmd_eval(args):
    ck, config = _checkpoints(args)
    S_e, dc = run_baseline(args.case, args.psnr, config, ck, args.n_eval, args.seed, args.fixed_gain)
    print(f"case={args.case} psnr_db={args.psnr:g} S_e_mm={S_e:.3f} duty_cycle={dc:.4f} episodes={args.n_eval}")
    return 0


def cmd_sweep(args):
    ck, config = _checkpoints(args)
    rows = sweep_psnr(args.cases, args.psnr, config, ck, args.out, args.n_eval, args.seed, args.fixed_gain)
    for r in rows:
        print(f"{r.case:>9} {r.psnr_db:5.1f} dB  S_e {r.S_e_mm:8.2f} mm  DC {r.duty_cycle:.3f}")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _add_eval_sources(p):
    p.add_argument("--agents", help="trained agent bundle (.npz) written by 'train'")
    p.add_argument("--mine", help="MINE checkpoint")
    p.add_argument("--sfr", help="SFR checkpoint")
    p.add_argument("--config", help="training config file (defaults to the one stored in the bundle)")
    p.add_argument("--n-eval", type=int, default=20, help="episodes per evaluation point (default 20)")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed (default 0)")
    p.add_argument("--fixed-gain", type=float, default=30.0, help="gain K of the fixed-gain cases (default 30)")
    p.add_argument("--n-envs", type=int, help="episodes simulated in lockstep")


def build_parser():
    parser = argparse.ArgumentParser(prog="semctl", description="Semantic-aware transmission and control for teleoperation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic sum-of-sinusoid trajectories as t,x,y,z CSV")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--duration", type=float, default=20.0, help="seconds per trajectory (default 20)")
    p.add_argument("--count", type=int, default=1, help="number of trajectories; >1 writes <stem>_NNN.csv files")
    p.add_argument("--n-sines", type=int, default=3, help="sinusoids per axis (default 3)")
    p.add_argument("--f-low", type=float, default=0.05, help="lowest frequency in Hz (default 0.05)")
    p.add_argument("--f-high", type=float, default=0.5, help="highest frequency in Hz (default 0.5)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-mine", help="train the MI statistics network")
    p.add_argument("--data", nargs="+", required=True, help="trajectory CSV files")
    p.add_argument("--out", required=True, help="output checkpoint (.npz)")
    p.add_argument("--psnr", type=float, nargs="+", default=DEFAULT_PSNRS, help="sensing-noise PSNR levels drawn per segment")
    p.add_argument("--p-transmit", type=float, default=0.4, help="transmission probability of the anchor pattern")
    p.add_argument("--segment", type=int, default=2400, help="slots per segment (default 2400)")
    p.add_argument("--epochs", type=int, default=200, help="maximum epochs (default 200)")
    p.add_argument("--batch-size", type=int, default=1024, help="pairs per step (default 1024)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.set_defaults(func=cmd_pretrain_mine)

    p = sub.add_parser("pretrain-sfr", help="train the receiver-side LSTM encoder-decoder")
    p.add_argument("--data", nargs="+", required=True, help="trajectory CSV files")
    p.add_argument("--out", required=True, help="output checkpoint (.npz)")
    p.add_argument("--psnr", type=_psnr_arg, default=15.0, help="input-noise PSNR in dB, or 'none' (default 15)")
    p.add_argument("--steps", type=int, default=4000, help="optimizer steps (default 4000)")
    p.add_argument("--batch-size", type=int, default=32, help="windows per step (default 32)")
    p.add_argument("--segment", type=int, default=2400, help="slots per segment (default 2400)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.set_defaults(func=cmd_pretrain_sfr)

    p = sub.add_parser("train", help="jointly train the transmission and gain agents")
    p.add_argument("--config", help="flat 'key = value' file of training settings")
    p.add_argument("--mine", required=True, help="MINE checkpoint")
    p.add_argument("--sfr", required=True, help="SFR checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--episodes", type=int, help="override the episode count")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--delta-l", type=float, help="override the control accuracy parameter (mm)")
    p.add_argument("--delta-u", type=float, help="override the control error upper bound (mm)")
    p.add_argument("--n-envs", type=int, help="episodes simulated in lockstep")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one case at one PSNR")
    p.add_argument("--case", type=_case_arg, required=True, help="case1, case2:S, case3, case4, case5 or proposed")
    p.add_argument("--psnr", type=float, required=True, help="PSNR in dB")
    _add_eval_sources(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate cases over PSNR levels and write the metrics CSV")
    p.add_argument("--cases", type=_case_arg, nargs="+", required=True, help="cases to evaluate")
    p.add_argument("--psnr", type=float, nargs="+", default=DEFAULT_PSNRS, help="PSNR levels in dB")
    p.add_argument("--out", required=True, help="metrics CSV path")
    _add_eval_sources(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"semctl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

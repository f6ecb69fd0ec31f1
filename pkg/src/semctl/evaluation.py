"""Baseline cases and PSNR sweeps with frozen policies."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from semctl.training import RolloutPolicy, TrainConfig, episode_spec, rollout

CASE_NAMES = ("case1", "case2", "case3", "case4", "case5", "proposed")
LEARNED_CASES = ("case3", "case4", "case5", "proposed")
CSV_FIELDS = ("psnr_db", "case", "S_e_mm", "duty_cycle", "episodes")


@dataclass(frozen=True)
class BaselineCase:
    """One comparison scheme; ``period`` is only used by case2."""

    name: str
    period: int = 0

    def __post_init__(self):
        if self.name not in CASE_NAMES:
            raise ValueError(f"unknown case {self.name!r}; choose from {', '.join(CASE_NAMES)}")
        if self.name == "case2" and self.period < 2:
            raise ValueError("case2 needs a period S >= 2")

    @classmethod
    def parse(cls, text):
        """``case2:4`` selects periodic sampling every 4 slots."""
        name, _, period = text.strip().lower().partition(":")
        if name == "case2":
            if not period:
                raise ValueError("case2 needs a period, e.g. case2:4")
            return cls(name, int(period))
        if period:
            raise ValueError(f"{name} takes no parameter")
        return cls(name)

    def __str__(self):
        return f"case2:{self.period}" if self.name == "case2" else self.name

    @property
    def learned(self):
        return self.name in LEARNED_CASES

    def policy(self, fixed_gain=30.0):
        if self.name == "case1":
            return RolloutPolicy("always", "fixed", use_sfr=False, fixed_gain=fixed_gain)
        if self.name == "case2":
            return RolloutPolicy("periodic", "fixed", use_sfr=False, period=self.period, fixed_gain=fixed_gain)
        if self.name == "case3":
            return RolloutPolicy("always", "learned", use_sfr=False)
        if self.name == "case4":
            return RolloutPolicy("learned", "learned", use_sfr=False)
        if self.name == "case5":
            return RolloutPolicy("learned", "fixed", use_sfr=True, fixed_gain=fixed_gain)
        return RolloutPolicy("learned", "learned", use_sfr=True)


@dataclass
class Checkpoints:
    """Frozen learned components; any may be ``None`` for the fixed baselines."""

    bundle: object = None
    mine: object = None
    sfr: object = None


@dataclass(frozen=True)
class SweepRow:
    psnr_db: float
    case: str
    S_e_mm: float
    duty_cycle: float
    episodes: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.duty_cycle <= 1.0:
            raise ValueError(f"duty cycle {self.duty_cycle} outside [0, 1]")
        if not self.S_e_mm >= 0.0:
            raise ValueError(f"negative control error {self.S_e_mm}")


def run_baseline(case, psnr_db, config=None, checkpoints=Checkpoints(), n_eval=20, seed=0, fixed_gain=30.0):
    """Mean ``(S_e, duty_cycle)`` over ``n_eval`` greedy episodes."""
    case = BaselineCase.parse(case) if isinstance(case, str) else case
    config = config or TrainConfig()
    if case.learned and (checkpoints.bundle is None or checkpoints.mine is None):
        raise ValueError(f"{case} needs trained agents and a MINE model")
    if case.name in ("case5", "proposed") and checkpoints.sfr is None:
        raise ValueError(f"{case} needs an SFR model")
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    policy = case.policy(fixed_gain)
    specs = [episode_spec(seed, n, config, psnr_db=psnr_db) for n in range(n_eval)]
    traces = []
    for k in range(0, n_eval, config.n_envs):
        traces += rollout(
            specs[k:k + config.n_envs], policy, config, checkpoints.bundle, checkpoints.mine, checkpoints.sfr
        ).traces
    return float(np.mean([t.S_e for t in traces])), float(np.mean([t.duty_cycle for t in traces]))


def sweep_psnr(cases, psnr_list, config=None, checkpoints=Checkpoints(), out_path=None, n_eval=20, seed=0, fixed_gain=30.0):
    """Evaluate every (case, PSNR) pair; writes the metrics CSV when ``out_path`` is set."""
    psnr_list = list(psnr_list)
    if not psnr_list:
        raise ValueError("psnr_list is empty")
    cases = [BaselineCase.parse(c) if isinstance(c, str) else c for c in cases]
    rows = []
    for case in cases:
        for psnr in psnr_list:
            S_e, dc = run_baseline(case, psnr, config, checkpoints, n_eval, seed, fixed_gain)
            rows.append(SweepRow(float(psnr), str(case), S_e, dc, n_eval, seed))
    if out_path is not None:
        write_sweep_csv(out_path, rows)
    return rows


def write_sweep_csv(path, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in rows:
                w.writerow([r.psnr_db, r.case, repr(r.S_e_mm), repr(r.duty_cycle), r.episodes])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_sweep_csv(path, seed=0):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(CSV_FIELDS)}")
        return [
            SweepRow(float(r["psnr_db"]), r["case"], float(r["S_e_mm"]), float(r["duty_cycle"]), int(r["episodes"]), seed)
            for r in reader
        ]


def count_inversions(values):
    """Number of adjacent increases in a sequence that should not increase."""
    v = np.asarray(values, dtype=np.float64)
    return int(np.count_nonzero(np.diff(v) > 0.0))

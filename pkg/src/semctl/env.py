"""The physical and communication world of the teleoperation loop.

Positions are in millimetres. The sensor (haptic pen) lives in its own
workspace; the robot workspace is reached through a per-axis affine map.
One slot is one sensing period (1/120 s).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

SENSING_RATE_HZ = 120.0
SLOT_S = 1.0 / SENSING_RATE_HZ
V_MAX_MM_PER_SLOT = 10.0


class TrajectoryFormatError(ValueError):
    pass


def _vec(values):
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class WorkspaceBounds:
    robot_lower: tuple = (-200.0, -200.0, 0.0)
    robot_upper: tuple = (200.0, 200.0, 400.0)
    sensor_lower: tuple = (-105.0, -100.0, -220.0)
    sensor_upper: tuple = (263.0, 150.0, 100.0)

    def __post_init__(self):
        for lo, hi, name in (
            (self.robot_lower, self.robot_upper, "robot"),
            (self.sensor_lower, self.sensor_upper, "sensor"),
        ):
            if len(lo) != 3 or len(hi) != 3:
                raise ValueError(f"{name} bounds must be 3-vectors")
            if np.any(_vec(hi) <= _vec(lo)):
                raise ValueError(f"{name} bounds are degenerate: upper {hi} must exceed lower {lo}")

    @property
    def robot_scale2(self):
        """Squared norm of the robot workspace diagonal (480000 mm^2 by default)."""
        d = _vec(self.robot_upper) - _vec(self.robot_lower)
        return float(d @ d)

    @property
    def robot_span(self):
        return _vec(self.robot_upper) - _vec(self.robot_lower)

    @property
    def robot_center(self):
        return 0.5 * (_vec(self.robot_upper) + _vec(self.robot_lower))


DEFAULT_BOUNDS = WorkspaceBounds()


@dataclass(frozen=True)
class NoiseConfig:
    sigma_s2: float = 0.0
    sigma_c2: float = 0.0

    def __post_init__(self):
        if self.sigma_s2 < 0 or self.sigma_c2 < 0:
            raise ValueError("noise variances must be non-negative")

    @property
    def sigma2(self):
        return self.sigma_s2 + self.sigma_c2

    @classmethod
    def from_sigma2(cls, sigma2, sensing_share=0.5):
        return cls(sigma2 * sensing_share, sigma2 * (1.0 - sensing_share))

    @classmethod
    def from_psnr(cls, psnr_db, bounds=DEFAULT_BOUNDS, sensing_share=0.5):
        return cls.from_sigma2(psnr_to_sigma2(psnr_db, bounds), sensing_share)


@dataclass
class Trajectory:
    samples: np.ndarray
    rate: float = SENSING_RATE_HZ
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise ValueError(f"trajectory samples must be (N, 3), got {self.samples.shape}")
        if self.times is None:
            self.times = np.arange(len(self.samples)) / self.rate
        else:
            self.times = np.asarray(self.times, dtype=np.float64)

    def __len__(self):
        return len(self.samples)


def sense(x, noise, rng):
    """Sensor reading: true state plus N(0, sigma_s^2 I) noise."""
    x = _vec(x)
    if noise.sigma_s2 == 0.0:
        return x.copy()
    return x + rng.normal(0.0, math.sqrt(noise.sigma_s2), size=x.shape)


def transmit(x_hat, noise, rng):
    """Received value: sensed state plus N(0, sigma_c^2 I) channel noise."""
    x_hat = _vec(x_hat)
    if noise.sigma_c2 == 0.0:
        return x_hat.copy()
    return x_hat + rng.normal(0.0, math.sqrt(noise.sigma_c2), size=x_hat.shape)


def map_touch_to_panda(x_hat, bounds=DEFAULT_BOUNDS):
    """Per-axis affine map from sensor space into robot space (extrapolates)."""
    tl, tu = _vec(bounds.sensor_lower), _vec(bounds.sensor_upper)
    bl, bu = _vec(bounds.robot_lower), _vec(bounds.robot_upper)
    if np.any(tu == tl):
        raise ValueError("degenerate sensor bounds")
    return bl + (bu - bl) / (tu - tl) * (_vec(x_hat) - tl)


def mapping_gain(bounds=DEFAULT_BOUNDS):
    return (_vec(bounds.robot_upper) - _vec(bounds.robot_lower)) / (
        _vec(bounds.sensor_upper) - _vec(bounds.sensor_lower)
    )


def psnr_to_sigma2(psnr_db, bounds=DEFAULT_BOUNDS):
    return bounds.robot_scale2 / 10.0 ** (psnr_db / 10.0)


def sigma2_to_psnr(sigma2, bounds=DEFAULT_BOUNDS, cap_db=60.0):
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    with np.errstate(divide="ignore"):
        psnr = 10.0 * np.log10(bounds.robot_scale2 / sigma2)
    return np.minimum(psnr, cap_db)


def control_command(K, x_bar, x_tilde):
    """u = K (x_bar - x_tilde); ``K`` may be a scalar or one gain per row."""
    K = np.asarray(K, dtype=np.float64)
    diff = _vec(x_bar) - _vec(x_tilde)
    return (K[..., None] if K.ndim and diff.ndim > K.ndim else K) * diff


def plant_step(x_bar, u, dt=SLOT_S, v_max=V_MAX_MM_PER_SLOT):
    """First-order drive: move against u*dt, at most v_max per axis and slot."""
    return _vec(x_bar) - np.clip(_vec(u) * dt, -v_max, v_max)


def duty_cycle(decisions):
    decisions = np.asarray(decisions)
    if decisions.size == 0:
        raise ValueError("duty cycle of an empty decision list")
    return float(np.count_nonzero(decisions)) / decisions.size


def control_error_metric(x_hat_b, x_bar=None):
    """Mean Euclidean distance between mapped sensed states and robot states.

    Accepts either two (N, 3) arrays or one sequence of (x_hat_b, x_bar) pairs.
    """
    if x_bar is None:
        pairs = np.asarray(x_hat_b, dtype=np.float64)
        if pairs.size == 0:
            raise ValueError("control error of an empty trace")
        x_hat_b, x_bar = pairs[:, 0], pairs[:, 1]
    a, b = _vec(x_hat_b), _vec(x_bar)
    if a.size == 0:
        raise ValueError("control error of an empty trace")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


@dataclass(frozen=True)
class TrajectoryConfig:
    duration_s: float = 20.0
    n_sines: int = 3
    f_low: float = 0.05
    f_high: float = 0.5
    margin: float = 0.95
    rate: float = SENSING_RATE_HZ


def generate_trajectory(config=TrajectoryConfig(), rng=None, bounds=DEFAULT_BOUNDS, n_slots=None):
    """Smooth sum-of-sinusoids path inside the sensor workspace.

    Each axis is ``sum_k a_k sin(2 pi f_k t + phi_k)`` divided by ``sum_k a_k``,
    so it stays in [-1, 1] and its slope is at most ``2 pi f_high``; it is then
    scaled to ``margin`` of the half-range around the workspace centre.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = int(round(config.duration_s * config.rate)) if n_slots is None else int(n_slots)
    t = np.arange(n) / config.rate
    lo, hi = _vec(bounds.sensor_lower), _vec(bounds.sensor_upper)
    centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    amp = rng.uniform(0.2, 1.0, size=(3, config.n_sines))
    freq = rng.uniform(config.f_low, config.f_high, size=(3, config.n_sines))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(3, config.n_sines))
    waves = np.sin(2.0 * np.pi * freq[:, :, None] * t + phase[:, :, None])
    s = np.einsum("ak,akn->an", amp, waves) / amp.sum(axis=1, keepdims=True)
    samples = centre + config.margin * half * s.T
    return Trajectory(samples, config.rate)


def _in_bounds(samples, bounds):
    lo, hi = _vec(bounds.sensor_lower), _vec(bounds.sensor_upper)
    return np.all((samples >= lo) & (samples <= hi), axis=1)


def save_trajectory_csv(path, trajectory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z"])
        for t, (x, y, z) in zip(trajectory.times, trajectory.samples):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(z))])


def load_trajectory_csv(path, bounds=DEFAULT_BOUNDS, rate=SENSING_RATE_HZ):
    """Read a ``t,x,y,z`` file; errors name the first offending line."""
    times, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "x", "y", "z"]:
            raise TrajectoryFormatError(f"{path}:1: expected header 't,x,y,z', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise TrajectoryFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise TrajectoryFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise TrajectoryFormatError(f"{path}:{lineno}: non-finite value in {row}")
            if times and vals[0] <= times[-1]:
                raise TrajectoryFormatError(f"{path}:{lineno}: time {vals[0]} is not increasing")
            lo, hi = bounds.sensor_lower, bounds.sensor_upper
            if any(not (lo[j] <= vals[1 + j] <= hi[j]) for j in range(3)):
                raise TrajectoryFormatError(f"{path}:{lineno}: sample {vals[1:]} outside sensor workspace")
            times.append(vals[0])
            rows.append(vals[1:])
    if not rows:
        raise TrajectoryFormatError(f"{path}: no samples")
    return Trajectory(np.array(rows), rate, np.array(times))

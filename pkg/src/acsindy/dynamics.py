"""Benchmark systems, fixed-step RK4 simulation and trajectory utilities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DivergenceError

SYSTEM_NAMES = ("nonlinear2d", "lorenz", "lorenz_forced")

_DEFAULT_PARAMS = {
    "nonlinear2d": (),
    "lorenz": (10.0, 28.0, 8.0 / 3.0),
    "lorenz_forced": (10.0, 28.0, 8.0 / 3.0),
}
_DIMS = {"nonlinear2d": 2, "lorenz": 3, "lorenz_forced": 3}

# Generation defaults per system: (x0, dt, steps).
DEFAULT_GENERATION = {
    "nonlinear2d": ((2.0, 0.0), 0.01, 5000),
    "lorenz": ((1.0, 1.0, 1.0), 0.002, 25000),
    "lorenz_forced": ((1.0, 1.0, 1.0), 0.002, 25000),
}


@dataclass(frozen=True)
class BenchmarkSystem:
    name: str
    params: tuple = ()

    def __post_init__(self):
        name = normalize_system_name(self.name)
        object.__setattr__(self, "name", name)
        params = tuple(float(p) for p in self.params) or _DEFAULT_PARAMS[name]
        if len(params) != len(_DEFAULT_PARAMS[name]):
            raise ArgumentError(
                f"{name} takes {len(_DEFAULT_PARAMS[name])} parameters, got {len(params)}"
            )
        object.__setattr__(self, "params", params)

    @property
    def dim(self) -> int:
        return _DIMS[self.name]

    def __call__(self, x):
        return eval_vector_field(self, x)


def normalize_system_name(name: str) -> str:
    key = name.lower().replace("-", "_")
    aliases = {"nonlinear_2d": "nonlinear2d", "2d": "nonlinear2d", "lorenzforced": "lorenz_forced"}
    key = aliases.get(key, key)
    if key not in SYSTEM_NAMES:
        raise ArgumentError(f"unknown system {name!r}; expected one of {SYSTEM_NAMES}")
    return key


def eval_vector_field(system: BenchmarkSystem, x) -> np.ndarray:
    """Evaluate f(x) for a benchmark system.

    ``x`` may be a single state (n,) or a batch (..., n); the result has the
    same shape.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (system.dim,):
        raise ArgumentError(f"{system.name} expects state dim {system.dim}, got shape {x.shape}")
    if system.name == "nonlinear2d":
        u, v = x[..., 0], x[..., 1]
        return np.stack([-0.1 * u + v, -2.0 * u - 0.1 * v - 0.5 * u * v - 0.025 * v * v], axis=-1)
    s, r, b = system.params
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    du = s * (v - u)
    if system.name == "lorenz_forced":
        du = du + 0.1 * np.sin(u)
    return np.stack([du, u * (r - w) - v, u * v - b * w], axis=-1)


@dataclass
class Trajectory:
    """Uniformly sampled time series: ``times`` (T,) and ``states`` (T, n)."""

    times: np.ndarray
    states: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.times.ndim != 1 or self.times.shape[0] != self.states.shape[0]:
            raise ArgumentError("times and states must have the same number of rows")
        if len(self.times) >= 2:
            steps = np.diff(self.times)
            dt = steps[0]
            if dt <= 0 or np.any(np.abs(steps - dt) > 1e-9 * max(abs(dt), 1.0) + 1e-12 * np.abs(self.times[1:])):
                raise ArgumentError("times must be strictly increasing with uniform spacing")

    def __len__(self):
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def dt(self) -> float:
        if len(self.times) < 2:
            raise ArgumentError("trajectory has fewer than two samples; dt undefined")
        return float((self.times[-1] - self.times[0]) / (len(self.times) - 1))


def integrate_rk4(system, x0, dt: float, steps: int) -> Trajectory:
    """Classical fixed-step RK4.

    ``system`` is a :class:`BenchmarkSystem` or any callable mapping a state
    vector to its time derivative. Returns ``steps + 1`` rows starting at x0.
    """
    if not dt > 0:
        raise ArgumentError(f"dt must be positive, got {dt}")
    if steps < 1:
        raise ArgumentError(f"steps must be >= 1, got {steps}")
    x = np.array(x0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ArgumentError("x0 must be finite")
    f = system if callable(system) else None
    if f is None:
        raise ArgumentError("system must be callable")
    out = np.empty((steps + 1, x.size))
    out[0] = x
    for i in range(steps):
        k1 = np.asarray(f(x), dtype=float)
        k2 = np.asarray(f(x + 0.5 * dt * k1), dtype=float)
        k3 = np.asarray(f(x + 0.5 * dt * k2), dtype=float)
        k4 = np.asarray(f(x + dt * k3), dtype=float)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at integration step {i + 1}", step=i + 1)
        out[i + 1] = x
    return Trajectory(np.arange(steps + 1) * dt, out)


def add_gaussian_noise(traj: Trajectory, sigma: float, seed: int) -> Trajectory:
    """Perturb every state entry by i.i.d. N(0, sigma^2); times are untouched."""
    if sigma < 0:
        raise ArgumentError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Trajectory(traj.times.copy(), traj.states.copy(), dict(traj.meta))
    rng = np.random.default_rng(seed)
    noisy = traj.states + rng.normal(0.0, sigma, size=traj.states.shape)
    return Trajectory(traj.times.copy(), noisy, dict(traj.meta))


def split_trajectory(traj: Trajectory, fractions=(0.8, 0.1, 0.1)):
    """Contiguous train/val/test segments.

    Segment sizes are ``floor(f * T)``; the remainder goes to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ArgumentError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ArgumentError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(traj)
    # Tolerate float artifacts like 0.1 * 100 = 10.000000000000002.
    sizes = [int(math.floor(f * n + 1e-9)) for f in fractions]
    sizes[0] += n - sum(sizes)
    if min(sizes) < 1:
        raise ArgumentError(f"split of {n} rows by {fractions} leaves an empty segment")
    bounds = np.cumsum([0] + sizes)
    return tuple(
        Trajectory(traj.times[a:b].copy(), traj.states[a:b].copy(), dict(traj.meta))
        for a, b in zip(bounds[:-1], bounds[1:])
    )


def simulate(system: BenchmarkSystem, x0=None, dt=None, steps=None) -> Trajectory:
    """Integrate a benchmark system with its default generation settings."""
    d_x0, d_dt, d_steps = DEFAULT_GENERATION[system.name]
    traj = integrate_rk4(
        system,
        d_x0 if x0 is None else x0,
        d_dt if dt is None else dt,
        d_steps if steps is None else steps,
    )
    traj.meta["system"] = system.name
    return traj


# CSV --------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    path = Path(path)
    header = ["t"] + [f"x{i + 1}" for i in range(traj.dim)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in zip(traj.times, traj.states):
            w.writerow([_fmt(t)] + [_fmt(v) for v in row])


def read_trajectory_csv(path) -> Trajectory:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise ArgumentError(f"{path}: expected header starting with 't'")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    if data.size == 0:
        raise ArgumentError(f"{path}: no data rows")
    return Trajectory(data[:, 0], data[:, 1:])

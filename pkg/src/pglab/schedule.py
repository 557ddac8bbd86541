"""Noise schedule, particle state, RNG streams, and reverse-time integrators.

The forward corruption process is the variance-exploding diffusion with a
geometric noise scale,

    sigma(t) = sigma_min^(1 - t/T) * sigma_max^(t/T),        0 <= t <= T,

so the squared diffusion coefficient is the exact derivative of sigma^2:

    g(t)^2 = d sigma^2(t) / dt = sigma(t)^2 * 2 log(sigma_max/sigma_min) / T.

Sampling integrates the reverse process from t = T down to t = 0. One
Euler-Maruyama step of the guided reverse SDE (time decreasing by dt > 0) is

    x <- x + [ (1 + b_t)/2 * g^2 * score + c_t * g^2 * guidance ] * dt
           + b_t * g * sqrt(dt) * xi,

where b_t weights the Langevin half of the split update and c_t weights the
repulsive guidance drift. b_t = c_t = 1 is the plain guided reverse SDE;
b_t = 0 with guidance scaled by c_t * g^2 / 2 is the probability-flow ODE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class Space(str, Enum):
    """Geometry the particle coordinates live in."""

    EUCLIDEAN = "euclidean"
    TORUS = "torus"


def wrap_angles(x):
    """Wrap angle coordinates into (-pi, pi].

    Works elementwise on arrays. The half-open convention matters: -pi maps
    to +pi, so wrapped differences of torsion-like coordinates are unique.
    """
    return np.pi - np.mod(np.pi - np.asarray(x), TWO_PI)


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric variance-exploding noise scale on [0, horizon]."""

    sigma_min: float = 0.01
    sigma_max: float = 3.0
    horizon: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > self.horizon):
            raise ValueError(f"time outside [0, {self.horizon}]: {t}")
        return t

    def sigma(self, t):
        """Noise scale sigma(t); scalar in, scalar out."""
        t = self._check_time(t)
        u = t / self.horizon
        out = self.sigma_min ** (1.0 - u) * self.sigma_max**u
        return float(out) if out.ndim == 0 else out

    def sigma2(self, t):
        s = self.sigma(t)
        return s * s

    def g2(self, t):
        """Squared diffusion coefficient g(t)^2 = d sigma^2 / dt."""
        return self.sigma2(t) * (2.0 * self.log_ratio / self.horizon)

    def perturb(self, x0, t, noise):
        """Corrupted sample x_t = x_0 + sigma(t) * xi for standard normal xi."""
        x0 = np.asarray(x0, dtype=float)
        noise = np.asarray(noise, dtype=float)
        if noise.shape != x0.shape:
            raise ValueError(f"noise shape {noise.shape} != state shape {x0.shape}")
        return x0 + self.sigma(t) * noise

    def time_grid(self, steps: int) -> np.ndarray:
        """Uniform reverse-time grid horizon = t_0 > t_1 > ... > t_steps = 0."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return np.linspace(self.horizon, 0.0, steps + 1)


@dataclass(frozen=True)
class RngStream:
    """Splittable random stream: a root seed plus a path of child ids.

    Distinct paths under the same seed give statistically independent
    streams (numpy SeedSequence spawn keys). Identical (seed, path) and an
    identical sequence of draws reproduce bit-identical values on any
    platform, which the reproducibility tests rely on.
    """

    seed: int
    path: tuple = ()

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))


@dataclass
class ParticleSet:
    """A batch of n particles in d dimensions at diffusion time t."""

    coords: np.ndarray
    space: Space = Space.EUCLIDEAN
    t: float = 0.0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 2:
            raise ValueError(f"coords must be (n, d), got shape {self.coords.shape}")
        self.space = Space(self.space)
        if self.space is Space.TORUS:
            self.coords = wrap_angles(self.coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def with_coords(self, coords, t=None) -> "ParticleSet":
        return ParticleSet(coords, self.space, self.t if t is None else t)


def _wrap_if_torus(coords, space: Space):
    return wrap_angles(coords) if space is Space.TORUS else coords


def reverse_sde_step(
    coords,
    score,
    guidance,
    t: float,
    dt: float,
    schedule: NoiseSchedule,
    noise,
    langevin_weight: float = 1.0,
    guidance_weight: float = 1.0,
    space: Space = Space.EUCLIDEAN,
):
    """One Euler-Maruyama step of the guided reverse SDE, t -> t - dt.

    `score` and `guidance` are arrays shaped like `coords` (guidance may be
    None for the unguided process). With langevin_weight = 1 and
    guidance_weight = 1 this is the plain reverse diffusion with the full
    g^2-scaled guidance drift added; guidance_weight = 0 reduces it exactly
    to independent reverse diffusion under the same noise draws.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive (time decreases by dt)")
    coords = np.asarray(coords, dtype=float)
    g2 = schedule.g2(t)
    drift = (0.5 * (1.0 + langevin_weight) * g2) * score
    if guidance is not None:
        drift = drift + (guidance_weight * g2) * guidance
    new = coords + drift * dt + (langevin_weight * math.sqrt(g2 * dt)) * noise
    return _wrap_if_torus(new, space)


def ode_step(
    coords,
    rhs: Callable,
    t: float,
    dt: float,
    method: str = "euler",
    space: Space = Space.EUCLIDEAN,
):
    """One deterministic step of the probability-flow ODE, t -> t - dt.

    `rhs(coords, t)` returns the velocity dx/d(-t), i.e. the full drift
    (1/2) g^2 (score + weighted guidance) already assembled by the caller.
    Heun takes a trial Euler step and averages the endpoint slopes, which
    buys second-order accuracy at one extra rhs evaluation.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    coords = np.asarray(coords, dtype=float)
    v1 = rhs(coords, t)
    if method == "euler":
        return _wrap_if_torus(coords + dt * v1, space)
    if method == "heun":
        trial = coords + dt * v1
        v2 = rhs(_wrap_if_torus(trial, space), t - dt)
        return _wrap_if_torus(coords + (0.5 * dt) * (v1 + v2), space)
    raise ValueError(f"unknown integrator {method!r} (expected 'euler' or 'heun')")


def log_linear(start: float, end: float, t: float, horizon: float) -> float:
    """Log-interpolated scalar schedule: value at t=0 is `start`, at t=horizon `end`.

    Endpoints must be positive, except for the exact constant-zero schedule
    (start == end == 0), which several reductions in the samplers rely on.
    """
    if start == 0.0 and end == 0.0:
        return 0.0
    if start <= 0.0 or end <= 0.0:
        raise ValueError("log-interpolated schedules need positive endpoints")
    u = t / horizon
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"time outside [0, {horizon}]: {t}")
    return math.exp((1.0 - u) * math.log(start) + u * math.log(end))


@dataclass(frozen=True)
class ScheduledValue:
    """Pair of endpoints for a log-interpolated schedule."""

    start: float
    end: float

    @classmethod
    def constant(cls, value: float) -> "ScheduledValue":
        return cls(value, value)

    @classmethod
    def of(cls, value) -> "ScheduledValue":
        if isinstance(value, ScheduledValue):
            return value
        if isinstance(value, (tuple, list)):
            a, b = value
            return cls(float(a), float(b))
        return cls.constant(float(value))

    def at(self, t: float, horizon: float) -> float:
        return log_linear(self.start, self.end, t, horizon)

"""End-to-end particle samplers over analytic targets.

Covers independent reverse diffusion, jointly guided reverse diffusion with
a repulsive pairwise potential (SDE and probability-flow ODE), Stein
variational descent plus the single-step bridge between the two, a
low-temperature hybrid stochastic integrator, sequential sampling with
deposited bias bumps, and electrostatic field following with mutual charge
repulsion.

RNG discipline: a sampler owns the stream it is handed.  Particle i draws
its prior first and then its whole noise block from `rng.child(i)`, so a
guided run and an unguided run consume identical randomness and the exact
reduction identities (guidance weight 0, unit power with no churn, zero
bump height, single particle) hold bitwise.  The `*_batch` runners trade
that per-particle protocol for one stream per fixed-size trial block, which
keeps results independent of the worker count while staying fast at
millions of trials.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .parallel import map_blocks
from .potentials import Kernel, PotentialSpec, median_bandwidth, potential_gradient
from .schedule import (
    NoiseSchedule,
    ParticleSet,
    RngStream,
    ScheduledValue,
    Space,
    ode_step,
    reverse_sde_step,
    wrap_angles,
)
from .targets import MixtureTarget, gmm_score_t, mixture_score, wrapped_mixture_score_t


class Mode(str, Enum):
    SDE = "sde"
    ODE = "ode"


@dataclass(frozen=True)
class GuidanceConfig:
    """Step count, integrator family, and the two drift-weight schedules.

    `langevin_weight` scales the stochastic corrector part of the split
    reverse step, `guidance_weight` the coupling drift.  Both follow the
    log-interpolated two-endpoint schedule; exact zero disables a part.
    """

    steps: int = 100
    mode: Mode = Mode.SDE
    langevin_weight: ScheduledValue = field(default_factory=lambda: ScheduledValue.constant(1.0))
    guidance_weight: ScheduledValue = field(default_factory=lambda: ScheduledValue.constant(1.0))
    integrator: str = "euler"
    truncation: int = 3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "langevin_weight", ScheduledValue.of(self.langevin_weight))
        object.__setattr__(self, "guidance_weight", ScheduledValue.of(self.guidance_weight))
        if self.integrator not in ("euler", "heun"):
            raise ValueError(f"unknown integrator {self.integrator!r}")


def target_score(target: MixtureTarget, x, t, schedule, truncation: int = 3):
    """Score of the time-t noised target in its own geometry."""
    if target.space is Space.TORUS:
        return wrapped_mixture_score_t(target, x, t, schedule, truncation)
    return gmm_score_t(target, x, t, schedule)


def _check_finite(arr, step: int, label: str):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {label} at step {step}")


def _draw_prior(gen, space: Space, shape, sigma_max: float):
    if space is Space.TORUS:
        return wrap_angles(gen.uniform(-math.pi, math.pi, size=shape))
    return sigma_max * gen.standard_normal(shape)


def _sde_sweep(target, coords, guidance_fn, config, schedule, noise, space):
    """Run the reverse SDE over the full time grid; noise is (steps, ..., d)."""
    times = schedule.time_grid(config.steps)
    horizon = schedule.horizon
    for k in range(config.steps):
        t = float(times[k])
        dt = t - float(times[k + 1])
        score = target_score(target, coords, t, schedule, config.truncation)
        gw = config.guidance_weight.at(t, horizon)
        guid = None
        if guidance_fn is not None and gw != 0.0:
            guid = guidance_fn(coords, t)
        lw = config.langevin_weight.at(t, horizon)
        coords = reverse_sde_step(coords, score, guid, t, dt, schedule, noise[k],
                                  langevin_weight=lw, guidance_weight=gw, space=space)
    return coords


def _ode_sweep(target, coords, guidance_fn, config, schedule, space):
    times = schedule.time_grid(config.steps)
    horizon = schedule.horizon

    def rhs(c, tt):
        g2 = schedule.g2(tt)
        v = (0.5 * g2) * target_score(target, c, tt, schedule, config.truncation)
        if guidance_fn is not None:
            gw = config.guidance_weight.at(tt, horizon)
            if gw != 0.0:
                v = v + (0.5 * gw * g2) * guidance_fn(c, tt)
        return v

    for k in range(config.steps):
        t = float(times[k])
        coords = ode_step(coords, rhs, t, t - float(times[k + 1]),
                          method=config.integrator, space=space)
    return coords


def _run_joint(target, guidance_fn, n, config, schedule, rng, initial=None):
    """Shared engine: per-particle streams, then one joint reverse sweep."""
    if n < 1:
        raise ValueError("need at least one particle")
    space = target.space
    need_noise = config.mode is Mode.SDE
    priors = np.empty((n, target.d))
    noise = np.empty((config.steps, n, target.d)) if need_noise else None
    for i in range(n):
        gen = rng.child(i).generator()
        priors[i] = _draw_prior(gen, space, target.d, schedule.sigma_max)
        if need_noise:
            noise[:, i, :] = gen.standard_normal((config.steps, target.d))
    coords = priors if initial is None else np.array(initial, dtype=float)
    if coords.shape != (n, target.d):
        raise ValueError(f"initial coordinates must have shape {(n, target.d)}")
    if space is Space.TORUS:
        coords = wrap_angles(coords)
    if need_noise:
        coords = _sde_sweep(target, coords, guidance_fn, config, schedule, noise, space)
    else:
        coords = _ode_sweep(target, coords, guidance_fn, config, schedule, space)
    _check_finite(coords, config.steps, "coordinates")
    return ParticleSet(coords, space, 0.0)


def potential_guidance(spec: PotentialSpec, schedule: NoiseSchedule, *,
                       target: MixtureTarget | None = None,
                       features: str = "state"):
    """Guidance callback evaluating the fixed potential's gradient.

    With features="denoised" the kernel forces are computed between the
    posterior-mean predictions x + sigma^2(t) * score(x, t) rather than the
    raw states, and applied to the states as-is; the prediction Jacobian is
    deliberately not unrolled.  Early in the reverse pass this couples
    particles by where they are headed instead of where the noise put them,
    which is what lets a Euclidean kernel separate samples whose distance
    is dominated by noise radius.  Needs `target` for its score.
    """
    if features == "state":

        def fn(coords, t):
            return potential_gradient(spec, coords, t, schedule).grad

        return fn
    if features != "denoised":
        raise ValueError(f"unknown guidance features {features!r}")
    if target is None:
        raise ValueError("denoised features need the target for its score")

    def fn(coords, t):
        coords = np.asarray(coords, dtype=float)
        predicted = coords + schedule.sigma2(t) * target_score(
            target, coords, t, schedule)
        return potential_gradient(spec, predicted, t, schedule).grad

    return fn


def sample_iid(target: MixtureTarget, n: int, config: GuidanceConfig,
               schedule: NoiseSchedule, rng: RngStream, initial=None) -> ParticleSet:
    """n independent reverse-diffusion samples from the wide prior."""
    return _run_joint(target, None, n, config, schedule, rng, initial=initial)


def sample_pg(target: MixtureTarget, spec: PotentialSpec, n: int, config: GuidanceConfig,
              schedule: NoiseSchedule, rng: RngStream, initial=None) -> ParticleSet:
    """Joint reverse diffusion of n particles coupled by the fixed potential."""
    return _run_joint(target, potential_guidance(spec, schedule), n, config,
                      schedule, rng, initial=initial)


def sample_batch(target: MixtureTarget, n: int, trials: int, config: GuidanceConfig,
                 schedule: NoiseSchedule, rng: RngStream, guidance_fn=None,
                 block_size: int = 4096, threads: int = 1, prior_fn=None) -> np.ndarray:
    """Many independent trials of the joint sampler, shape (trials, n, d).

    Trials are partitioned into fixed-size blocks; block b draws everything
    from `rng.child(b)` (priors first, then one noise slab per step), so the
    output is a pure function of (inputs, rng) regardless of `threads`.
    `guidance_fn` must accept batched coordinates (B, n, d).  `prior_fn`
    overrides the wide-Gaussian start: called as prior_fn(gen, count) it must
    return (count, n, d) initial coordinates drawn from that generator, and
    it is consumed before the per-step noise slabs.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    space = target.space
    starts = list(range(0, trials, block_size))

    def one_block(b):
        count = min(block_size, trials - starts[b])
        gen = rng.child(b).generator()
        if prior_fn is None:
            coords = _draw_prior(gen, space, (count, n, target.d), schedule.sigma_max)
        else:
            coords = np.asarray(prior_fn(gen, count), dtype=float)
            if coords.shape != (count, n, target.d):
                raise ValueError(f"prior_fn must return shape {(count, n, target.d)}")
            if space is Space.TORUS:
                coords = wrap_angles(coords)
        if config.mode is Mode.SDE:
            noise = gen.standard_normal((config.steps, count, n, target.d))
            coords = _sde_sweep(target, coords, guidance_fn, config, schedule, noise, space)
        else:
            coords = _ode_sweep(target, coords, guidance_fn, config, schedule, space)
        _check_finite(coords, config.steps, "coordinates")
        return coords

    return np.concatenate(map_blocks(one_block, len(starts), threads=threads), axis=0)


# ---------------------------------------------------------------------------
# Stein variational descent and the single-step bridge to guided flow
# ---------------------------------------------------------------------------

def svgd_run(target: MixtureTarget, n: int, iters: int, step_size: float,
             rng: RngStream, kernel: Kernel = Kernel.RBF, score_sigma: float = 0.02,
             anneal_from: float | None = None, init_scale: float = 3.0) -> ParticleSet:
    """Kernel-smoothed deterministic transport of n particles.

    Each iteration moves every particle by the step-size-scaled average of
    kernel-weighted scores and kernel gradients over the set, normalized by
    max(n-1, 1).  The analytic score is evaluated at a small fixed noise
    level `score_sigma` (the stiff raw target makes bare scores explode);
    `anneal_from` optionally decays that level geometrically from a larger
    start.  The bandwidth follows the running median rule.
    """
    if Kernel(kernel) is not Kernel.RBF:
        raise ValueError("only the rbf kernel is supported here")
    if target.space is not Space.EUCLIDEAN:
        raise ValueError("Stein descent runs on Euclidean targets only")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    coords = init_scale * rng.generator().standard_normal((n, target.d))
    norm = max(n - 1, 1)
    for it in range(iters):
        if anneal_from is None:
            sigma = score_sigma
        else:
            u = it / max(iters - 1, 1)
            sigma = anneal_from ** (1.0 - u) * score_sigma**u
        scores = mixture_score(target, coords, extra_var=sigma * sigma)
        if n >= 2:
            h = median_bandwidth(Kernel.RBF, coords)
            h = max(h, 1e-6)
        else:
            h = 1.0
        diff = coords[:, None, :] - coords[None, :, :]
        gram = np.exp(-np.sum(diff * diff, axis=-1) / h)
        drift = gram @ scores
        repulse = (2.0 / h) * (coords * np.sum(gram, axis=1)[:, None] - gram @ coords)
        coords = coords + (step_size / norm) * (drift + repulse)
        if not np.all(np.isfinite(coords)) or np.max(np.abs(coords)) > 1e8:
            raise FloatingPointError(f"particle norms exploded at iteration {it}")
    return ParticleSet(coords, Space.EUCLIDEAN, 0.0)


def svgd_equiv_pg_step(coords, target: MixtureTarget, bandwidth: float, t: float,
                       dt: float, schedule: NoiseSchedule):
    """One guided-flow step against its Stein-form approximation.

    The joint potential here is (sum over all ordered pairs of the rbf
    kernel) ** (-(n-1)/2).  The exact probability-flow step divides the
    summed kernel gradient by the full double sum; the Stein-form step
    divides by n times the local row sum S(x_i) instead, which is what the
    per-particle step size n g^2 dt / (2 S(x_i)) amounts to.  The two agree
    exactly when every row sum is equal (equidistant configurations) and
    the returned discrepancy is the largest coordinate gap between them.

    Returns (exact_coords, stein_coords, discrepancy).
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[0] < 2:
        raise ValueError("need an (n, d) set with n >= 2")
    if not bandwidth > 0.0:
        raise ValueError("bandwidth must be positive")
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    off = ~np.eye(n, dtype=bool)
    if np.any(sq[off] < 1e-24):
        raise ValueError("coincident particles: row sums give no direction")
    gram = np.exp(-sq / bandwidth)
    grad = (-2.0 / bandwidth) * diff * gram[..., None]
    grad_sum = np.sum(grad, axis=1)
    total = float(np.sum(gram))
    row = np.sum(gram, axis=1)
    score = gmm_score_t(target, coords, t, schedule)
    half = 0.5 * schedule.g2(t) * dt
    exact = coords + half * (score - (n - 1) * grad_sum / total)
    stein = coords + half * (score - (n - 1) * grad_sum / (n * row[:, None]))
    return exact, stein, float(np.max(np.abs(exact - stein)))


# ---------------------------------------------------------------------------
# Low-temperature hybrid integrator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LowTempConfig:
    """Sharpened reverse sampling: power >= 1 cools, churn adds extra noise.

    `data_scale` is the assumed scale of the clean data; the drift boost
    (data_scale + sigma_t) / (data_scale + sigma_t / power) interpolates
    between plain sampling at high noise and power-scaled drift at low
    noise.  power=1 with churn=0 reduces exactly to the unguided sampler.
    """

    power: float = 1.0
    churn: float = 0.0
    data_scale: float = 1.0

    def __post_init__(self):
        if self.power < 1.0:
            raise ValueError("power must be >= 1")
        if self.churn < 0.0:
            raise ValueError("churn must be >= 0")
        if self.data_scale <= 0.0:
            raise ValueError("data_scale must be positive")

    def drift_boost(self, t, schedule: NoiseSchedule) -> float:
        sigma_t = schedule.sigma(t)
        return (self.data_scale + sigma_t) / (self.data_scale + sigma_t / self.power)


def sample_low_temp(target: MixtureTarget, n: int, low_temp: LowTempConfig,
                    config: GuidanceConfig, schedule: NoiseSchedule,
                    rng: RngStream) -> ParticleSet:
    """n independent low-temperature trajectories (no particle coupling)."""
    if n < 1:
        raise ValueError("need at least one particle")
    if config.mode is not Mode.SDE:
        raise ValueError("the low-temperature integrator is stochastic; use sde mode")
    space = target.space
    priors = np.empty((n, target.d))
    noise = np.empty((config.steps, n, target.d))
    for i in range(n):
        gen = rng.child(i).generator()
        priors[i] = _draw_prior(gen, space, target.d, schedule.sigma_max)
        noise[:, i, :] = gen.standard_normal((config.steps, target.d))
    coords = priors
    times = schedule.time_grid(config.steps)
    for k in range(config.steps):
        t = float(times[k])
        dt = t - float(times[k + 1])
        g2 = schedule.g2(t)
        score = target_score(target, coords, t, schedule, config.truncation)
        _check_finite(score, k, "score")
        drift = ((low_temp.drift_boost(t, schedule)
                  + 0.5 * low_temp.power * low_temp.churn) * g2) * score
        coords = coords + drift * dt + math.sqrt((1.0 + low_temp.churn) * g2 * dt) * noise[k]
        if space is Space.TORUS:
            coords = wrap_angles(coords)
    return ParticleSet(coords, space, 0.0)


# ---------------------------------------------------------------------------
# Sequential sampling with deposited bias bumps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetaBias:
    """Gaussian bias bumps deposited at already-finalized samples.

    Each earlier sample adds a bump of the given height and width; the
    guidance gradient pushes the current trajectory away from them.  The
    collective variable is the identity map by default, or the angle about
    the origin ("angle", 2D Euclidean targets only).
    """

    height: float = 1.0
    width: float = 0.5
    collective: str = "identity"

    def __post_init__(self):
        if self.height < 0.0:
            raise ValueError("height must be >= 0")
        if self.width <= 0.0:
            raise ValueError("width must be positive")
        if self.collective not in ("identity", "angle"):
            raise ValueError(f"unknown collective variable {self.collective!r}")


def _bias_gradient(bias: MetaBias, coords, finalized, space: Space):
    """Gradient of -height * sum_j bump(x - x_j) at batched coords (..., d).

    `finalized` is (m, d) for one shared history or (..., m, d) for one
    history per batch row.
    """
    coords = np.asarray(coords, dtype=float)
    w2 = bias.width * bias.width
    if bias.collective == "angle":
        if coords.shape[-1] != 2:
            raise ValueError("the angle collective variable needs 2D points")
        r_sq = np.sum(coords * coords, axis=-1)
        theta = np.arctan2(coords[..., 1], coords[..., 0])
        theta_done = np.arctan2(finalized[..., 1], finalized[..., 0])
        dth = wrap_angles(theta[..., None] - theta_done)
        bump = np.exp(-dth * dth / (2.0 * w2))
        scalar = (bias.height / w2) * np.sum(bump * dth, axis=-1)
        grad_theta = np.stack([-coords[..., 1], coords[..., 0]], axis=-1) / r_sq[..., None]
        return scalar[..., None] * grad_theta
    diff = coords[..., None, :] - finalized
    if space is Space.TORUS:
        diff = wrap_angles(diff)
    bump = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * w2))
    return (bias.height / w2) * np.einsum("...j,...jd->...d", bump, diff)


def sample_metadynamics_seq(target: MixtureTarget, bias: MetaBias, n: int,
                            config: GuidanceConfig, schedule: NoiseSchedule,
                            rng: RngStream) -> ParticleSet:
    """Samples drawn one at a time, each repelled by all earlier ones.

    Sample k consumes exactly the stream an unguided run would give its
    k-th particle, so zero bump height reproduces that run bitwise.
    """
    done = np.empty((0, target.d))
    for k in range(n):
        if bias.height == 0.0 or k == 0:
            fn = None
        else:
            finalized = done.copy()

            def fn(c, t, _f=finalized):
                return _bias_gradient(bias, c, _f, target.space)

        one = _run_joint(target, fn, 1, config, schedule, rng.child(k))
        done = np.concatenate([done, one.coords], axis=0)
    return ParticleSet(done, target.space, 0.0)


def sample_metadynamics_batch(target: MixtureTarget, bias: MetaBias, n: int,
                              trials: int, config: GuidanceConfig,
                              schedule: NoiseSchedule, rng: RngStream,
                              block_size: int = 4096, threads: int = 1) -> np.ndarray:
    """Many sequential-bias trials at once, shape (trials, n, d).

    Block b owns `rng.child(b)` and draws, per sample index k, the block's
    priors and noise slabs in trial order, so results do not depend on the
    worker count.
    """
    if config.mode is not Mode.SDE:
        raise ValueError("sequential bias sampling is stochastic; use sde mode")
    space = target.space
    starts = list(range(0, trials, block_size))

    def one_block(b):
        count = min(block_size, trials - starts[b])
        gen = rng.child(b).generator()
        done = np.empty((count, 0, target.d))
        for k in range(n):
            coords = _draw_prior(gen, space, (count, 1, target.d), schedule.sigma_max)
            noise = gen.standard_normal((config.steps, count, 1, target.d))
            if bias.height == 0.0 or k == 0:
                fn = None
            else:
                def fn(c, t, _hist=done):
                    # c is (count, 1, d); repel each trial from its own history.
                    return _bias_gradient(bias, c[:, 0, :], _hist, space)[:, None, :]

            coords = _sde_sweep(target, coords, fn, config, schedule, noise, space)
            done = np.concatenate([done, coords], axis=1)
        return done

    return np.concatenate(map_blocks(one_block, len(starts), threads=threads), axis=0)


# ---------------------------------------------------------------------------
# Electrostatic field following with mutual repulsion
# ---------------------------------------------------------------------------

def pfgm_guided_ode(dataset, aug_dim: int, n: int, steps: int, rng: RngStream,
                    repulsion: bool = True, r_max: float | None = None,
                    r_min: float = 1e-3) -> ParticleSet:
    """Follow the dataset's inverse-power field down the anchor coordinate.

    Each point charge y_m attracts with (x - y_m) / (||x - y_m||^2 + r^2)
    to the power (N + D)/2; particles repel pairwise with the matching
    inverse-power law.  The anchor r shrinks geometrically from its shell
    value down to r_min, and particles start uniformly on that shell.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("dataset must be a non-empty (M, N) array")
    if aug_dim < 1 or steps < 1 or n < 1:
        raise ValueError("aug_dim, steps, and n must all be >= 1")
    dim = data.shape[1]
    power = 0.5 * (dim + aug_dim)
    if r_max is None:
        r_max = 3.0 * math.sqrt(aug_dim)
    coords = np.empty((n, dim))
    for i in range(n):
        raw = rng.child(i).generator().standard_normal(dim)
        coords[i] = (r_max / np.linalg.norm(raw)) * raw
    r_grid = r_max * (r_min / r_max) ** (np.arange(steps + 1) / steps)
    floored = False
    norm = max(n - 1, 1)
    for k in range(steps):
        r = r_grid[k]
        diff = coords[:, None, :] - data[None, :, :]
        inv = (np.sum(diff * diff, axis=-1) + r * r) ** (-power)
        attract = np.einsum("im,imd->id", inv, diff) / data.shape[0]
        anchor = r * np.mean(inv, axis=1)
        velocity = attract
        if repulsion and n >= 2:
            pair = coords[None, :, :] - coords[:, None, :]
            dist = np.linalg.norm(pair, axis=-1)
            if np.any(dist[~np.eye(n, dtype=bool)] < 1e-9):
                floored = True
            dist = np.maximum(dist, 1e-9)
            np.fill_diagonal(dist, np.inf)
            velocity = velocity + np.sum(pair / (dist ** (2.0 * power))[..., None], axis=1) / norm
        coords = coords + (velocity / anchor[:, None]) * (r_grid[k + 1] - r)
    if floored:
        warnings.warn("particle pair closer than 1e-9: repulsion distance floored",
                      RuntimeWarning, stacklevel=2)
    return ParticleSet(coords, Space.EUCLIDEAN, 0.0)

"""Analytic mixture targets with closed-form noised densities and scores.

Every target is a mixture of isotropic Gaussian components. Under the
variance-exploding corruption the time-t marginal stays a mixture of the
same means with component variance v_c + sigma(t)^2, so densities, scores,
and score divergences are available in closed form at every noise level.

On the flat torus the components are wrapped Gaussians; the isotropic
covariance factorizes over dimensions, so the wrapped sum over offsets
2*pi*k is evaluated per dimension with |k| <= truncation and multiplied,
never over the full offset lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .schedule import TWO_PI, NoiseSchedule, RngStream, Space, wrap_angles

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class MixtureTarget:
    """Mixture of isotropic Gaussian components (plain or wrapped)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    space: Space = Space.EUCLIDEAN

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if v.shape == (1,) and w.shape[0] > 1:
            v = np.full(w.shape[0], v[0])
        if mu.shape[0] != w.shape[0] or v.shape[0] != w.shape[0]:
            raise ValueError(
                f"component count mismatch: {w.shape[0]} weights, "
                f"{mu.shape[0]} means, {v.shape[0]} variances"
            )
        if np.any(w <= 0.0):
            raise ValueError("mixture weights must be positive")
        if abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")
        if np.any(v <= 0.0):
            raise ValueError("component variances must be positive")
        space = Space(self.space)
        if space is Space.TORUS:
            mu = wrap_angles(mu)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "space", space)

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]


def ring_mixture(num_modes: int = 10, radius: float = 1.0, variance: float = 0.005) -> MixtureTarget:
    """Equal-weight Gaussians equally spaced on a circle of the given radius."""
    if num_modes < 1:
        raise ValueError("num_modes must be >= 1")
    angles = TWO_PI * np.arange(num_modes) / num_modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    weights = np.full(num_modes, 1.0 / num_modes)
    return MixtureTarget(weights, means, np.full(num_modes, variance))


def hub_mixture(num_outer: int = 6, radius: float = 1.0, variance: float = 0.01,
                hub_weight: float = 4.0) -> MixtureTarget:
    """Gaussians on a circle plus one at the origin carrying extra weight.

    The origin component's weight is `hub_weight` times an outer one's, so
    the default reproduces a 40/10 percent split over seven modes.  The
    centre mode is listed first.
    """
    if num_outer < 1:
        raise ValueError("num_outer must be >= 1")
    if hub_weight <= 0.0:
        raise ValueError("hub_weight must be positive")
    angles = TWO_PI * np.arange(num_outer) / num_outer
    outer = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    means = np.concatenate([np.zeros((1, 2)), outer], axis=0)
    weights = np.full(num_outer + 1, 1.0 / (num_outer + hub_weight))
    weights[0] *= hub_weight
    return MixtureTarget(weights, means, np.full(num_outer + 1, variance))


def _check_space(target: MixtureTarget, expected: Space, op: str):
    if target.space is not expected:
        raise ValueError(f"{op} expects a {expected.value} target, got {target.space.value}")


def _component_logs(target: MixtureTarget, x, extra_var: float):
    """Per-component log densities log(w_c) + log N(x; mu_c, (v_c+extra) I).

    x has shape (..., d); the result has shape (..., C).  The working dtype
    follows float32 input (bulk path oracles run single precision); any
    other input computes in float64.
    """
    x = np.asarray(x)
    if x.dtype != np.float32:
        x = np.asarray(x, dtype=float)
    if x.shape[-1] != target.d:
        raise ValueError(f"point dimension {x.shape[-1]} != target dimension {target.d}")
    var = np.asarray(target.variances + extra_var, dtype=x.dtype)
    diff = x[..., None, :] - target.means.astype(x.dtype)
    sq = np.einsum("...cd,...cd->...c", diff, diff)
    logs = (
        np.log(target.weights.astype(x.dtype))
        - 0.5 * sq / var
        - 0.5 * target.d * np.log(TWO_PI * var)
    )
    return logs, diff, var


def _logsumexp(a, axis):
    hi = np.max(a, axis=axis, keepdims=True)
    out = hi + np.log(np.sum(np.exp(a - hi), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def mixture_log_density(target: MixtureTarget, x, extra_var: float = 0.0):
    """log p(x) of the mixture noised by an extra isotropic variance."""
    _check_space(target, Space.EUCLIDEAN, "mixture_log_density")
    logs, _, _ = _component_logs(target, x, extra_var)
    return _logsumexp(logs, axis=-1)


def mixture_density(target: MixtureTarget, x, extra_var: float = 0.0):
    return np.exp(mixture_log_density(target, x, extra_var))


def mixture_score(target: MixtureTarget, x, extra_var: float = 0.0):
    """Gradient of log density, responsibility-weighted over components."""
    _check_space(target, Space.EUCLIDEAN, "mixture_score")
    logs, diff, var = _component_logs(target, x, extra_var)
    resp = np.exp(logs - _logsumexp(logs, axis=-1)[..., None])
    return np.einsum("...c,...cd->...d", resp / var, -diff)

def mixture_score_div(target: MixtureTarget, x, extra_var: float = 0.0):
    """Divergence of the score (Laplacian of log p), needed by path oracles.

    With component scores s_c = -(x-mu_c)/var_c and responsibilities r_c,
    div grad log p = sum_c r_c (||s_c||^2 - d/var_c) - ||sum_c r_c s_c||^2.
    """
    _check_space(target, Space.EUCLIDEAN, "mixture_score_div")
    logs, diff, var = _component_logs(target, x, extra_var)
    resp = np.exp(logs - _logsumexp(logs, axis=-1)[..., None])
    comp_score = -diff / var[..., :, None]
    sq_norms = np.einsum("...cd,...cd->...c", comp_score, comp_score)
    mean_score = np.einsum("...c,...cd->...d", resp, comp_score)
    return (
        np.einsum("...c,...c->...", resp, sq_norms)
        - np.einsum("...d,...d->...", mean_score, mean_score)
        - target.d * np.einsum("...c,...c->...", resp, 1.0 / np.broadcast_to(var, resp.shape))
    )


def mixture_score_and_div(target: MixtureTarget, x, extra_var: float = 0.0):
    """Score and its divergence from one shared responsibility pass.

    Path-integral oracles evaluate both at every step of every path; fusing
    them halves the exponential work against calling `mixture_score` and
    `mixture_score_div` separately.
    """
    _check_space(target, Space.EUCLIDEAN, "mixture_score_and_div")
    logs, diff, var = _component_logs(target, x, extra_var)
    resp = np.exp(logs - _logsumexp(logs, axis=-1)[..., None])
    comp_score = -diff / var[..., :, None]
    score = np.einsum("...c,...cd->...d", resp, comp_score)
    sq_norms = np.einsum("...cd,...cd->...c", comp_score, comp_score)
    div = (
        np.einsum("...c,...c->...", resp, sq_norms)
        - np.einsum("...d,...d->...", score, score)
        - target.d * np.einsum("...c,...c->...", resp, 1.0 / np.broadcast_to(var, resp.shape))
    )
    return score, div


def gmm_density_t(target: MixtureTarget, x, t: float, schedule: NoiseSchedule):
    """Density of the time-t noised mixture (variance v_c + sigma(t)^2)."""
    return mixture_density(target, x, schedule.sigma2(t))


def gmm_score_t(target: MixtureTarget, x, t: float, schedule: NoiseSchedule):
    """Score of the time-t noised mixture."""
    return mixture_score(target, x, schedule.sigma2(t))


# ---------------------------------------------------------------------------
# Wrapped (torus) mixtures
# ---------------------------------------------------------------------------

def _wrapped_dim_terms(target: MixtureTarget, x, extra_var: float, truncation: int):
    """Log wrapped-normal factors per (component, dimension) and their score.

    Returns (log_factors, dim_scores) with shapes (..., C, d). The isotropic
    wrapped Gaussian factorizes over dimensions, so each factor is a 1D sum
    over offsets 2*pi*k, |k| <= truncation.
    """
    if truncation < 0:
        raise ValueError("truncation must be >= 0")
    x = wrap_angles(np.asarray(x, dtype=float))
    if x.shape[-1] != target.d:
        raise ValueError(f"point dimension {x.shape[-1]} != target dimension {target.d}")
    var = (target.variances + extra_var)[:, None]
    delta = wrap_angles(x[..., None, :] - target.means)
    offsets = TWO_PI * np.arange(-truncation, truncation + 1)
    z = delta[..., None] + offsets
    logs_k = -0.5 * z * z / var[..., None] - 0.5 * np.log(TWO_PI * var[..., None])
    hi = np.max(logs_k, axis=-1, keepdims=True)
    w_k = np.exp(logs_k - hi)
    norm = np.sum(w_k, axis=-1)
    log_factors = np.squeeze(hi, axis=-1) + np.log(norm)
    dim_scores = np.sum(w_k * (-z / var[..., None]), axis=-1) / norm
    return log_factors, dim_scores


def wrapped_log_density(target: MixtureTarget, x, extra_var: float = 0.0, truncation: int = 3):
    _check_space(target, Space.TORUS, "wrapped_log_density")
    log_factors, _ = _wrapped_dim_terms(target, x, extra_var, truncation)
    comp_logs = np.log(target.weights) + np.sum(log_factors, axis=-1)
    return _logsumexp(comp_logs, axis=-1)


def wrapped_density(target: MixtureTarget, x, extra_var: float = 0.0, truncation: int = 3):
    return np.exp(wrapped_log_density(target, x, extra_var, truncation))


def wrapped_score(target: MixtureTarget, x, extra_var: float = 0.0, truncation: int = 3):
    _check_space(target, Space.TORUS, "wrapped_score")
    log_factors, dim_scores = _wrapped_dim_terms(target, x, extra_var, truncation)
    comp_logs = np.log(target.weights) + np.sum(log_factors, axis=-1)
    resp = np.exp(comp_logs - _logsumexp(comp_logs, axis=-1)[..., None])
    return np.einsum("...c,...cd->...d", resp, dim_scores)


def wrapped_mixture_score_t(
    target: MixtureTarget, x, t: float, schedule: NoiseSchedule, truncation: int = 3
):
    """Score of the time-t wrapped mixture, periodic by construction."""
    return wrapped_score(target, x, schedule.sigma2(t), truncation)


def sample_target(target: MixtureTarget, count: int, rng: RngStream) -> np.ndarray:
    """Exact i.i.d. draws from the clean mixture, shape (count, d)."""
    return draw_mixture(target, rng.generator(), (count,))


def draw_mixture(target: MixtureTarget, gen: np.random.Generator, shape,
                 extra_var: float = 0.0) -> np.ndarray:
    """Exact mixture draws with a caller-owned generator, shape (*shape, d).

    `extra_var` adds isotropic noise variance to every component, giving
    exact samples from the time-t corrupted marginal; batch runners use it
    to start reverse sweeps from the analytic terminal law instead of the
    wide Gaussian stand-in.
    """
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    comp = gen.choice(target.num_components, size=shape, p=target.weights)
    eps = gen.standard_normal(shape + (target.d,))
    std = np.sqrt(target.variances[comp] + extra_var)
    out = target.means[comp] + std[..., None] * eps
    if target.space is Space.TORUS:
        out = wrap_angles(out)
    return out


def mixture_box_masses(target: MixtureTarget, edges_per_axis) -> np.ndarray:
    """Exact cell probabilities of a Euclidean mixture on an axis grid.

    `edges_per_axis` gives one increasing edge array per dimension; the
    result has shape (len(e)-1 for each axis). Isotropic components
    factorize, so each cell mass is a product of 1D erf differences.
    """
    if target.space is not Space.EUCLIDEAN:
        raise ValueError("box masses need a Euclidean target")
    edges = [np.asarray(e, dtype=float) for e in edges_per_axis]
    if len(edges) != target.d:
        raise ValueError(f"need {target.d} edge arrays, got {len(edges)}")
    for e in edges:
        if e.ndim != 1 or e.shape[0] < 2 or np.any(np.diff(e) <= 0.0):
            raise ValueError("each edge array must be increasing with >= 2 entries")
    shape = tuple(e.shape[0] - 1 for e in edges)
    out = np.zeros(shape)
    for w, mu, v in zip(target.weights, target.means, target.variances):
        scale = math.sqrt(2.0 * v)
        term = np.array(w)
        for e, m in zip(edges, mu):
            cdf = special.erf((e - m) / scale)
            term = np.multiply.outer(term, 0.5 * (cdf[1:] - cdf[:-1]))
        out += term
    return out

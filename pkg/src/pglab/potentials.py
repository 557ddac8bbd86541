"""Pairwise similarity kernels and the fixed repulsive joint potential.

The joint log potential over a particle set x_1..x_n is

    log_potential = -(strength_t / 2) * sum_{i != j} k(x_i, x_j; bandwidth_t)

optionally divided by n (``normalization="over_n"``).  Self pairs are
omitted: every kernel here has k(x, x) constant, so they would shift the
log value without changing any gradient.  The per-particle guidance is the
exact gradient of that scalar, assembled from both argument slots so that
asymmetric kernels (a permutation set that is not closed under inverses)
stay consistent with finite differences.

Kernels, all with bandwidth h > 0:

    rbf         exp(-||x - y||^2 / h)
    radial      exp(-dtheta^2 / h), dtheta the wrapped difference of the
                angles of x and y about the origin (2D points only)
    torus_rbf   exp(-||wrap(x - y)||^2 / h), componentwise wrap to (-pi, pi]
    perm_torus  min over a supplied set of coordinate permutations applied
                to the second argument of the torus_rbf kernel

Bandwidth rules: ``sigma_sq`` takes the squared schedule noise level at t,
``median_heuristic`` takes (median pairwise distance)^2 / log(n) with the
lower median and the kernel's own metric, ``fixed`` takes a constant.
Strength follows the log-interpolated two-endpoint schedule, with the exact
constant zero allowed as a special case.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .schedule import NoiseSchedule, ScheduledValue, wrap_angles

ORIGIN_EPS = 1e-12
BANDWIDTH_FLOOR = 1e-6


class Kernel(str, Enum):
    RBF = "rbf"
    RADIAL = "radial"
    TORUS = "torus_rbf"
    PERM_TORUS = "perm_torus"


class BandwidthRule(str, Enum):
    SIGMA_SQ = "sigma_sq"
    MEDIAN = "median_heuristic"
    FIXED = "fixed"


class Normalization(str, Enum):
    NONE = "none"
    OVER_N = "over_n"


def _as_float(a) -> np.ndarray:
    """Pass float32 through; coerce everything else to float64."""
    a = np.asarray(a)
    return a if a.dtype == np.float32 else np.asarray(a, dtype=float)


def _check_bandwidth(bandwidth: float) -> float:
    bandwidth = float(bandwidth)
    if not bandwidth > 0.0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    return bandwidth


def rbf_kernel(x, y, bandwidth):
    """Gaussian kernel on Euclidean points, batched over leading axes.

    Returns (value, grad_x) with value shaped like the broadcast batch and
    grad_x carrying the trailing coordinate axis.
    """
    bandwidth = _check_bandwidth(bandwidth)
    diff = _as_float(x) - _as_float(y)
    value = np.exp(-np.sum(diff * diff, axis=-1) / bandwidth)
    grad_x = (-2.0 / bandwidth) * diff * value[..., None]
    return value, grad_x


def torus_kernel(x, y, bandwidth):
    """Gaussian kernel on the componentwise wrapped difference of two angles."""
    bandwidth = _check_bandwidth(bandwidth)
    diff = wrap_angles(_as_float(x) - _as_float(y))
    value = np.exp(-np.sum(diff * diff, axis=-1) / bandwidth)
    grad_x = (-2.0 / bandwidth) * diff * value[..., None]
    return value, grad_x


def _angles(points):
    points = _as_float(points)
    if points.shape[-1] != 2:
        raise ValueError("the radial kernel needs 2D points")
    r_sq = np.sum(points * points, axis=-1)
    if np.any(r_sq < ORIGIN_EPS * ORIGIN_EPS):
        raise ValueError("particle at the origin: angle about the origin undefined")
    theta = np.arctan2(points[..., 1], points[..., 0])
    # Gradient of the angle w.r.t. the point, rows (-y, x) / r^2.
    grad_theta = np.stack([-points[..., 1], points[..., 0]], axis=-1) / r_sq[..., None]
    return theta, grad_theta, r_sq


def radial_kernel(x, y, bandwidth):
    """Gaussian kernel on the wrapped angle difference about the origin (2D)."""
    bandwidth = _check_bandwidth(bandwidth)
    theta_x, grad_theta_x, _ = _angles(x)
    theta_y, _, _ = _angles(y)
    dtheta = wrap_angles(theta_x - theta_y)
    value = np.exp(-dtheta * dtheta / bandwidth)
    grad_x = ((-2.0 / bandwidth) * dtheta * value)[..., None] * grad_theta_x
    return value, grad_x


def check_perms(perms, dim: int) -> np.ndarray:
    """Validate a permutation set: non-empty, valid rows, identity present."""
    arr = np.asarray(perms, dtype=int)
    if arr.size == 0:
        raise ValueError("permutation set is empty")
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"permutations must be rows of length {dim}")
    expected = np.arange(dim)
    for row in arr:
        if not np.array_equal(np.sort(row), expected):
            raise ValueError(f"not a permutation of 0..{dim - 1}: {row.tolist()}")
    if not np.any(np.all(arr == expected, axis=1)):
        raise ValueError("permutation set must contain the identity")
    return arr


def subsample_perms(perms, cap: int, seed: int = 0) -> np.ndarray:
    """Deterministically keep at most `cap` permutations, identity always kept.

    Selection is uniform without replacement, seeded; surviving rows keep
    their original relative order so the lowest-index tie break is stable.
    """
    arr = np.asarray(perms, dtype=int)
    if len(arr) <= cap:
        return arr
    if cap < 1:
        raise ValueError("perm_cap must be at least 1")
    identity = np.arange(arr.shape[1])
    id_pos = int(np.flatnonzero(np.all(arr == identity, axis=1))[0])
    others = np.array([i for i in range(len(arr)) if i != id_pos])
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    chosen = gen.choice(others, size=cap - 1, replace=False)
    keep = np.sort(np.concatenate([[id_pos], chosen]))
    return arr[keep]


def _perm_pieces(x, y, perms, bandwidth):
    """Minimizing-permutation value and wrapped difference for batched pairs.

    Returns (value, diff, sel_perm): the kernel value, the wrapped difference
    x - P y under the minimizing permutation, and that permutation's rows.
    Ties go to the lowest index in `perms` (first minimum).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    perms = np.asarray(perms, dtype=int)
    # diffs: (P, ..., d) wrapped differences for every candidate permutation;
    # y[..., perms] puts the permutation axis next to last, move it in front.
    diffs = wrap_angles(x[None, ...] - np.moveaxis(y[..., perms], -2, 0))
    sq = np.sum(diffs * diffs, axis=-1)
    # min of exp(-sq/h) is the max of sq; argmax picks the first (lowest index).
    idx = np.argmax(sq, axis=0)
    sq_min = np.take_along_axis(sq, idx[None, ...], axis=0)[0]
    diff = np.take_along_axis(diffs, idx[None, ..., None], axis=0)[0]
    value = np.exp(-sq_min / bandwidth)
    return value, diff, perms[idx]


def perm_invariant_kernel(x, y, perms, bandwidth):
    """Minimum of the torus kernel over coordinate permutations of `y`.

    Returns (value, grad_x) of the minimizing branch; ties break to the
    lowest permutation index for deterministic gradients.
    """
    bandwidth = _check_bandwidth(bandwidth)
    perms = check_perms(perms, np.asarray(x).shape[-1])
    value, diff, _ = _perm_pieces(x, y, perms, bandwidth)
    grad_x = (-2.0 / bandwidth) * diff * value[..., None]
    return value, grad_x


def _pair_eval(kernel: Kernel, x, y, bandwidth, perms=None):
    """(value, grad_x, grad_y, lap_x, lap_y) for batched ordered pairs.

    Laplacians are w.r.t. the full first (resp. second) argument and feed the
    path-integral density oracle.
    """
    d = np.asarray(x).shape[-1]
    if kernel is Kernel.RBF or kernel is Kernel.TORUS:
        if kernel is Kernel.RBF:
            value, grad_x = rbf_kernel(x, y, bandwidth)
            diff = _as_float(x) - _as_float(y)
        else:
            value, grad_x = torus_kernel(x, y, bandwidth)
            diff = wrap_angles(_as_float(x) - _as_float(y))
        sq = np.sum(diff * diff, axis=-1)
        lap = (-2.0 * d / bandwidth + 4.0 * sq / bandwidth**2) * value
        return value, grad_x, -grad_x, lap, lap
    if kernel is Kernel.RADIAL:
        value, grad_x = radial_kernel(x, y, bandwidth)
        theta_x, _, r_sq_x = _angles(x)
        theta_y, grad_theta_y, r_sq_y = _angles(y)
        dtheta = wrap_angles(theta_x - theta_y)
        grad_y = ((2.0 / bandwidth) * dtheta * value)[..., None] * grad_theta_y
        # The angle map is harmonic away from the origin, so the Laplacian is
        # the 1D second derivative in the angle over the squared radius.
        second = (4.0 * dtheta * dtheta / bandwidth**2 - 2.0 / bandwidth) * value
        return value, grad_x, grad_y, second / r_sq_x, second / r_sq_y
    if kernel is Kernel.PERM_TORUS:
        if perms is None:
            raise ValueError("perm_torus kernel needs a permutation set")
        value, diff, sel = _perm_pieces(x, y, perms, bandwidth)
        grad_x = (-2.0 / bandwidth) * diff * value[..., None]
        grad_perm_y = -grad_x
        grad_y = np.zeros_like(grad_perm_y)
        np.put_along_axis(grad_y, sel, grad_perm_y, axis=-1)
        sq = np.sum(diff * diff, axis=-1)
        lap = (-2.0 * d / bandwidth + 4.0 * sq / bandwidth**2) * value
        return value, grad_x, grad_y, lap, lap
    raise ValueError(f"unknown kernel {kernel!r}")


def pairwise_metric_distances(kernel: Kernel, coords) -> np.ndarray:
    """Distinct pairwise distances in the kernel's own metric, n*(n-1)/2 values."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    iu = np.triu_indices(n, k=1)
    a, b = coords[iu[0]], coords[iu[1]]
    if kernel is Kernel.RBF:
        return np.linalg.norm(a - b, axis=-1)
    if kernel is Kernel.RADIAL:
        theta_a, _, _ = _angles(a)
        theta_b, _, _ = _angles(b)
        return np.abs(wrap_angles(theta_a - theta_b))
    # Both torus kernels measure scale on the plain wrapped difference.
    return np.linalg.norm(wrap_angles(a - b), axis=-1)


def median_bandwidth(kernel: Kernel, coords) -> float:
    """(lower median pairwise distance)^2 / log(n); raises for n < 2.

    Returns 0.0 for fully coincident particles; callers floor and flag.
    The rule is per particle set: batched coordinate stacks must use the
    sigma_sq or fixed rule instead.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2:
        raise ValueError("median bandwidth is defined per particle set, not batched")
    n = coords.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two particles")
    dists = np.sort(pairwise_metric_distances(kernel, coords))
    med = float(dists[(len(dists) - 1) // 2])
    return med * med / math.log(n)


@dataclass(frozen=True)
class PotentialSpec:
    """Fixed joint potential: kernel kind, strength schedule, bandwidth rule.

    `strength` accepts a scalar, a (value at t=0, value at t=horizon) pair
    interpolated log-linearly in t, or a ScheduledValue.  `perms` is
    required for the perm_torus kernel and is capped to `perm_cap` rows by
    a seeded deterministic subsample.
    """

    kernel: Kernel = Kernel.RBF
    strength: ScheduledValue = field(default_factory=lambda: ScheduledValue.constant(1.0))
    bandwidth_rule: BandwidthRule = BandwidthRule.SIGMA_SQ
    bandwidth_value: float = 1.0
    normalization: Normalization = Normalization.NONE
    perms: tuple | None = None
    perm_cap: int = 32
    perm_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel", Kernel(self.kernel))
        object.__setattr__(self, "bandwidth_rule", BandwidthRule(self.bandwidth_rule))
        object.__setattr__(self, "normalization", Normalization(self.normalization))
        object.__setattr__(self, "strength", ScheduledValue.of(self.strength))
        if self.bandwidth_rule is BandwidthRule.FIXED:
            _check_bandwidth(self.bandwidth_value)
        if self.kernel is Kernel.PERM_TORUS:
            if self.perms is None:
                raise ValueError("perm_torus kernel needs perms")
            arr = check_perms(self.perms, len(self.perms[0]))
            arr = subsample_perms(arr, self.perm_cap, self.perm_seed)
            object.__setattr__(self, "perms", tuple(tuple(int(v) for v in row) for row in arr))
        elif self.perms is not None:
            raise ValueError("perms only apply to the perm_torus kernel")

    def strength_at(self, t: float, schedule: NoiseSchedule) -> float:
        return self.strength.at(t, schedule.horizon)

    def perm_array(self) -> np.ndarray | None:
        return None if self.perms is None else np.asarray(self.perms, dtype=int)


def bandwidth(rule: BandwidthRule, coords, t, schedule: NoiseSchedule,
              fixed_value: float = 1.0, kernel: Kernel = Kernel.RBF) -> float:
    """Bandwidth per rule; may be 0 for coincident particles under the median."""
    rule = BandwidthRule(rule)
    if rule is BandwidthRule.FIXED:
        return _check_bandwidth(fixed_value)
    if rule is BandwidthRule.SIGMA_SQ:
        return float(schedule.sigma2(t))
    return median_bandwidth(kernel, coords)


@dataclass(frozen=True)
class PotentialGradient:
    """Guidance gradient rows with the resolved schedule values.

    `floored` flags a degenerate bandwidth that was clamped to the floor.
    """

    grad: np.ndarray
    bandwidth: float
    strength: float
    floored: bool = False


def _resolve_bandwidth(spec: PotentialSpec, coords, t, schedule,
                       override: float | None) -> tuple[float, bool]:
    if override is not None:
        return _check_bandwidth(override), False
    h = bandwidth(spec.bandwidth_rule, coords, t, schedule,
                  fixed_value=spec.bandwidth_value, kernel=spec.kernel)
    if h <= BANDWIDTH_FLOOR:
        warnings.warn("degenerate bandwidth clamped to floor", RuntimeWarning, stacklevel=3)
        return BANDWIDTH_FLOOR, True
    return h, False


def _pair_matrices(spec: PotentialSpec, coords, h):
    """Kernel value/gradient/Laplacian grids over ordered particle pairs.

    `coords` may carry leading batch axes: shape (..., n, d) gives grids
    shaped (..., n, n[, d]) plus the off-diagonal mask.  float32 input keeps
    float32 grids; anything else computes in float64.
    """
    coords = _as_float(coords)
    n = coords.shape[-2]
    xi = coords[..., :, None, :]
    xj = coords[..., None, :, :]
    value, g1, g2, l1, l2 = _pair_eval(spec.kernel, xi, xj, h, perms=spec.perm_array())
    off = ~np.eye(n, dtype=bool)
    return value, g1, g2, l1, l2, off


def _maybe_scalar(total, coords):
    return float(total) if coords.ndim == 2 else total


def log_potential(spec: PotentialSpec, coords, t, schedule: NoiseSchedule,
                  bandwidth_override: float | None = None):
    """-(strength_t/2) * sum over distinct ordered pairs of the kernel.

    Accepts a single (n, d) set (returns a float) or a batched (..., n, d)
    stack (returns an array over the batch axes, one bandwidth shared).
    """
    coords = _as_float(coords)
    n = coords.shape[-2]
    if n < 2:
        return _maybe_scalar(np.zeros(coords.shape[:-2]), coords)
    h, _ = _resolve_bandwidth(spec, coords, t, schedule, bandwidth_override)
    value, _, _, _, _, off = _pair_matrices(spec, coords, h)
    strength = spec.strength_at(t, schedule)
    total = -0.5 * strength * np.sum(value * off, axis=(-2, -1))
    if spec.normalization is Normalization.OVER_N:
        total = total / n
    return _maybe_scalar(total, coords)


def potential_gradient(spec: PotentialSpec, coords, t, schedule: NoiseSchedule,
                       bandwidth_override: float | None = None) -> PotentialGradient:
    """Rows of the exact gradient of `log_potential` w.r.t. each particle."""
    coords = _as_float(coords)
    n = coords.shape[-2]
    strength = spec.strength_at(t, schedule)
    if n < 2 or strength == 0.0:
        return PotentialGradient(np.zeros_like(coords), math.nan, strength)
    h, floored = _resolve_bandwidth(spec, coords, t, schedule, bandwidth_override)
    _, g1, g2, _, _, off = _pair_matrices(spec, coords, h)
    mask = off[..., None]
    # Particle i appears as the first argument along row i and as the second
    # argument along column i of the ordered-pair grid.
    grad = -0.5 * strength * (np.sum(g1 * mask, axis=-2) + np.sum(g2 * mask, axis=-3))
    if spec.normalization is Normalization.OVER_N:
        grad /= n
    return PotentialGradient(grad, h, strength, floored)


def log_potential_laplacian(spec: PotentialSpec, coords, t, schedule: NoiseSchedule,
                            bandwidth_override: float | None = None):
    """Sum over particles of the coordinate Laplacian of `log_potential`."""
    coords = _as_float(coords)
    n = coords.shape[-2]
    strength = spec.strength_at(t, schedule)
    if n < 2 or strength == 0.0:
        return _maybe_scalar(np.zeros(coords.shape[:-2]), coords)
    h, _ = _resolve_bandwidth(spec, coords, t, schedule, bandwidth_override)
    _, _, _, l1, l2, off = _pair_matrices(spec, coords, h)
    total = -0.5 * strength * np.sum((l1 + l2) * off, axis=(-2, -1))
    if spec.normalization is Normalization.OVER_N:
        total = total / n
    return _maybe_scalar(total, coords)


@dataclass(frozen=True)
class PotentialTerms:
    """Gradient rows and full-configuration Laplacian from one pair pass."""

    grad: np.ndarray
    laplacian: np.ndarray | float
    bandwidth: float
    strength: float
    floored: bool = False


def potential_terms(spec: PotentialSpec, coords, t, schedule: NoiseSchedule,
                    bandwidth_override: float | None = None) -> PotentialTerms:
    """Gradient and Laplacian of `log_potential` sharing the kernel grids.

    Path-integral estimators need both at every step of every path; the
    fused evaluation costs one `_pair_matrices` pass instead of two.
    """
    coords = _as_float(coords)
    n = coords.shape[-2]
    strength = spec.strength_at(t, schedule)
    if n < 2 or strength == 0.0:
        zero_lap = _maybe_scalar(np.zeros(coords.shape[:-2]), coords)
        return PotentialTerms(np.zeros_like(coords), zero_lap, math.nan, strength)
    h, floored = _resolve_bandwidth(spec, coords, t, schedule, bandwidth_override)
    _, g1, g2, l1, l2, off = _pair_matrices(spec, coords, h)
    mask = off[..., None]
    grad = -0.5 * strength * (np.sum(g1 * mask, axis=-2) + np.sum(g2 * mask, axis=-3))
    lap = -0.5 * strength * np.sum((l1 + l2) * off, axis=(-2, -1))
    if spec.normalization is Normalization.OVER_N:
        grad /= n
        lap = lap / n
    return PotentialTerms(grad, _maybe_scalar(lap, coords), h, strength, floored)

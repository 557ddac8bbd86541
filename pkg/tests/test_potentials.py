import itertools
import math

import numpy as np
import pytest

from gradcheck import central_grad, central_laplacian, max_rel_err
from pglab.potentials import (
    BandwidthRule,
    Kernel,
    Normalization,
    PotentialSpec,
    bandwidth,
    check_perms,
    log_potential,
    log_potential_laplacian,
    median_bandwidth,
    pairwise_metric_distances,
    perm_invariant_kernel,
    potential_gradient,
    potential_terms,
    radial_kernel,
    rbf_kernel,
    subsample_perms,
    torus_kernel,
)
from pglab.samplers import svgd_equiv_pg_step
from pglab.schedule import NoiseSchedule, wrap_angles
from pglab.targets import MixtureTarget

SCHED = NoiseSchedule()
TRIMODAL_2D = MixtureTarget([0.2, 0.5, 0.3],
                            [[0.0, 0.0], [1.0, -0.5], [-0.8, 0.9]],
                            [0.05, 0.02, 0.08])
S3 = np.array(list(itertools.permutations(range(3))))


def _spec(kernel, strength=1.3, h=0.7, normalization="none", perms=None):
    return PotentialSpec(kernel=kernel, strength=(strength, strength),
                         bandwidth_rule=BandwidthRule.FIXED, bandwidth_value=h,
                         normalization=normalization, perms=perms)


def _coords_for(kernel, gen, n, tries=100):
    """Random particle sets kept away from each kernel's non-smooth sets."""
    for _ in range(tries):
        if kernel is Kernel.RBF:
            return gen.uniform(-2.0, 2.0, size=(n, int(gen.integers(1, 4))))
        if kernel in (Kernel.TORUS, Kernel.PERM_TORUS):
            c = gen.uniform(-3.0, 3.0, size=(n, 3 if kernel is Kernel.PERM_TORUS else 2))
            d = wrap_angles(c[:, None, :] - c[None, :, :])
            if np.all(np.abs(np.abs(d) - math.pi) > 0.05):
                return c
            continue
        c = gen.uniform(-2.0, 2.0, size=(n, 2))
        r = np.linalg.norm(c, axis=1)
        th = np.arctan2(c[:, 1], c[:, 0])
        dth = wrap_angles(th[:, None] - th[None, :])
        if np.all(r > 0.3) and np.all(np.abs(np.abs(dth) - math.pi) > 0.05):
            return c
    raise AssertionError("could not build a smooth configuration")


def test_rbf_kernel_formula_and_symmetry():
    gen = np.random.default_rng(0)
    x = gen.standard_normal((5, 2))
    y = gen.standard_normal((5, 2))
    v, gx = rbf_kernel(x, y, 0.9)
    np.testing.assert_allclose(
        v, np.exp(-np.sum((x - y) ** 2, axis=-1) / 0.9), rtol=1e-14)
    v2, gy = rbf_kernel(y, x, 0.9)
    np.testing.assert_array_equal(v, v2)
    np.testing.assert_array_equal(gx, -gy)
    np.testing.assert_allclose(rbf_kernel(x, x, 0.9)[0], 1.0)
    with pytest.raises(ValueError):
        rbf_kernel(x, y, 0.0)


def test_torus_kernel_min_image_and_period():
    x = np.array([[3.0, 0.0]])
    y = np.array([[-3.0, 0.0]])
    # Across the wrap the geodesic gap is 2*pi - 6, not 6.
    gap = 2.0 * math.pi - 6.0
    v, _ = torus_kernel(x, y, 1.1)
    assert v[0] == pytest.approx(math.exp(-gap**2 / 1.1), rel=1e-12)
    gen = np.random.default_rng(1)
    a = gen.uniform(-math.pi, math.pi, (8, 2))
    b = gen.uniform(-math.pi, math.pi, (8, 2))
    v0, g0 = torus_kernel(a, b, 0.8)
    v1, g1 = torus_kernel(a + 2.0 * math.pi, b - 4.0 * math.pi, 0.8)
    np.testing.assert_allclose(v1, v0, atol=1e-12)
    np.testing.assert_allclose(g1, g0, atol=1e-12)


def test_radial_kernel_angle_formula():
    x = np.array([[1.0, 0.0]])
    y = np.array([[0.0, 2.0]])  # quarter turn, radius must not matter
    v, _ = radial_kernel(x, y, 0.5)
    assert v[0] == pytest.approx(math.exp(-(math.pi / 2.0) ** 2 / 0.5), rel=1e-12)
    v_scaled, _ = radial_kernel(3.0 * x, 0.1 * y, 0.5)
    assert v_scaled[0] == pytest.approx(v[0], rel=1e-12)
    with pytest.raises(ValueError):
        radial_kernel(np.array([[0.0, 0.0]]), y, 0.5)


def test_perm_kernel_reduces_to_torus_under_identity():
    gen = np.random.default_rng(2)
    x = gen.uniform(-math.pi, math.pi, (6, 3))
    y = gen.uniform(-math.pi, math.pi, (6, 3))
    v_perm, g_perm = perm_invariant_kernel(x, y, np.arange(3)[None, :], 1.3)
    v_torus, g_torus = torus_kernel(x, y, 1.3)
    np.testing.assert_array_equal(v_perm, v_torus)
    np.testing.assert_array_equal(g_perm, g_torus)


def test_perm_kernel_group_invariance_exact():
    gen = np.random.default_rng(3)
    x = gen.uniform(-math.pi, math.pi, (10, 3))
    y = gen.uniform(-math.pi, math.pi, (10, 3))
    v0, _ = perm_invariant_kernel(x, y, S3, 0.9)
    for perm in S3:
        v1, _ = perm_invariant_kernel(x, y[:, perm], S3, 0.9)
        np.testing.assert_array_equal(v1, v0)


def test_perm_validation_and_subsample():
    with pytest.raises(ValueError):
        check_perms(np.zeros((0, 3), dtype=int), 3)
    with pytest.raises(ValueError):
        check_perms([[0, 1, 1]], 3)
    with pytest.raises(ValueError):
        check_perms([[1, 0, 2]], 3)  # identity missing
    kept = subsample_perms(S3, 4, seed=5)
    assert len(kept) == 4
    assert np.any(np.all(kept == np.arange(3), axis=1))
    np.testing.assert_array_equal(subsample_perms(S3, 4, seed=5), kept)
    np.testing.assert_array_equal(subsample_perms(S3, 10), S3)


def test_median_bandwidth_matches_hand_rule():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 3.0]])
    dists = []
    for i in range(4):
        for j in range(i + 1, 4):
            dists.append(np.linalg.norm(coords[i] - coords[j]))
    dists.sort()
    lower_median = dists[(len(dists) - 1) // 2]
    expect = lower_median**2 / math.log(4)
    assert median_bandwidth(Kernel.RBF, coords) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValueError):
        median_bandwidth(Kernel.RBF, np.zeros((2, 3, 2)))


def test_pairwise_metric_distances_radial_uses_angles():
    # Condensed upper-triangle order: (0,1), (0,2), (1,2).
    coords = np.array([[1.0, 0.0], [0.0, 3.0], [-2.0, 0.0]])
    d = pairwise_metric_distances(Kernel.RADIAL, coords)
    assert d.shape == (3,)
    assert d[0] == pytest.approx(math.pi / 2.0, rel=1e-12)
    assert d[1] == pytest.approx(math.pi, rel=1e-9)
    euc = pairwise_metric_distances(Kernel.RBF, coords)
    assert euc[0] == pytest.approx(math.sqrt(10.0), rel=1e-12)


@pytest.mark.parametrize("kernel", [Kernel.RBF, Kernel.TORUS, Kernel.RADIAL,
                                    Kernel.PERM_TORUS])
@pytest.mark.parametrize("seed", range(25))
def test_potential_gradient_matches_fd(kernel, seed):
    gen = np.random.default_rng(10_000 + seed)
    n = int(gen.integers(2, 6))
    coords = _coords_for(kernel, gen, n)
    perms = S3 if kernel is Kernel.PERM_TORUS else None
    spec = _spec(kernel, strength=float(gen.uniform(0.2, 4.0)),
                 h=float(gen.uniform(0.3, 2.0)), perms=perms)
    t = float(gen.uniform(0.0, 1.0))
    got = potential_gradient(spec, coords, t, SCHED).grad
    fd = central_grad(lambda c: float(log_potential(spec, c, t, SCHED)), coords)
    assert max_rel_err(got, fd, floor=1e-7) < 1e-5


@pytest.mark.parametrize("kernel", [Kernel.RBF, Kernel.TORUS, Kernel.RADIAL,
                                    Kernel.PERM_TORUS])
@pytest.mark.parametrize("seed", range(6))
def test_potential_laplacian_matches_fd(kernel, seed):
    gen = np.random.default_rng(20_000 + seed)
    coords = _coords_for(kernel, gen, 3)
    perms = S3 if kernel is Kernel.PERM_TORUS else None
    spec = _spec(kernel, strength=1.1, h=float(gen.uniform(0.5, 1.5)), perms=perms)
    got = log_potential_laplacian(spec, coords, 0.3, SCHED)
    fd = central_laplacian(lambda c: float(log_potential(spec, c, 0.3, SCHED)),
                           coords, eps=3e-5)
    assert got == pytest.approx(fd, rel=2e-5, abs=1e-7)


def test_potential_terms_consistent_with_parts():
    gen = np.random.default_rng(4)
    coords = gen.standard_normal((5, 2))
    spec = _spec(Kernel.RBF)
    terms = potential_terms(spec, coords, 0.5, SCHED)
    np.testing.assert_allclose(
        terms.grad, potential_gradient(spec, coords, 0.5, SCHED).grad,
        rtol=1e-13, atol=1e-15)
    assert terms.laplacian == pytest.approx(
        log_potential_laplacian(spec, coords, 0.5, SCHED), rel=1e-13)


def test_batched_evaluation_matches_loop():
    gen = np.random.default_rng(5)
    batch = gen.standard_normal((7, 4, 2))
    spec = _spec(Kernel.RBF, strength=2.0, h=0.6)
    vals = log_potential(spec, batch, 0.2, SCHED)
    grads = potential_gradient(spec, batch, 0.2, SCHED).grad
    for b in range(7):
        assert vals[b] == pytest.approx(
            float(log_potential(spec, batch[b], 0.2, SCHED)), rel=1e-13)
        np.testing.assert_allclose(
            grads[b], potential_gradient(spec, batch[b], 0.2, SCHED).grad,
            rtol=1e-13, atol=1e-15)


def test_strength_schedule_and_zero_reduction():
    spec = PotentialSpec(kernel=Kernel.RBF, strength=(2.0, 8.0),
                         bandwidth_rule=BandwidthRule.FIXED, bandwidth_value=1.0)
    assert spec.strength_at(0.0, SCHED) == pytest.approx(2.0, rel=1e-14)
    assert spec.strength_at(1.0, SCHED) == pytest.approx(8.0, rel=1e-14)
    assert spec.strength_at(0.5, SCHED) == pytest.approx(4.0, rel=1e-12)
    gen = np.random.default_rng(6)
    coords = gen.standard_normal((4, 2))
    off = _spec(Kernel.RBF, strength=0.0)
    np.testing.assert_array_equal(potential_gradient(off, coords, 0.5, SCHED).grad,
                                  np.zeros_like(coords))
    assert float(log_potential(off, coords, 0.5, SCHED)) == 0.0
    single = _spec(Kernel.RBF)
    np.testing.assert_array_equal(
        potential_gradient(single, coords[:1], 0.5, SCHED).grad, np.zeros((1, 2)))


def test_bandwidth_rules():
    gen = np.random.default_rng(7)
    coords = gen.standard_normal((5, 2))
    assert bandwidth(BandwidthRule.FIXED, coords, 0.4, SCHED, 0.37) == 0.37
    assert bandwidth(BandwidthRule.SIGMA_SQ, coords, 0.4, SCHED, 1.0) == \
        pytest.approx(SCHED.sigma2(0.4), rel=1e-12)
    assert bandwidth(BandwidthRule.MEDIAN, coords, 0.4, SCHED, 1.0) == \
        pytest.approx(median_bandwidth(Kernel.RBF, coords), rel=1e-12)


def test_normalization_over_n_scales_exactly():
    gen = np.random.default_rng(8)
    coords = gen.standard_normal((6, 2))
    plain = _spec(Kernel.RBF, strength=1.7, h=0.8)
    scaled = _spec(Kernel.RBF, strength=1.7, h=0.8, normalization="over_n")
    assert float(log_potential(scaled, coords, 0.3, SCHED)) == pytest.approx(
        float(log_potential(plain, coords, 0.3, SCHED)) / 6.0, rel=1e-14)
    np.testing.assert_allclose(
        potential_gradient(scaled, coords, 0.3, SCHED).grad,
        potential_gradient(plain, coords, 0.3, SCHED).grad / 6.0,
        rtol=1e-14)


# ---------------------------------------------------------------------------
# Exact identities behind the Stein-form equivalence
# ---------------------------------------------------------------------------

def _equidistant_configs():
    gen = np.random.default_rng(9)
    configs = []
    for _ in range(10):  # pairs are always equidistant
        configs.append(gen.uniform(-2.0, 2.0, size=(2, 2)))
    for m in (3, 4, 5, 6, 8):  # regular polygons: equal row sums by symmetry
        for _ in range(6):
            angle = gen.uniform(0.0, 2.0 * math.pi)
            scale = gen.uniform(0.4, 1.5)
            shift = gen.uniform(-1.0, 1.0, size=2)
            th = angle + 2.0 * math.pi * np.arange(m) / m
            configs.append(shift + scale * np.stack([np.cos(th), np.sin(th)], axis=1))
    return configs


def test_stein_form_matches_guided_flow_on_equidistant_sets():
    for coords in _equidistant_configs():
        _, _, gap = svgd_equiv_pg_step(coords, TRIMODAL_2D, 0.9, 0.5, 0.01, SCHED)
        assert gap < 1e-10


def test_stein_form_differs_on_scalene_sets():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.2, 1.6]])
    _, _, gap = svgd_equiv_pg_step(coords, TRIMODAL_2D, 0.9, 0.5, 0.01, SCHED)
    assert gap > 1e-6


def test_stein_form_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        svgd_equiv_pg_step(np.zeros((1, 2)), TRIMODAL_2D, 0.9, 0.5, 0.01, SCHED)
    with pytest.raises(ValueError):
        svgd_equiv_pg_step(np.zeros((3, 2)), TRIMODAL_2D, 0.9, 0.5, 0.01, SCHED)


@pytest.mark.parametrize("kernel", [Kernel.RBF, Kernel.TORUS, Kernel.PERM_TORUS])
@pytest.mark.parametrize("seed", range(34))
def test_pair_forces_sum_to_zero(kernel, seed):
    # Newton's-third-law form of the symmetric pair sum: the potential is
    # translation invariant, so the particle gradients cancel in total.
    gen = np.random.default_rng(30_000 + seed)
    n = int(gen.integers(2, 7))
    coords = _coords_for(kernel, gen, n)
    perms = S3 if kernel is Kernel.PERM_TORUS else None
    spec = _spec(kernel, strength=float(gen.uniform(0.2, 5.0)),
                 h=float(gen.uniform(0.3, 2.0)), perms=perms)
    grad = potential_gradient(spec, coords, 0.4, SCHED).grad
    scale = max(1.0, float(np.max(np.abs(grad))))
    assert np.max(np.abs(grad.sum(axis=0))) < 1e-12 * scale


@pytest.mark.parametrize("seed", range(100))
def test_radial_torque_sums_to_zero(seed):
    # The radial potential depends on angles alone, so the sum over
    # particles of the angular derivative (the torque) vanishes.
    gen = np.random.default_rng(40_000 + seed)
    n = int(gen.integers(2, 7))
    coords = _coords_for(Kernel.RADIAL, gen, n)
    spec = _spec(Kernel.RADIAL, strength=float(gen.uniform(0.2, 5.0)),
                 h=float(gen.uniform(0.3, 2.0)))
    grad = potential_gradient(spec, coords, 0.4, SCHED).grad
    torque = coords[:, 0] * grad[:, 1] - coords[:, 1] * grad[:, 0]
    scale = max(1.0, float(np.max(np.abs(grad))))
    assert abs(torque.sum()) < 1e-12 * scale

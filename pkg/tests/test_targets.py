import math

import numpy as np
import pytest

from gradcheck import central_grad, max_rel_err
from pglab.schedule import NoiseSchedule, RngStream, Space
from pglab.targets import (
    MixtureTarget,
    draw_mixture,
    gmm_density_t,
    gmm_score_t,
    hub_mixture,
    mixture_box_masses,
    mixture_density,
    mixture_log_density,
    mixture_score,
    mixture_score_and_div,
    mixture_score_div,
    ring_mixture,
    sample_target,
    wrapped_density,
    wrapped_log_density,
    wrapped_score,
)

BIMODAL = MixtureTarget([0.3, 0.7], [[-1.0], [1.5]], [0.04, 0.09])
TRIMODAL_2D = MixtureTarget([0.2, 0.5, 0.3],
                            [[0.0, 0.0], [1.0, -0.5], [-0.8, 0.9]],
                            [0.05, 0.02, 0.08])


def test_density_integrates_to_one_1d():
    xs = np.linspace(-6.0, 6.0, 20001)[:, None]
    dens = mixture_density(BIMODAL, xs)
    total = np.trapezoid(dens, xs[:, 0])
    assert total == pytest.approx(1.0, rel=1e-8)


def test_density_integrates_to_one_2d():
    axis = np.linspace(-4.0, 4.0, 401)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx, yy], axis=-1).reshape(-1, 2)
    dens = mixture_density(TRIMODAL_2D, pts).reshape(401, 401)
    total = np.trapezoid(np.trapezoid(dens, axis, axis=1), axis)
    assert total == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("seed", range(25))
def test_score_matches_log_density_gradient(seed):
    gen = np.random.default_rng(seed)
    x = gen.uniform(-2.0, 2.0, size=(4, 2))
    got = mixture_score(TRIMODAL_2D, x, extra_var=0.01)
    for i in range(4):
        fd = central_grad(
            lambda p: float(mixture_log_density(TRIMODAL_2D, p[None, :],
                                                extra_var=0.01)[0]),
            x[i])
        assert max_rel_err(got[i], fd, floor=1e-6) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_score_divergence_matches_fd(seed):
    gen = np.random.default_rng(100 + seed)
    x = gen.uniform(-2.0, 2.0, size=(3, 2))
    got = mixture_score_div(TRIMODAL_2D, x, extra_var=0.02)
    eps = 1e-5
    for i in range(3):
        fd = 0.0
        for j in range(2):
            xp = x[i].copy()
            xm = x[i].copy()
            xp[j] += eps
            xm[j] -= eps
            sp = mixture_score(TRIMODAL_2D, xp[None, :], extra_var=0.02)[0, j]
            sm = mixture_score(TRIMODAL_2D, xm[None, :], extra_var=0.02)[0, j]
            fd += (sp - sm) / (2.0 * eps)
        assert got[i] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_score_and_div_consistent_with_parts():
    gen = np.random.default_rng(3)
    x = gen.uniform(-1.5, 1.5, size=(6, 2))
    s, d = mixture_score_and_div(TRIMODAL_2D, x, extra_var=0.05)
    np.testing.assert_allclose(s, mixture_score(TRIMODAL_2D, x, extra_var=0.05),
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(d, mixture_score_div(TRIMODAL_2D, x, extra_var=0.05),
                               rtol=1e-12, atol=1e-12)


def test_time_t_density_is_gaussian_convolution():
    # Independent oracle: convolve p_0 with the perturbation kernel by
    # quadrature and compare at a handful of points.
    sched = NoiseSchedule()
    t = 0.55
    var = sched.sigma2(t)
    ys = np.linspace(-8.0, 8.0, 16001)
    p0 = mixture_density(BIMODAL, ys[:, None])
    for xq in (-1.3, 0.0, 0.4, 2.1):
        kernel = np.exp(-(xq - ys) ** 2 / (2.0 * var)) / math.sqrt(2.0 * math.pi * var)
        oracle = np.trapezoid(p0 * kernel, ys)
        got = gmm_density_t(BIMODAL, np.array([[xq]]), t, sched)[0]
        assert got == pytest.approx(oracle, rel=1e-7)


def test_time_t_score_matches_density_gradient():
    sched = NoiseSchedule()
    t = 0.4
    gen = np.random.default_rng(8)
    x = gen.uniform(-2.0, 2.0, size=(5, 2))
    got = gmm_score_t(TRIMODAL_2D, x, t, sched)
    for i in range(5):
        fd = central_grad(
            lambda p: math.log(float(gmm_density_t(TRIMODAL_2D, p[None, :], t,
                                                   sched)[0])),
            x[i])
        assert max_rel_err(got[i], fd, floor=1e-6) < 1e-5


def test_box_masses_match_quadrature():
    edges = [np.array([-2.0, -0.5, 0.3, 1.0, 3.0])]
    masses = mixture_box_masses(BIMODAL, edges)
    for k in range(4):
        xs = np.linspace(edges[0][k], edges[0][k + 1], 40001)
        oracle = np.trapezoid(mixture_density(BIMODAL, xs[:, None]), xs)
        assert masses[k] == pytest.approx(oracle, rel=1e-7)
    assert masses.sum() < 1.0


def test_box_masses_2d_sum_to_one_on_wide_box():
    edges = [np.linspace(-5.0, 5.0, 11), np.linspace(-5.0, 5.0, 11)]
    masses = mixture_box_masses(TRIMODAL_2D, edges)
    assert masses.shape == (10, 10)
    assert masses.sum() == pytest.approx(1.0, abs=1e-10)


def test_ring_layout():
    ring = ring_mixture(10, radius=1.0, variance=0.005)
    assert ring.num_components == 10
    np.testing.assert_allclose(np.linalg.norm(ring.means, axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(ring.weights, 0.1)
    assert ring.space is Space.EUCLIDEAN


def test_hub_layout_and_weights():
    hub = hub_mixture(6, radius=1.8, variance=0.015, hub_weight=4.0)
    assert hub.num_components == 7
    np.testing.assert_allclose(hub.weights, [0.4] + [0.1] * 6, rtol=1e-12)
    np.testing.assert_allclose(hub.means[0], [0.0, 0.0])
    np.testing.assert_allclose(np.linalg.norm(hub.means[1:], axis=1), 1.8,
                               rtol=1e-12)
    with pytest.raises(ValueError):
        hub_mixture(0)
    with pytest.raises(ValueError):
        hub_mixture(6, hub_weight=0.0)


def test_wrapped_density_periodic_and_normalized():
    torus = MixtureTarget([0.6, 0.4], [[1.0, -2.0], [-2.5, 0.5]], [0.09, 0.25],
                          space=Space.TORUS)
    gen = np.random.default_rng(5)
    x = gen.uniform(-math.pi, math.pi, size=(20, 2))
    base = wrapped_log_density(torus, x)
    shifted = wrapped_log_density(torus, x + np.array([2.0 * math.pi, -4.0 * math.pi]))
    np.testing.assert_allclose(shifted, base, atol=1e-10)
    axis = np.linspace(-math.pi, math.pi, 301)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    dens = wrapped_density(torus, np.stack([xx, yy], axis=-1).reshape(-1, 2))
    total = np.trapezoid(np.trapezoid(dens.reshape(301, 301), axis, axis=1), axis)
    assert total == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_wrapped_score_matches_fd(seed):
    torus = MixtureTarget([0.5, 0.5], [[0.3, 0.0], [-1.2, 2.0]], [0.2, 0.4],
                          space=Space.TORUS)
    gen = np.random.default_rng(seed)
    x = gen.uniform(-math.pi, math.pi, size=(3, 2))
    got = wrapped_score(torus, x, extra_var=0.05)
    for i in range(3):
        fd = central_grad(
            lambda p: float(wrapped_log_density(torus, p[None, :],
                                                extra_var=0.05)[0]),
            x[i])
        assert max_rel_err(got[i], fd, floor=1e-6) < 1e-5


def test_wrapped_truncation_converges():
    torus = MixtureTarget([1.0], [[0.0, 0.0]], [1.0], space=Space.TORUS)
    x = np.array([[3.0, -3.0]])
    lo = wrapped_log_density(torus, x, truncation=3)[0]
    hi = wrapped_log_density(torus, x, truncation=8)[0]
    assert lo == pytest.approx(hi, abs=1e-10)


def test_draw_mixture_reproducible_and_calibrated():
    gen = np.random.default_rng(42)
    draws = draw_mixture(BIMODAL, gen, (200000,))
    assert draws.shape == (200000, 1)
    # Component shares and the overall second moment against closed forms.
    frac_right = float(np.mean(draws[:, 0] > 0.25))
    assert frac_right == pytest.approx(0.7, abs=0.01)
    m2 = float(np.mean(draws[:, 0] ** 2))
    exact_m2 = 0.3 * (0.04 + 1.0) + 0.7 * (0.09 + 2.25)
    assert m2 == pytest.approx(exact_m2, rel=0.02)
    again = draw_mixture(BIMODAL, np.random.default_rng(42), (200000,))
    np.testing.assert_array_equal(draws, again)


def test_draw_mixture_extra_var_widens():
    gen = np.random.default_rng(7)
    extra = 4.0
    draws = draw_mixture(MixtureTarget([1.0], [[0.0]], [0.25]), gen, (100000,),
                         extra_var=extra)
    assert float(np.var(draws)) == pytest.approx(0.25 + extra, rel=0.02)


def test_sample_target_uses_stream():
    a = sample_target(TRIMODAL_2D, 64, RngStream(11))
    b = sample_target(TRIMODAL_2D, 64, RngStream(11))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (64, 2)


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureTarget([0.5, 0.6], [[0.0], [1.0]], [0.1, 0.1])
    with pytest.raises(ValueError):
        MixtureTarget([1.0], [[0.0]], [-0.1])
    with pytest.raises(ValueError):
        MixtureTarget([0.5, 0.5], [[0.0]], [0.1, 0.1])

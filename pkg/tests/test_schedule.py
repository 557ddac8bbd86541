import math

import numpy as np
import pytest

from pglab.schedule import (
    NoiseSchedule,
    ParticleSet,
    RngStream,
    ScheduledValue,
    Space,
    log_linear,
    ode_step,
    reverse_sde_step,
    wrap_angles,
)


def test_sigma_endpoints_exact():
    sched = NoiseSchedule()
    assert sched.sigma(0.0) == 0.01
    assert sched.sigma(1.0) == 3.0


def test_sigma_monotone_and_geometric_midpoint():
    sched = NoiseSchedule(sigma_min=0.05, sigma_max=2.0, horizon=4.0)
    ts = np.linspace(0.0, 4.0, 33)
    vals = sched.sigma(ts)
    assert np.all(np.diff(vals) > 0.0)
    assert sched.sigma(2.0) == pytest.approx(math.sqrt(0.05 * 2.0), rel=1e-12)


@pytest.mark.parametrize("sigma_min,sigma_max,horizon",
                         [(0.01, 3.0, 1.0), (0.1, 10.0, 2.5), (0.5, 0.7, 0.3)])
def test_g2_is_derivative_of_variance(sigma_min, sigma_max, horizon):
    sched = NoiseSchedule(sigma_min, sigma_max, horizon)
    eps = 1e-6 * horizon
    for t in np.linspace(0.05, 0.95, 7) * horizon:
        fd = (sched.sigma2(t + eps) - sched.sigma2(t - eps)) / (2.0 * eps)
        assert sched.g2(t) == pytest.approx(fd, rel=1e-7)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(sigma_min=0.0)
    with pytest.raises(ValueError):
        NoiseSchedule(sigma_min=2.0, sigma_max=1.0)
    with pytest.raises(ValueError):
        NoiseSchedule(horizon=0.0)
    sched = NoiseSchedule()
    with pytest.raises(ValueError):
        sched.sigma(-0.01)
    with pytest.raises(ValueError):
        sched.sigma(1.01)


def test_perturb_is_affine_in_noise():
    sched = NoiseSchedule()
    x0 = np.array([[1.0, -2.0], [0.5, 0.0]])
    noise = np.array([[0.3, 0.1], [-1.0, 2.0]])
    out = sched.perturb(x0, 0.5, noise)
    np.testing.assert_allclose(out, x0 + sched.sigma(0.5) * noise)
    with pytest.raises(ValueError):
        sched.perturb(x0, 0.5, noise[:1])


def test_time_grid_descends_to_zero():
    grid = NoiseSchedule(horizon=2.0).time_grid(5)
    assert grid.shape == (6,)
    assert grid[0] == 2.0 and grid[-1] == 0.0
    assert np.all(np.diff(grid) < 0.0)
    with pytest.raises(ValueError):
        NoiseSchedule().time_grid(0)


def test_log_linear_endpoints_and_midpoint():
    assert log_linear(2.0, 8.0, 0.0, 1.0) == pytest.approx(2.0, rel=1e-15)
    assert log_linear(2.0, 8.0, 1.0, 1.0) == pytest.approx(8.0, rel=1e-15)
    assert log_linear(2.0, 8.0, 0.5, 1.0) == pytest.approx(4.0, rel=1e-12)
    assert log_linear(0.0, 0.0, 0.3, 1.0) == 0.0
    with pytest.raises(ValueError):
        log_linear(0.0, 1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        log_linear(1.0, 2.0, 1.5, 1.0)


def test_scheduled_value_of():
    assert ScheduledValue.of(3.0) == ScheduledValue(3.0, 3.0)
    assert ScheduledValue.of((1.0, 2.0)) == ScheduledValue(1.0, 2.0)
    sv = ScheduledValue(0.5, 4.5)
    assert ScheduledValue.of(sv) is sv
    assert ScheduledValue.constant(7.0).at(0.31, 1.0) == pytest.approx(7.0, rel=1e-15)


def test_rng_stream_reproducible_and_split():
    a = RngStream(123).child(4).generator().standard_normal(5)
    b = RngStream(123).child(4).generator().standard_normal(5)
    np.testing.assert_array_equal(a, b)
    c = RngStream(123).child(5).generator().standard_normal(5)
    assert not np.array_equal(a, c)
    assert RngStream(9).child(1).child(2).path == RngStream(9).child(1, 2).path


def test_wrap_angles_range_and_period():
    x = np.linspace(-10.0, 10.0, 101)
    w = wrap_angles(x)
    assert np.all(w >= -math.pi) and np.all(w < math.pi)
    np.testing.assert_allclose(wrap_angles(x + 2.0 * math.pi), w, atol=1e-12)


def test_particle_set_shape_and_torus_wrap():
    with pytest.raises(ValueError):
        ParticleSet(np.zeros(3))
    ps = ParticleSet([[4.0, -4.0]], space=Space.TORUS)
    assert np.all(ps.coords >= -math.pi) and np.all(ps.coords < math.pi)
    moved = ps.with_coords([[0.0, 0.1]], t=0.5)
    assert moved.space is Space.TORUS and moved.t == 0.5
    assert ps.n == 1 and ps.d == 2


def test_reverse_sde_step_closed_form():
    sched = NoiseSchedule()
    gen = np.random.default_rng(0)
    coords = gen.standard_normal((3, 2))
    score = gen.standard_normal((3, 2))
    guid = gen.standard_normal((3, 2))
    noise = gen.standard_normal((3, 2))
    t, dt = 0.6, 0.01
    g2 = sched.g2(t)
    out = reverse_sde_step(coords, score, guid, t, dt, sched, noise,
                           langevin_weight=0.25, guidance_weight=1.5)
    expect = (coords
              + (0.5 * 1.25 * g2 * score + 1.5 * g2 * guid) * dt
              + 0.25 * math.sqrt(g2 * dt) * noise)
    np.testing.assert_allclose(out, expect, rtol=1e-13)


def test_reverse_sde_step_guidance_off_matches_none():
    sched = NoiseSchedule()
    gen = np.random.default_rng(1)
    coords, score, guid, noise = (gen.standard_normal((4, 1)) for _ in range(4))
    a = reverse_sde_step(coords, score, guid, 0.4, 0.02, sched, noise,
                         guidance_weight=0.0)
    b = reverse_sde_step(coords, score, None, 0.4, 0.02, sched, noise)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        reverse_sde_step(coords, score, None, 0.4, 0.0, sched, noise)


def test_ode_step_euler_exact_and_heun_second_order():
    # dx/d(-t) = x has the exact one-step map x * exp(dt).
    def rhs(c, tt):
        return c

    x0 = np.array([[1.0], [2.0]])
    for dt in (0.1, 0.05):
        exact = x0 * math.exp(dt)
        e_err = np.max(np.abs(ode_step(x0, rhs, 1.0, dt, "euler") - exact))
        h_err = np.max(np.abs(ode_step(x0, rhs, 1.0, dt, "heun") - exact))
        assert h_err < e_err / 5.0
        assert h_err < 2.0 * dt**3
    with pytest.raises(ValueError):
        ode_step(x0, rhs, 1.0, 0.1, "rk4")

import math

import numpy as np
import pytest

from regloss.data import make_datum
from regloss.errors import NoGrowthData, SlotRejected, SuperCritical
from regloss.fields import Cube, GridField
from regloss.plan import (GlobalVelocity, default_schedule, density_grid, find_density_point, gamma_of,
                          gamma_regime, linf_prefactors, local_average, plan_cubes, series_field,
                          series_solution, slot_mass, tail_threshold, verify_plan)

E = math.e


def test_local_average_of_a_constant():
    g = GridField(Cube.unit(2), np.full((33, 33), 2.5), order=1)
    X = np.random.default_rng(0).uniform(0.2, 0.8, (20, 2))
    np.testing.assert_allclose(local_average(g, X, 0.1), 2.5, rtol=1e-13)


def test_local_average_across_an_interface():
    n, r = 1001, 0.05
    x = np.linspace(0, 1, n)
    samples = np.where(x[:, None] <= 0.5, 1.0, 0.0) * np.ones((1, n))
    g = GridField(Cube.unit(2), samples, order=1)
    # linear interpolation smears the jump over one cell of width h
    h = 1.0 / (n - 1)
    assert abs(float(local_average(g, np.array([0.5, 0.5]), r)) - 0.5) <= h / r + 1e-12


def test_local_average_at_the_gaussian_ridge():
    f = make_datum("gaussian", 2)
    g = density_grid(f, Cube((0.0, 0.0), 4.0), 801)
    x = np.array([1 / math.sqrt(2), 0.0])
    assert abs(float(local_average(g, x, 0.01)) - 2 / E) < 1e-3


def test_density_point_examples():
    dp = find_density_point(make_datum("linear-x1", 2), 0.05)
    assert dp.delta_bar == pytest.approx(0.5, rel=1e-10)
    assert dp.stable
    with pytest.raises(NoGrowthData):
        find_density_point(make_datum("constant", 2), 0.05)
    g = find_density_point(make_datum("gaussian", 2), 0.05)
    assert abs(np.linalg.norm(g.x_star) - 1 / math.sqrt(2)) < 0.05
    assert g.delta_bar == pytest.approx(math.exp(-1), rel=5e-3)


def test_uniform_density_plan():
    f = make_datum("linear-x1", 2)
    plan = plan_cubes(f, 3, (0.0, 0.0), 0.5, 0.05, build_blocks=False)
    assert plan.N == 3
    assert all(s.halvings == 0 for s in plan.slots)
    np.testing.assert_allclose(plan.masses, plan.lambdas, rtol=1e-12)
    assert all(plan.checks.values())


def test_cap_binds_for_a_large_probe():
    f = make_datum("linear-x1", 2)
    plan = plan_cubes(f, 3, (0.0, 0.0), 0.5, 200.0, bbox=Cube((0.0, 0.0), 2000.0), build_blocks=False)
    np.testing.assert_allclose(plan.lambdas, np.exp(-np.arange(1.0, 4.0)), rtol=1e-15)


@pytest.mark.parametrize("name", ["gaussian", "linear-x1"])
def test_plan_invariants_rederived(name):
    f = make_datum(name, 2)
    dp = find_density_point(f, 0.05)
    plan = plan_cubes(f, 5, dp.x_star, dp.delta_bar, 0.05, build_blocks=False)
    n = np.arange(1, 6)
    assert np.all(plan.lambdas <= np.exp(-n))
    np.testing.assert_allclose(plan.taus, np.log(1 / plan.lambdas) ** -2, rtol=1e-15)
    C = math.sqrt(dp.delta_bar / 2)
    assert np.all(plan.masses >= C * plan.lambdas)
    for a in plan.slots:
        for b in plan.slots:
            if a.index < b.index:
                gap = np.max(np.abs(np.subtract(a.center, b.center)))
                assert gap >= 3.5 * (a.side + b.side)
    dist = [np.linalg.norm(np.subtract(s.center, dp.x_star)) for s in plan.slots]
    assert all(b < a for a, b in zip(dist, dist[1:]))
    assert verify_plan(plan, f) == plan.checks


def test_mass_matches_an_independent_quadrature():
    f = make_datum("gaussian", 2)
    cube = Cube((0.6, 0.3), 0.01)
    xs = cube.lo[0] + (np.arange(200) + 0.5) * 0.01 / 200
    ys = cube.lo[1] + (np.arange(200) + 0.5) * 0.01 / 200
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    g2 = 4 * (X ** 2 + Y ** 2) * np.exp(-2 * (X ** 2 + Y ** 2))
    oracle = math.sqrt(float(np.sum(g2)) * (0.01 / 200) ** 2)
    assert slot_mass(f, cube, 64) == pytest.approx(oracle, rel=1e-6)


def test_slot_rejection_carries_diagnostics():
    bump = make_datum({"name": "gaussian", "center": [3.0, 3.0], "width": 0.05}, 2)
    with pytest.raises(SlotRejected) as info:
        plan_cubes(bump, 2, (1.0, 1.0), 0.4, 0.05, build_blocks=False, max_halvings=2)
    diag = info.value.diagnostics
    assert diag["slot"] == 1 and diag["mass"] < diag["bound"]


def test_global_velocity_dispatch():
    f = make_datum({"name": "gaussian", "center": [0.5, 0.5], "width": 0.3}, 2)
    plan = plan_cubes(f, 2, (0.3, 0.5), 0.2, 0.05, bbox=Cube.unit(2), n_steps=1, block_quad=32)
    v = GlobalVelocity(plan)
    far = np.array([[0.1, 0.1], [0.9, 0.9]])
    assert np.all(v.value(far, 0.003) == 0.0)
    s2 = plan.slots[1]
    x = np.array([s2.center])
    assert v.slot_of(x)[0] == 1
    t = 0.3 * s2.tau
    seg = v.schedules[1].active(t / s2.tau)[1]
    np.testing.assert_allclose(v.value(x, t), (s2.side / s2.tau) * seg.value(s2.to_block(x)), rtol=1e-15)


def test_linf_prefactor_peak():
    lam, tau = default_schedule(20)
    pre = linf_prefactors(lam, tau)
    assert int(np.argmax(pre)) == 1
    assert abs(pre[1] - 4 * math.exp(-2)) < 1e-12


def test_solution_series():
    lam, tau = default_schedule(20)
    t = 0.1
    n = np.arange(1, 21)
    exponents = t * n ** 2 - n
    assert exponents[9] == pytest.approx(0.0, abs=1e-12)
    assert exponents[19] == pytest.approx(20.0)
    s = series_solution(lam, tau, t, 2)
    assert s[19] > 18
    assert np.all(np.diff(s) > 0)
    s0 = series_solution(*default_schedule(60), 0.0, 2)
    assert np.all(np.diff(s0) >= 0)
    assert s0[-1] == pytest.approx(math.log(1 / (E - 1)), abs=1e-12)


def test_field_series():
    lam, tau = default_schedule(50)
    fs = series_field(lam, tau, 1.0)
    oracle = E * (E + 1) / (E - 1) ** 3
    assert abs(fs.partial - oracle) < 1e-6
    assert abs(fs.upper - oracle) < 1e-3
    assert series_field(lam, tau, 2.0).partial < fs.partial
    with pytest.raises(SuperCritical):
        series_field(lam, tau, 0.0)


def test_field_series_upper_bound_tightens():
    lam, tau = default_schedule(80)
    thr = tail_threshold(1.0)
    uppers = [series_field(lam, tau, 1.0, N).upper for N in range(thr, 80)]
    assert all(b <= a + 1e-15 for a, b in zip(uppers, uppers[1:]))
    exact = E * (E + 1) / (E - 1) ** 3
    assert all(u >= exact - 1e-12 for u in uppers)
    assert math.isinf(series_field(lam, tau, 1.0, thr - 1).tail)


def test_gamma():
    assert gamma_of(1, 2, 2) == 1.0
    assert gamma_of(2, 2, 2) == 0.0
    assert gamma_of(2, 4, 2) == -0.5
    assert gamma_regime(-0.5) != gamma_regime(0.5)

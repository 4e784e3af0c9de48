import math
import warnings

import numpy as np
import pytest

from regloss.advect import SolutionHandle
from regloss.block import step_fields
from regloss.data import make_datum, random_trig
from regloss.errors import AliasWarning, SuperCritical
from regloss.fields import AnalyticField, Cube
from regloss.norms import (continuation_tail, direct_slot_norm, fractional_h_norm, growth_curve, l2_grad_norm,
                           periodic_samples, rescaled_velocity, velocity_norm_series, wkp_seminorm)
from regloss.shears import ShearSpec, advect_under_shear, shear_velocity

TORUS = Cube((4.0, 4.0), 8.0)


def _mode(m, d=2):
    k = 2 * math.pi * m / 8
    return AnalyticField(lambda X: np.sin(k * X[:, 0]),
                         lambda X: np.concatenate([k * np.cos(k * X[:, :1]), 0 * X[:, 1:]], 1), d)


def test_l2_grad_norm_examples():
    assert l2_grad_norm(make_datum("linear-x1", 2), Cube.unit(2)).value == pytest.approx(1.0, rel=1e-14)
    pw = l2_grad_norm(make_datum("plane-wave-x2", 2), TORUS, n_quad=256)
    assert pw.value == pytest.approx(math.sqrt(2) * math.pi, rel=1e-10)
    assert pw.error < 1e-10


@pytest.mark.parametrize("A", [0.5, 1.0])
def test_shear_growth_through_the_meter(A):
    f = make_datum("plane-wave-x2", 2)
    g = advect_under_shear(f, ShearSpec(2, 1, 1, A, 2), 1.0)
    r2 = (l2_grad_norm(g, TORUS, n_quad=256).value / l2_grad_norm(f, TORUS, n_quad=256).value) ** 2
    assert abs(r2 - (1 + 2 * math.pi ** 2 * A ** 2)) / r2 < 1e-6


@pytest.mark.parametrize("d", [2, 3])
def test_single_mode_fractional_norm(d):
    n = 64 if d == 2 else 16
    for m in (1, 3):
        a = periodic_samples(_mode(m, d), 8.0, n)
        l2 = math.sqrt(8.0 ** d / 2)
        for r in (0.5, 1.0, 1.7):
            got = fractional_h_norm(a, 8.0, r).value
            assert abs(got - (2 * math.pi * m / 8) ** r * l2) <= 1e-8 * got


def test_fractional_norm_edge_cases():
    f = random_trig(2, 5, 2)
    a = periodic_samples(f, 8.0, 64)
    centered = a - a.mean()
    l2 = math.sqrt(float(np.mean(centered ** 2)) * 64.0)
    assert fractional_h_norm(a, 8.0, 0.0).value == pytest.approx(l2, rel=1e-12)
    assert fractional_h_norm(np.full((32, 32), 3.0), 8.0, 1.3).value == pytest.approx(0.0, abs=1e-12)


def test_alias_warning_on_unresolved_data():
    noise = np.random.default_rng(0).standard_normal((32, 32))
    with pytest.warns(AliasWarning):
        fractional_h_norm(noise, 8.0, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fractional_h_norm(periodic_samples(_mode(1), 8.0, 64), 8.0, 1.0)


def test_integer_seminorms():
    const = AnalyticField(lambda X: np.ones(len(X)), lambda X: np.zeros_like(X), 2)
    assert wkp_seminorm(const, 1, 2, Cube.unit(2)).value == 0.0
    A = 0.8
    u = shear_velocity(ShearSpec(2, 1, 1, A, 2))
    cell = Cube.unit(2)
    expect = math.sqrt(A ** 2 * (2 * math.pi) ** 2 * 0.5 * cell.volume)
    assert wkp_seminorm(u, 1, 2, cell, 256).value == pytest.approx(expect, rel=1e-10)
    with pytest.raises(ValueError):
        wkp_seminorm(u, 0, math.inf, cell)


def test_plancherel():
    f = random_trig(5, 5, 2)
    a = periodic_samples(f, 8.0, 64)
    for k in (1, 2):
        assert wkp_seminorm(f, k, 2, TORUS, 256).value == pytest.approx(fractional_h_norm(a, 8.0, k).value, rel=1e-6)


def test_rescaling_identity():
    u = step_fields(ShearSpec(1, 1, 1, 0.5, 2), 2)[0]
    ref = wkp_seminorm(u, 1, 3, Cube.support_box(2), 128).value
    gamma = 1 - 1 + 2 / 3
    for lam in (0.5, 0.1):
        tau = math.log(1 / lam) ** -2
        v = rescaled_velocity(u, np.array([0.2, -0.4]), lam, tau)
        direct = wkp_seminorm(v, 1, 3, v.support, 128).value
        assert direct / ref == pytest.approx(lam ** gamma / tau, rel=1e-2)


def test_velocity_series(cheap_plan):
    with pytest.raises(SuperCritical):
        velocity_norm_series(cheap_plan, 2.0, 2.0)
    report, table = velocity_norm_series(cheap_plan, 0.0, 2.0, n_quad=64)
    assert len(table) == 2 and math.isfinite(report.value)
    assert table[1].contribution < table[0].contribution
    single, _ = velocity_norm_series(cheap_plan, 1.0, 2.0, N=1, n_quad=64)
    assert single.value >= table[0].factor * table[0].reference


def test_direct_slot_norm_agrees_with_scaling(cheap_plan):
    s = cheap_plan.slots[0]
    for r, p in ((0, 2), (1, 2), (1, 3)):
        direct, scaled = direct_slot_norm(cheap_plan, 1, r, p, 0.4 * s.horizon, n_quad=64)
        assert abs(direct - scaled) <= 1e-2 * scaled


def test_continuation_tail_bounds_the_remainder():
    for gamma in (0.4, 1.0, 2.0):
        for N in (1, 5, 30):
            exact = math.fsum(n * n * math.exp(-gamma * n) for n in range(N + 1, 4000))
            assert continuation_tail(N, gamma) >= exact


def test_growth_curve(cheap_plan, bump):
    handle = SolutionHandle(cheap_plan, bump)
    horizon = min(s.horizon for s in cheap_plan.slots)
    curve = growth_curve(handle, None, np.linspace(0, horizon, 5))
    first = [r for r in curve.rows if r[0] == 0.0]
    for t, n, measured, _, _ in first:
        assert measured == pytest.approx(cheap_plan.slots[n - 1].mass, rel=1e-12)
    assert curve.all_bounded()
    late = [r for r in curve.rows if r[0] == horizon]
    assert late[1][4] > late[0][4]

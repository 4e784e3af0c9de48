import math

import numpy as np
import pytest

from regloss.data import make_datum, random_trig
from regloss.fields import AnalyticField, Cube, fd_divergence
from regloss.shears import (ShearSpec, advect_under_shear, all_specs, first_max, select_shear,
                            shear_flow_map, shear_growth_ratio, shear_growth_ratios, shear_velocity,
                            sum_identity_defect)

TORUS = Cube((4.0, 4.0), 8.0)
PLANE_WAVE_RATIO = 1 + 2 * math.pi ** 2


def test_velocity_examples():
    u = shear_velocity(ShearSpec(2, 1, 1, 1.0, 2))
    np.testing.assert_allclose(u.value(np.array([0.25, 0.0])), [0.0, 1.0], atol=1e-15)
    w = shear_velocity(ShearSpec(1, 2, 2, 2.0, 2))
    np.testing.assert_allclose(w.value(np.array([0.0, 0.0])), [-2.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("d", [2, 3])
def test_every_shear_is_divergence_free(d):
    X = np.random.default_rng(0).uniform(0, 8, (1000, d))
    for spec in all_specs(1.3, d):
        div = fd_divergence(shear_velocity(spec), X)
        assert np.max(np.abs(div)) < 1e-9


def test_flow_map_examples():
    spec = ShearSpec(2, 1, 1, 1.0, 2)
    m0 = shear_flow_map(spec, 0.0)
    x = np.array([[0.25, 0.0]])
    np.testing.assert_array_equal(m0.forward(x), x)
    np.testing.assert_array_equal(m0.jacobian(x)[0], np.eye(2))
    np.testing.assert_allclose(shear_flow_map(spec, 1.0).forward(x), [[0.25, 1.0]], atol=1e-15)


def test_flow_map_inverse_and_unit_determinant():
    X = np.random.default_rng(1).uniform(0, 8, (1000, 3))
    for spec in all_specs(0.7, 3):
        m = shear_flow_map(spec, 1.9)
        assert np.max(np.abs(m.forward(m.inverse(X)) - X)) <= 1e-14 * 8
        np.testing.assert_allclose(np.linalg.det(m.jacobian(X)), 1.0, atol=1e-14)


def test_advected_plane_wave_matches_closed_form():
    f = make_datum("plane-wave-x2", 2)
    t = 0.6
    g = advect_under_shear(f, ShearSpec(2, 1, 1, 1.0, 2), t)
    X = np.random.default_rng(2).uniform(0, 8, (200, 2))
    expect = np.sin(math.pi * (X[:, 1] - t * np.sin(2 * math.pi * X[:, 0])) / 4)
    np.testing.assert_allclose(g.value(X), expect, atol=1e-14)


def test_advect_time_zero_returns_datum():
    f = random_trig(4, 5, 2)
    g = advect_under_shear(f, ShearSpec(1, 2, 2, 1.0, 2), 0.0)
    X = np.random.default_rng(5).uniform(0, 8, (100, 2))
    v0, g0 = f.evaluate(X)
    v1, g1 = g.evaluate(X)
    np.testing.assert_array_equal(v0, v1)
    np.testing.assert_array_equal(g0, g1)


def test_advection_preserves_l2():
    f = random_trig(7, 5, 2)
    g = advect_under_shear(f, ShearSpec(1, 1, 1, 1.0, 2), 1.0)
    nodes = TORUS.midpoint_nodes(256)
    a = np.sum(f.value(nodes) ** 2)
    b = np.sum(g.value(nodes) ** 2)
    assert abs(a - b) / a < 1e-8


def test_ratio_examples():
    f = make_datum("plane-wave-x2", 2)
    assert shear_growth_ratio(f, TORUS, ShearSpec(1, 1, 1, 1.0, 2), 0.0) == 1.0
    r = shear_growth_ratio(f, TORUS, ShearSpec(1, 1, 1, 1.0, 2), 1.0)
    assert abs(r - PLANE_WAVE_RATIO) / PLANE_WAVE_RATIO < 1e-6
    # shearing along a level direction changes nothing
    g = AnalyticField(lambda X: np.cos(math.pi * X[:, 0] / 4),
                      lambda X: np.stack([-math.pi / 4 * np.sin(math.pi * X[:, 0] / 4), 0 * X[:, 0]], 1), 2)
    assert abs(shear_growth_ratio(g, TORUS, ShearSpec(1, 1, 1, 1.0, 2), 2.0) - 1.0) < 1e-12


def test_ratios_average_to_the_identity_value():
    f = random_trig(11, 5, 2)
    _, ratios, _, _ = shear_growth_ratios(f, TORUS, 1.0, 1.0, 128)
    assert len(ratios) == 8
    assert abs(np.mean(ratios) - (1 + math.pi ** 2)) < 1e-6


@pytest.mark.parametrize("name, axis", [("plane-wave-x2", 1), ("plane-wave-x1", 2)])
def test_selected_axis(name, axis):
    if name == "plane-wave-x1":
        k = math.pi / 4
        f = AnalyticField(lambda X: np.sin(k * X[:, 0]),
                          lambda X: np.stack([k * np.cos(k * X[:, 0]), 0 * X[:, 0]], 1), 2)
    else:
        f = make_datum(name, 2)
    sel = select_shear(f, TORUS, 1.0, 1.0, 128)
    assert sel.spec.j == axis
    assert sel.ratio >= 1 + math.pi ** 2


def test_sum_identity_defects():
    f = random_trig(0, 5, 2)
    assert sum_identity_defect(f, TORUS, 1.0, 0.0, 64) == pytest.approx(0.0, abs=1e-15)
    assert sum_identity_defect(f, TORUS, 1.0, 1.0, 256) <= 1e-6
    f3 = random_trig(0, 5, 3)
    assert sum_identity_defect(f3, Cube((4.0,) * 3, 8.0), 1.0, 1.0, 64) <= 1e-4


def test_first_max_breaks_ties_by_order():
    assert first_max([1.0, 3.0, 3.0 * (1 + 1e-14), 2.0]) == 1
    assert first_max([1.0, 3.0, 3.1]) == 2

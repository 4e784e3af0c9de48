import math

import numpy as np
import pytest

from regloss.errors import DomainError, TimeRangeError
from regloss.fields import (AnalyticField, ConstantVelocity, Cube, TimeSchedule, grid_sample, interpolate,
                            read_grid, schedule_flow_map, schedule_inverse, write_grid)


def _field(f, g, d=2):
    return AnalyticField(f, g, d)


def test_constant_samples():
    f = _field(lambda X: np.full(len(X), 5.0), lambda X: np.zeros_like(X))
    g = grid_sample(f, Cube.unit(2), 8)
    assert g.samples.shape == (8, 8)
    assert np.all(g.samples == 5.0)


def test_linear_node_values():
    f = _field(lambda X: X[:, 0], lambda X: np.tile([1.0, 0.0], (len(X), 1)))
    g = grid_sample(f, Cube.unit(2), 2)
    assert sorted(set(np.round(g.samples.ravel(), 14))) == [0.0, 1.0]


def test_linear_reproduction():
    f = _field(lambda X: X[:, 0] + 2 * X[:, 1], lambda X: np.tile([1.0, 2.0], (len(X), 1)))
    g = grid_sample(f, Cube.unit(2), 7)
    X = np.random.default_rng(3).uniform(0.05, 0.95, (50, 2))
    v, grad = interpolate(g, X)
    np.testing.assert_allclose(v, X[:, 0] + 2 * X[:, 1], atol=1e-12)
    np.testing.assert_allclose(grad, np.tile([1.0, 2.0], (50, 1)), atol=1e-11)


def test_cubic_value_and_gradient():
    k = math.pi / 4
    f = _field(lambda X: np.sin(k * X[:, 0]), lambda X: np.stack([k * np.cos(k * X[:, 0]), 0 * X[:, 0]], 1))
    g = grid_sample(f, Cube((4.0, 4.0), 8.0), 256)
    v, _ = interpolate(g, np.array([1.37, 2.0]))
    assert abs(v - math.sin(k * 1.37)) < 1e-8

    w = 2 * math.pi
    f2 = _field(lambda X: np.sin(w * X[:, 0]), lambda X: np.stack([w * np.cos(w * X[:, 0]), 0 * X[:, 0]], 1))
    g2 = grid_sample(f2, Cube.unit(2), 256)
    _, grad = interpolate(g2, np.array([0.3, 0.5]))
    assert abs(grad[0] - w * math.cos(0.6 * math.pi)) < 1e-6


def test_constant_gradient_is_zero():
    f = _field(lambda X: np.full(len(X), -2.0), lambda X: np.zeros_like(X))
    _, grad = interpolate(grid_sample(f, Cube.unit(2), 16), np.array([[0.4, 0.6], [0.1, 0.9]]))
    np.testing.assert_allclose(grad, 0.0, atol=1e-13)


def test_interpolate_outside_grid_raises():
    f = _field(lambda X: X[:, 0], lambda X: np.tile([1.0, 0.0], (len(X), 1)))
    g = grid_sample(f, Cube.unit(2), 8)
    with pytest.raises(DomainError):
        interpolate(g, np.array([1.5, 0.5]))


def test_grid_file_round_trip(tmp_path):
    f = _field(lambda X: np.exp(-np.sum(X ** 2, 1)), lambda X: -2 * X * np.exp(-np.sum(X ** 2, 1))[:, None])
    g = grid_sample(f, Cube((0.0, 0.0), 2.0), 9)
    write_grid(tmp_path / "g.rglf", g)
    h = read_grid(tmp_path / "g.rglf")
    assert np.array_equal(h.samples, g.samples)
    X = np.array([[0.1, -0.2], [0.33, 0.4]])
    np.testing.assert_allclose(interpolate(h, X)[0], interpolate(g, X)[0], rtol=0, atol=0)


def test_schedule_time_zero_is_identity():
    sched = TimeSchedule(((1.0, ConstantVelocity([1.0, 0.0])),))
    x = np.array([0.3, 0.7])
    assert np.array_equal(schedule_flow_map(sched, 0.0, x), x)


def test_schedule_translation_and_composition():
    e1, e2 = ConstantVelocity([1.0, 0.0]), ConstantVelocity([0.0, 1.0])
    x = np.array([0.25, 0.25])
    one = TimeSchedule(((1.0, e1),))
    np.testing.assert_array_equal(schedule_flow_map(one, 0.5, x), x + [0.5, 0.0])
    two = TimeSchedule(((1.0, e1), (1.0, e2)))
    np.testing.assert_array_equal(schedule_flow_map(two, 1.5, x), x + [1.0, 0.5])
    y, _ = schedule_inverse(two, 1.5, x + [1.0, 0.5])
    np.testing.assert_allclose(y, x, atol=1e-15)


def test_schedule_rejects_negative_time():
    sched = TimeSchedule(((1.0, ConstantVelocity([1.0, 0.0])),))
    with pytest.raises(TimeRangeError):
        schedule_flow_map(sched, -0.1, np.zeros(2))

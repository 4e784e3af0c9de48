import csv
import math

import numpy as np
import pytest

from regloss.advect import SolutionHandle, exact_trajectory, rk4_trajectory, write_samples
from regloss.errors import TimeRangeError
from regloss.fields import ConstantVelocity


class _Steady:
    def __init__(self, u):
        self.u = u

    def value(self, x, t):
        return self.u.value(x)


@pytest.fixture(scope="module")
def handle(cheap_plan, bump):
    return SolutionHandle(cheap_plan, bump)


def _slot_points(slot, n, seed=0):
    return slot.support.random_points(np.random.default_rng(seed), n)


def test_time_zero_and_outside_values(handle, bump, cheap_plan):
    X = np.random.default_rng(0).uniform(0, 1, (500, 2))
    np.testing.assert_array_equal(handle.evaluate(X, 0.0), bump.value(X))
    np.testing.assert_array_equal(handle.evaluate_gradient(X, 0.0), bump.gradient(X))
    off = X[handle.velocity.slot_of(X) < 0]
    t = 0.5 * cheap_plan.slots[0].horizon
    np.testing.assert_array_equal(handle.evaluate(off, t), bump.value(off))


def test_range_is_preserved(handle, cheap_plan, bump):
    rng = np.random.default_rng(1)
    s = cheap_plan.slots[0]
    X = s.support.random_points(rng, 10_000)
    # the bump is radial about (0.5, 0.5): extremes over the closed support sit at the
    # nearest point and the farthest corner
    c = np.array([0.5, 0.5])
    near = np.clip(c, s.support.lo, s.support.hi)
    far = np.where(np.abs(s.support.lo - c) > np.abs(s.support.hi - c), s.support.lo, s.support.hi)
    lo, hi = float(bump.value(far)), float(bump.value(near))
    for t in rng.uniform(0, s.horizon, 5):
        v = handle.evaluate(X, t)
        assert v.min() >= lo - 1e-9 and v.max() <= hi + 1e-9


def test_gradient_matches_finite_differences(handle, cheap_plan):
    s = cheap_plan.slots[0]
    X = _slot_points(s, 1000, seed=2)
    t = 0.61 * s.horizon
    g = handle.evaluate_gradient(X, t)
    h = 1e-6 * s.side
    fd = np.empty_like(g)
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd[:, k] = (handle.evaluate(X + e, t) - handle.evaluate(X - e, t)) / (2 * h)
    scale = np.max(np.linalg.norm(g, axis=1))
    assert np.max(np.abs(fd - g)) <= 1e-4 * scale


def test_rk4_trivial_fields():
    x = np.array([[0.2, 0.4], [1.0, -3.0]])
    np.testing.assert_array_equal(rk4_trajectory(None, x, 0.0, 1.0, 0.01), x)
    y = rk4_trajectory(_Steady(ConstantVelocity([1.0, 0.0])), x, 0.0, 1.0, 0.01)
    np.testing.assert_allclose(y, x + [1.0, 0.0], atol=1e-14)
    with pytest.raises(ValueError):
        rk4_trajectory(None, x, 0.0, 1.0, 0.0)


def test_rk4_converges_to_the_exact_flow_at_fourth_order(handle, cheap_plan):
    s = cheap_plan.slots[0]
    X = _slot_points(s, 20, seed=3)
    T = s.horizon
    exact = exact_trajectory(handle, X, T)
    errs = [np.max(np.abs(rk4_trajectory(handle.velocity, X, 0.0, T, dt * s.tau) - exact)) / s.side
            for dt in (4e-3, 2e-3)]
    assert errs[1] < 1e-4
    assert errs[0] / errs[1] > 8.0


def test_flow_inverse(handle, cheap_plan):
    s = cheap_plan.slots[1]
    X = _slot_points(s, 500, seed=4)
    t = 0.37 * s.horizon
    Y, _ = handle.inverse_flow(handle.forward_flow(X, t), t)
    assert np.max(np.abs(Y - X)) <= 1e-9 * s.side


def test_time_range(cheap_plan, bump):
    bounded = SolutionHandle(cheap_plan, bump, horizon=cheap_plan.slots[0].horizon)
    with pytest.raises(TimeRangeError):
        bounded.evaluate(np.array([0.5, 0.5]), -1.0)
    with pytest.raises(TimeRangeError):
        bounded.evaluate(np.array([0.5, 0.5]), 2 * cheap_plan.slots[0].horizon)


def test_l2_mass_is_conserved_on_a_slot(handle, cheap_plan, bump):
    s = cheap_plan.slots[0]
    nodes = s.support.midpoint_nodes(256)
    m0 = np.sum(bump.value(nodes) ** 2)
    m1 = np.sum(handle.evaluate(nodes, s.horizon) ** 2)
    assert abs(m1 - m0) / m0 < 1e-4


def test_sample_file(tmp_path, handle, cheap_plan):
    X = _slot_points(cheap_plan.slots[0], 4)
    write_samples(tmp_path / "s.csv", handle, X, [0.0, 0.001], config_hash="abc")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,t,rho,grad_norm"
    assert lines[-1].startswith("# config abc, git ")
    rows = list(csv.reader(lines[1:-1]))
    assert len(rows) == 8
    assert all(math.isfinite(float(c)) for r in rows for c in r)

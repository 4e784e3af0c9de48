import math

import numpy as np
import pytest

from regloss.block import (block_flow_map, build_block, empirical_beta, grow_unit_step, seed_amplitude,
                           step_fields, track_constants)
from regloss.data import make_datum
from regloss.errors import TimeRangeError, ZeroGradient
from regloss.fields import Cube, fd_divergence, transported
from regloss.norms import l2_grad_norm
from regloss.shears import ShearSpec

ALPHA = 0.3


@pytest.fixture(scope="module")
def gaussian():
    return make_datum({"name": "gaussian", "center": [0.5, 0.5], "width": 0.3}, 2)


@pytest.fixture(scope="module")
def block(gaussian):
    return build_block(gaussian, ALPHA, 2, 2, n_quad=32)


def test_single_step_block(gaussian):
    b = build_block(gaussian, ALPHA, 1, 2, n_quad=32)
    assert b.n_steps == 1
    assert b.growth_factors[1] >= math.exp(ALPHA)


def test_certified_factors_reach_the_exponential(block):
    for n, g in enumerate(block.growth_factors):
        assert g >= math.exp(ALPHA * n) * (1 - 1e-12)


def test_measured_growth_agrees_with_an_independent_meter(block, gaussian):
    """Gradient norms of theta(n) from finite differences of values, not from jacobians."""
    omega = Cube.unit(2)
    X = omega.midpoint_nodes(128)
    base = l2_grad_norm(gaussian, omega, 0.0, 128).value
    h = 1e-6
    for n in range(1, block.n_steps + 1):
        theta = transported(gaussian, block.schedule, float(n))
        grads = []
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            grads.append((theta.value(X + e) - theta.value(X - e)) / (2 * h))
        fd = math.sqrt(omega.volume / len(X) * float(np.sum(np.square(grads))))
        assert fd / base >= math.exp(ALPHA * n)


def test_linear_datum_doubles():
    step = grow_unit_step(make_datum("linear-x1", 2), 2.0, 2, n_quad=32)
    assert step.ratio >= 2.0
    assert step.quad_error >= 0.0
    lo, hi = step.durations
    assert lo + hi == pytest.approx(1.0)


def test_barely_growing_step_is_cheap():
    step = grow_unit_step(make_datum("linear-x1", 2), 1 + 1e-6, 2, n_quad=32)
    assert step.ratio >= 1 + 1e-6
    assert step.amplitude <= seed_amplitude(1 + 1e-6, 2, track_constants())


def test_invalid_growth_targets(gaussian):
    with pytest.raises(ValueError):
        grow_unit_step(gaussian, 1.0, 2)
    with pytest.raises(ZeroGradient):
        build_block(make_datum("constant", 2), ALPHA, 1, 2, n_quad=32)


def test_block_flow_map(block):
    X = np.random.default_rng(0).uniform(-0.5, 1.5, (100, 2))
    np.testing.assert_array_equal(block_flow_map(block, 0.0).forward(X), X)
    m = block_flow_map(block, 1.37)
    np.testing.assert_allclose(m.inverse(m.forward(X)), X, atol=1e-9)
    with pytest.raises(TimeRangeError):
        block_flow_map(block, block.n_steps + 0.5)


def test_segment_fields_are_divergence_free(block):
    X = np.random.default_rng(1).uniform(-3, 4, (5000, 2))
    for _, f in block.schedule.segments:
        assert np.max(np.abs(fd_divergence(f, X))) <= 1e-6


def test_step_fields_durations():
    shear, shift = step_fields(ShearSpec(1, 1, 1, 0.1, 2), 3)
    assert shift.speed == pytest.approx(4.0)


def test_empirical_beta(block, gaussian):
    assert empirical_beta(block, gaussian, block.n_steps + 1, n_quad=32) == 0.0
    beta, times, norms = empirical_beta(block, gaussian, 9, n_quad=32, return_curve=True)
    assert math.isfinite(beta) and beta >= 0.0
    bound = np.exp(ALPHA * times - beta) * block.base_norm
    assert np.all(norms >= bound * (1 - 1e-12))
    dense = empirical_beta(block, gaussian, 17, n_quad=32)
    assert dense >= beta - 1e-12

"""Unit-time growth steps on Omega_0 = (0,1)^d and their iteration into a block.

One step shears along the octagonal track (pulled back from the strip) and
then shifts the track so that the piece carrying the most gradient lands on
Omega_0.  Both segments are rescaled to fit in unit time.  Iterating the step
on the exactly transported datum gives ``||grad theta(n)|| >= e^{alpha n}
||grad theta_bar||`` on Omega_0, which every step certifies numerically.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import AmplitudeSearchFailed, TimeRangeError, ZeroGradient
from .fields import Cube, ScalarField, ScheduleFlowMap, TimeSchedule, transported
from .shears import ShearSpec, first_max, select_shear
from .track import (ShearProfile, ShiftProfile, TrackVelocity, lift_map, track_map)

__all__ = [
    "GrowthStep", "Block", "grow_unit_step", "build_block", "block_flow_map",
    "empirical_beta", "growth_samples", "track_constants", "step_fields",
    "seed_amplitude", "default_quad",
]


def default_quad(d: int) -> int:
    return 256 if d == 2 else 64


@functools.lru_cache(maxsize=None)
def track_constants(n: int = 200) -> Tuple[float, float]:
    """Measured ``(L_fwd, L_inv)`` of the default track map."""
    return track_map().lipschitz_constants(n)


def seed_amplitude(alpha_prime: float, d: int, constants: Optional[Tuple[float, float]] = None) -> float:
    """Closed-form sufficient amplitude: the 1/8 region factor and both Lipschitz factors."""
    L_fwd, L_inv = constants or track_constants()
    return alpha_prime * math.sqrt(8.0 * L_fwd ** 2 * L_inv ** 2 * d / (2.0 * math.pi ** 2))


@functools.lru_cache(maxsize=64)
def _lifted(d: int, plane: Tuple[int, int]):
    return lift_map(track_map(), d, plane)


def step_fields(spec: ShearSpec, shift: int):
    """The two extended segment fields of a step, both at speed ``1 + shift``."""
    lm = _lifted(spec.d, (spec.j, spec.jp))
    speed = 1.0 + shift
    shear = TrackVelocity(ShearProfile(spec), lm, speed, extended=True)
    shift_f = TrackVelocity(ShiftProfile(), lm, speed, extended=True)
    return shear, shift_f


def _step_schedule(spec: ShearSpec, shift: int) -> TimeSchedule:
    shear, shift_f = step_fields(spec, shift)
    segs = [(1.0 / (1.0 + shift), shear)]
    if shift > 0:
        segs.append((shift / (1.0 + shift), shift_f))
    return TimeSchedule(tuple(segs))


def _energy(datum: ScalarField, cube: Cube, n: int, pre=None) -> float:
    """``int_cube |grad datum|^2`` by tensor midpoint quadrature.

    ``pre`` optionally maps the nodes first, returning ``(Y, J)``; the
    integrand is then ``|J^T grad datum(Y)|^2``.
    """
    nodes = cube.midpoint_nodes(n)
    if pre is None:
        _, g = datum.evaluate(nodes)
    else:
        Y, J = pre(nodes)
        _, gY = datum.evaluate(Y)
        g = np.einsum("nij,ni->nj", J, gY)
    return cube.volume / n ** cube.dimension * float(np.sum(g * g))


@dataclass(frozen=True)
class _Trial:
    A: float
    spec: ShearSpec
    shift: int
    energy_ratio: float
    error: float
    ratios: tuple
    errors: tuple
    alpha_prime: float

    @property
    def certified(self) -> bool:
        return math.sqrt(max(self.energy_ratio - self.error, 0.0)) >= self.alpha_prime

    @property
    def resolved(self) -> bool:
        return self.error <= 1e-2 * self.energy_ratio


def _trial(datum, omega0, A, alpha_prime, n, base):
    """Select the shear at amplitude ``A`` and score all eight shifts on Omega_0."""
    spec = select_shear(datum, omega0, A, 1.0, n).spec
    shear, shift_f = step_fields(spec, 0)
    ratios, errors = [], []
    for i in range(8):
        def pre(X, i=i):
            J = np.broadcast_to(np.eye(X.shape[1]), (X.shape[0],) + (X.shape[1],) * 2)
            if i > 0:
                X, J = shift_f.flow(X, -float(i))
            Y, J1 = shear.flow(X, -1.0)
            return Y, np.einsum("nij,njk->nik", J1, J)
        fine = _energy(datum, omega0, n, pre) / base[0]
        coarse = _energy(datum, omega0, n // 2, pre) / base[1]
        ratios.append(fine)
        errors.append(abs(fine - coarse) / 3.0)
    k = first_max(ratios)
    return _Trial(A, spec, k, ratios[k], errors[k], tuple(ratios), tuple(errors), alpha_prime)


@dataclass(frozen=True)
class GrowthStep:
    """One certified unit-time step: pulled-back shear, then a shift by ``shift`` pieces."""

    spec: ShearSpec
    shift: int
    amplitude: float
    schedule: TimeSchedule
    ratio: float          # achieved norm ratio on Omega_0
    energy_ratio: float   # its square, as measured
    quad_error: float     # Richardson bound on the energy ratio
    L_fwd: float
    L_inv: float
    shift_ratios: tuple = ()
    c1: float = float("nan")

    @property
    def durations(self) -> Tuple[float, float]:
        return (1.0 / (1.0 + self.shift), self.shift / (1.0 + self.shift))

    def to_json(self) -> dict:
        return {
            "shear": self.spec.to_json(), "shift": self.shift, "amplitude": self.amplitude,
            "durations": list(self.durations), "ratio": self.ratio,
            "energy_ratio": self.energy_ratio, "quad_error": self.quad_error,
            "L_fwd": self.L_fwd, "L_inv": self.L_inv, "c1": self.c1,
        }


def grow_unit_step(datum: ScalarField, alpha_prime: float, d: int, n_quad: Optional[int] = None,
                   n_search: Optional[int] = None, max_doublings: int = 20,
                   max_halvings: int = 12, measure_c1: bool = True) -> GrowthStep:
    """Certified step with ``||grad theta(1)||_{L^2(Omega_0)} >= alpha_prime ||grad datum||``.

    The amplitude runs over ``A_0 2^k``: from the closed-form seed ``A_0`` the
    search halves while the step stays certified, steps down past probes the
    quadrature cannot resolve, and doubles when a resolved probe falls short.
    The scan uses ``n_search`` nodes per axis and the accepted amplitude is
    re-certified at ``n_quad``.
    """
    if not alpha_prime > 1:
        raise ValueError("alpha_prime must exceed 1")
    n = n_quad or default_quad(d)
    ns = n_search or max(32, n // 4)
    omega0 = Cube.unit(d)
    base = {m: _energy(datum, omega0, m) for m in {n, n // 2, ns, ns // 2}}
    if base[n] < 1e-14:
        raise ZeroGradient("datum gradient vanishes on Omega_0")
    L_fwd, L_inv = track_constants()
    A0 = seed_amplitude(alpha_prime, d, (L_fwd, L_inv))

    def run(A, m):
        return _trial(datum, omega0, A, alpha_prime, m, (base[m], base[m // 2]))

    best = None
    A = A0
    for _ in range(max_halvings):
        t = run(A, ns)
        if t.certified:
            best = t
        elif best is not None or t.resolved:
            break
        A /= 2.0
    start = best.A if best is not None else A
    final = None
    for k in range(max_doublings + 1):
        A = start * 2.0 ** k
        t = run(A, n)
        if t.certified:
            final = t
            break
    if final is None:
        raise AmplitudeSearchFailed(
            f"no certified amplitude for alpha'={alpha_prime} within {max_doublings} doublings")
    spec = final.spec
    sched = _step_schedule(spec, final.shift)
    c1 = _c1_norm(spec, final.shift) if measure_c1 else float("nan")
    return GrowthStep(spec, final.shift, spec.A, sched, math.sqrt(final.energy_ratio),
                      final.energy_ratio, final.error, L_fwd, L_inv, final.ratios, c1)


@functools.lru_cache(maxsize=256)
def _c1_norm(spec: ShearSpec, shift: int) -> float:
    """``sup|v| + sup|Dv|`` over both segment fields on a lattice of the support box."""
    n = 128 if spec.d == 2 else 64
    X = Cube.support_box(spec.d).midpoint_nodes(n)
    best = 0.0
    for f in step_fields(spec, shift):
        v = f.value(X)
        J = f.jacobian(X)
        best = max(best, float(np.max(np.linalg.norm(v, axis=1)) + np.max(np.linalg.norm(J, axis=(1, 2)))))
    return best


@dataclass(frozen=True)
class Block:
    """Iterated growth steps; ``schedule`` concatenates their segments."""

    steps: tuple
    alpha: float
    d: int
    base_norm: float                   # ||grad theta_bar||_{L^2(Omega_0)}
    measured_c1: float
    measured_beta: Optional[float] = None
    schedule: TimeSchedule = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def growth_factors(self) -> List[float]:
        """Certified ``||grad theta(n)|| / ||grad theta_bar||`` on Omega_0 for n = 0..n_steps."""
        out = [1.0]
        for s in self.steps:
            out.append(out[-1] * s.ratio)
        return out

    def periodic_schedule(self) -> TimeSchedule:
        return TimeSchedule(self.schedule.segments, periodic=True)

    def with_beta(self, beta: float) -> "Block":
        return Block(self.steps, self.alpha, self.d, self.base_norm, self.measured_c1, beta, self.schedule)

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha, "d": self.d, "n_steps": self.n_steps,
            "base_norm": self.base_norm, "measured_c1": self.measured_c1,
            "measured_beta": self.measured_beta,
            "growth_factors": self.growth_factors,
            "steps": [s.to_json() for s in self.steps],
        }


def _concat(steps) -> TimeSchedule:
    segs = []
    for s in steps:
        segs.extend(s.schedule.segments)
    return TimeSchedule(tuple(segs))


def build_block(datum: ScalarField, alpha: float, n_steps: int, d: int,
                n_quad: Optional[int] = None, measure_c1: bool = True) -> Block:
    """Iterate :func:`grow_unit_step` on the solution at each integer time."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    n = n_quad or default_quad(d)
    base = math.sqrt(_energy(datum, Cube.unit(d), n))
    if base ** 2 < 1e-14:
        raise ZeroGradient("datum gradient vanishes on Omega_0")
    alpha_prime = math.exp(alpha)
    steps: List[GrowthStep] = []
    current = datum
    for _ in range(n_steps):
        step = grow_unit_step(current, alpha_prime, d, n_quad=n, measure_c1=measure_c1)
        steps.append(step)
        current = transported(datum, _concat(steps), float(len(steps)))
    c1 = max(s.c1 for s in steps) if measure_c1 else float("nan")
    return Block(tuple(steps), float(alpha), int(d), base, c1, None, _concat(steps))


def block_flow_map(block: Block, t: float) -> ScheduleFlowMap:
    """Flow of the block from time 0 to ``t``, closed form on every segment."""
    if t < 0 or t > block.n_steps * (1 + 1e-12):
        raise TimeRangeError(f"time {t} outside [0, {block.n_steps}]")
    return ScheduleFlowMap(block.schedule, min(float(t), block.schedule.total))


def growth_samples(block: Block, datum: ScalarField, times, region: Optional[Cube] = None,
                   n_quad: Optional[int] = None) -> np.ndarray:
    """``||grad theta(t)||_{L^2(region)}`` at the given times (region defaults to the support box)."""
    region = region or Cube.support_box(block.d)
    n = n_quad or default_quad(block.d)
    out = []
    for t in times:
        out.append(math.sqrt(_energy(transported(datum, block.schedule, float(t)), region, n)))
    return np.array(out)


def empirical_beta(block: Block, datum: ScalarField, n_time_samples: int,
                   n_quad: Optional[int] = None, return_curve: bool = False):
    """Smallest ``beta >= 0`` with ``||grad theta(t)|| >= e^{alpha t - beta} ||grad theta_bar||`` on the samples.

    Norms at time ``t`` are taken over the support box, the reference norm over Omega_0.
    """
    if n_time_samples < 1:
        raise ValueError("need at least one time sample")
    times = np.linspace(0.0, block.n_steps, n_time_samples) if n_time_samples > 1 else np.zeros(1)
    norms = growth_samples(block, datum, times, n_quad=n_quad)
    logs = block.alpha * times - np.log(norms / block.base_norm)
    beta = max(0.0, float(np.max(logs)))
    if return_curve:
        return beta, times, norms
    return beta



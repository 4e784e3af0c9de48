"""Density point, shrinking cube family, global velocity and the two series.

Slots sit at ``x_n = x* + s D_0 2^{-n} e_1`` with side ``lambda_n = min(e^{-n},
d_n / 100)`` and time scale ``tau_n = (log 1/lambda_n)^{-2}``.  Slot ``n``
carries a building block for the datum seen through the affine map taking
Omega_0 = (0,1)^d onto ``Q_n``; the block's support box (-3,4)^d lands on
the seven-fold dilation of ``Q_n``.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq

from .block import Block, build_block
from .errors import DomainError, NoGrowthData, SlotRejected, SuperCritical
from .fields import Cube, GridField, ScalarField, as_batch

__all__ = [
    "SummedAreaTable", "local_average", "density_grid", "find_density_point",
    "CubeSlot", "CubePlan", "RescaledDatum", "plan_cubes", "verify_plan",
    "GlobalVelocity", "assemble_velocity", "series_solution", "series_field",
    "tail_threshold", "gamma_of", "gamma_regime", "default_schedule",
    "linf_prefactors", "slot_mass",
]

OMEGA0_CENTER = 0.5


# --- local averages ----------------------------------------------------------

class SummedAreaTable:
    """Exact box integrals of the cell-constant function defined by grid samples.

    Node ``k`` owns the cell ``[lo + (k - 1/2) h, lo + (k + 1/2) h]``.  The
    cumulative integral is multilinear between cell faces, so interpolating
    it linearly gives exact integrals over arbitrary boxes.
    """

    def __init__(self, grid: GridField):
        d, n, h = grid.dimension, grid.n, grid.spacing
        self.grid = grid
        self.dimension = d
        S = grid.samples * h ** d
        for ax in range(d):
            S = np.cumsum(S, axis=ax)
        S = np.pad(S, [(1, 0)] * d)
        faces = [lo + h * (np.arange(n + 1) - 0.5) for lo in grid.cube.lo]
        self._F = RegularGridInterpolator(faces, S, method="linear", bounds_error=True)

    def integral(self, lo, hi) -> np.ndarray:
        """Integrals over the boxes ``[lo_i, hi_i]`` (batches of corners)."""
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        d = self.dimension
        total = np.zeros(lo.shape[0])
        for corner in range(2 ** d):
            bits = [(corner >> a) & 1 for a in range(d)]
            P = np.where(np.array(bits, dtype=bool), hi, lo)
            sign = -1.0 if (d - sum(bits)) % 2 else 1.0
            total += sign * self._F(P)
        return total

    def average(self, x, r: float) -> np.ndarray:
        X, _ = as_batch(x, self.dimension)
        cube = self.grid.cube
        lo, hi = X - r / 2, X + r / 2
        if np.any(lo < cube.lo - 1e-12) or np.any(hi > cube.hi + 1e-12):
            raise DomainError("averaging cube leaves the sampled grid")
        lo = np.maximum(lo, cube.lo)
        hi = np.minimum(hi, cube.hi)
        return self.integral(lo, hi) / r ** self.dimension


_SAT_CACHE: "weakref.WeakKeyDictionary[GridField, SummedAreaTable]" = weakref.WeakKeyDictionary()


def _table(f: GridField) -> SummedAreaTable:
    sat = _SAT_CACHE.get(f)
    if sat is None:
        sat = SummedAreaTable(f)
        _SAT_CACHE[f] = sat
    return sat


def local_average(f: GridField, x, r: float):
    """Mean of ``f`` over the side-``r`` cube centred at ``x`` (O(1) per query after a one-off table)."""
    if not r > 0:
        raise ValueError("averaging side must be positive")
    X, single = as_batch(x, f.dimension)
    out = _table(f).average(X, r)
    return float(out[0]) if single else out


def density_grid(rho_bar: ScalarField, region: Cube, n: int) -> GridField:
    """``|grad rho_bar|^2`` sampled at the ``n^d`` nodes of ``region``."""
    axes = [np.linspace(lo, hi, n) for lo, hi in zip(region.lo, region.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    _, g = rho_bar.evaluate(nodes)
    return GridField(region, np.sum(g * g, axis=1).reshape((n,) * region.dimension), order=1)


@dataclass(frozen=True)
class DensityPoint:
    x_star: tuple
    delta_bar: float
    probe_r: float
    averages: tuple      # A_r(x*) at r, r/2, r/4
    stable: bool
    region: Cube

    def __iter__(self):
        return iter((np.array(self.x_star), self.delta_bar))


def _default_region(rho_bar: ScalarField) -> Cube:
    dom = getattr(rho_bar, "domain", None)
    if dom is not None:
        return dom
    return Cube((0.0,) * rho_bar.dimension, 4.0)


def find_density_point(rho_bar: ScalarField, probe_r: float, region: Optional[Cube] = None,
                       n: Optional[int] = None) -> DensityPoint:
    """Node maximising ``A_{probe_r}`` with ``delta_bar`` half that maximum.

    Candidates are restricted to nodes whose side-``2 probe_r`` cube stays in
    the region, which leaves room for the slots placed around ``x*``.
    """
    if not probe_r > 0:
        raise ValueError("probe_r must be positive")
    region = region or _default_region(rho_bar)
    d = region.dimension
    n = n or (257 if d == 2 else 65)
    f = density_grid(rho_bar, region, n)
    nodes = f.nodes()
    ok = np.all((nodes - probe_r >= region.lo - 1e-12) & (nodes + probe_r <= region.hi + 1e-12), axis=1)
    if not np.any(ok):
        raise ValueError("probe_r too large for the region")
    cand = nodes[ok]
    avg = local_average(f, cand, probe_r)
    k = int(np.argmax(avg))
    best = float(avg[k])
    if best < 1e-12:
        raise NoGrowthData("datum is constant on the probe region")
    x_star = cand[k]
    delta_bar = 0.5 * best
    radii = (probe_r, probe_r / 2, probe_r / 4)
    avgs = tuple(float(local_average(f, x_star, r)) for r in radii)
    stable = all(a >= delta_bar / 2 for a in avgs)
    return DensityPoint(tuple(float(c) for c in x_star), delta_bar, probe_r, avgs, stable, region)


# --- slots -------------------------------------------------------------------

class RescaledDatum(ScalarField):
    """``y -> rho_bar(x_n + lambda (y - c_0))``: the datum seen from a slot's block frame."""

    def __init__(self, rho_bar: ScalarField, center, side: float):
        self.base = rho_bar
        self.center = np.asarray(center, dtype=float)
        self.side = float(side)
        self.dimension = rho_bar.dimension
        self.domain = None

    def to_physical(self, Y):
        return self.center + self.side * (Y - OMEGA0_CENTER)

    def evaluate(self, y):
        Y, _ = as_batch(y, self.dimension)
        v, g = self.base.evaluate(self.to_physical(Y))
        return v, self.side * g


def slot_mass(rho_bar: ScalarField, cube: Cube, n_quad: int) -> float:
    """``||grad rho_bar||_{L^2(cube)}`` by tensor midpoint quadrature."""
    _, g = rho_bar.evaluate(cube.midpoint_nodes(n_quad))
    return math.sqrt(cube.volume / n_quad ** cube.dimension * float(np.sum(g * g)))


@dataclass(frozen=True)
class CubeSlot:
    index: int
    center: tuple
    side: float
    tau: float
    mass: float
    mass_bound: float
    halvings: int
    block: Optional[Block] = field(default=None, repr=False)

    @property
    def cube(self) -> Cube:
        return Cube(self.center, self.side)

    @property
    def support(self) -> Cube:
        return Cube(self.center, 7.0 * self.side)

    @property
    def horizon(self) -> float:
        """Physical time up to which the slot's growth is certified."""
        return self.tau * self.block.n_steps if self.block is not None else 0.0

    def to_block(self, X):
        return (X - np.asarray(self.center)) / self.side + OMEGA0_CENTER

    def to_json(self) -> dict:
        out = {"n": self.index, "center": list(self.center), "lambda": self.side, "tau": self.tau,
               "mass": self.mass, "mass_bound": self.mass_bound, "halvings": self.halvings}
        if self.block is not None:
            out["block"] = self.block.to_json()
        return out


@dataclass(frozen=True)
class CubePlan:
    slots: tuple
    x_star: tuple
    delta_bar: float
    bbox: Cube
    probe_r: float
    direction: float
    checks: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.slots)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.side for s in self.slots])

    @property
    def taus(self) -> np.ndarray:
        return np.array([s.tau for s in self.slots])

    @property
    def masses(self) -> np.ndarray:
        return np.array([s.mass for s in self.slots])

    @property
    def dimension(self) -> int:
        return self.bbox.dimension

    def to_json(self) -> dict:
        return {"x_star": list(self.x_star), "delta_bar": self.delta_bar, "probe_r": self.probe_r,
                "direction": self.direction, "bbox": self.bbox.to_json(),
                "slots": [s.to_json() for s in self.slots], "checks": dict(self.checks)}


def plan_cubes(rho_bar: ScalarField, N: int, x_star, delta_bar: float, probe_r: float = 0.05,
               bbox: Optional[Cube] = None, alpha: float = 0.3, n_steps: int = 3,
               build_blocks: bool = True, n_mass: Optional[int] = None,
               block_quad: Optional[int] = None, max_halvings: int = 30) -> CubePlan:
    """Place ``N`` slots, certify their masses and (optionally) build their blocks."""
    if N < 1:
        raise ValueError("N must be at least 1")
    x_star = np.asarray(x_star, dtype=float)
    d = x_star.size
    bbox = bbox or _default_region(rho_bar)
    n_mass = n_mass or (64 if d == 2 else 16)
    D0 = float(probe_r)
    # walk along +e_1 unless the first dilated slot would leave the box
    direction = 1.0
    first = x_star.copy()
    first[0] += D0 / 2
    if not bbox.contains_cube(Cube(first, 7.0 * min(math.exp(-1), D0 / 200))):
        direction = -1.0
    C = math.sqrt(delta_bar / 2.0)
    slots: List[CubeSlot] = []
    for n in range(1, N + 1):
        dn = D0 * 2.0 ** (-n)
        center = x_star.copy()
        center[0] += direction * dn
        lam = min(math.exp(-n), dn / 100.0)
        halvings = 0
        while True:
            cube = Cube(center, lam)
            mass = slot_mass(rho_bar, cube, n_mass)
            bound = C * lam ** (d / 2.0)
            if mass >= bound:
                break
            if halvings >= max_halvings:
                raise SlotRejected(
                    f"slot {n}: mass {mass:.3e} below {bound:.3e} after {halvings} halvings",
                    {"slot": n, "center": center.tolist(), "lambda": lam, "mass": mass, "bound": bound})
            lam /= 2.0
            halvings += 1
        tau = math.log(1.0 / lam) ** -2
        block = None
        if build_blocks:
            block = build_block(RescaledDatum(rho_bar, center, lam), alpha, n_steps, d, n_quad=block_quad)
        slots.append(CubeSlot(n, tuple(float(c) for c in center), lam, tau, mass, bound, halvings, block))
    plan = CubePlan(tuple(slots), tuple(float(c) for c in x_star), float(delta_bar), bbox, D0, direction)
    return CubePlan(plan.slots, plan.x_star, plan.delta_bar, plan.bbox, plan.probe_r, plan.direction,
                    verify_plan(plan, rho_bar, n_mass))


def verify_plan(plan: CubePlan, rho_bar: Optional[ScalarField] = None, n_mass: Optional[int] = None) -> Dict[str, bool]:
    """Re-derive every plan invariant from the raw slot data."""
    d = plan.dimension
    slots = plan.slots
    lam = plan.lambdas
    idx = np.arange(1, plan.N + 1)
    C = math.sqrt(plan.delta_bar / 2.0)
    checks = {
        "lambda_cap": bool(np.all(lam <= np.exp(-idx) * (1 + 1e-15))),
        "tau_formula": bool(all(abs(s.tau - math.log(1.0 / s.side) ** -2) <= 1e-15 * max(1.0, s.tau)
                                for s in slots)),
        "mass_bound": bool(all(s.mass >= C * s.side ** (d / 2.0) for s in slots)),
    }
    if rho_bar is not None:
        n_mass = n_mass or (64 if d == 2 else 16)
        checks["mass_recomputed"] = bool(all(
            abs(slot_mass(rho_bar, s.cube, n_mass) - s.mass) <= 1e-12 * max(1.0, s.mass) for s in slots))
    disjoint = True
    for a in range(plan.N):
        for b in range(a + 1, plan.N):
            gap = np.max(np.abs(np.asarray(slots[a].center) - np.asarray(slots[b].center)))
            if gap < 3.5 * (slots[a].side + slots[b].side):
                disjoint = False
    checks["disjoint_7lambda"] = disjoint
    checks["inside_bbox"] = bool(all(plan.bbox.contains_cube(s.support) for s in slots))
    dist = [float(np.linalg.norm(np.asarray(s.center) - np.asarray(plan.x_star))) for s in slots]
    checks["centers_converge"] = bool(all(b < a for a, b in zip(dist, dist[1:]))) and dist[-1] <= plan.probe_r
    return checks


# --- the assembled velocity --------------------------------------------------

class GlobalVelocity:
    """``v(x, t) = sum_n (lambda_n / tau_n) u_n((x - x_n)/lambda_n + c_0, t / tau_n)``.

    Each ``u_n`` is slot ``n``'s block schedule repeated periodically in time.
    Supports are disjoint, so a point dispatches to at most one slot.
    """

    def __init__(self, plan: CubePlan):
        if not plan.slots:
            raise ValueError("empty plan")
        if any(s.block is None for s in plan.slots):
            raise ValueError("plan was built without blocks")
        self.plan = plan
        self.dimension = plan.dimension
        self.schedules = [s.block.periodic_schedule() for s in plan.slots]

    def slot_of(self, X) -> np.ndarray:
        """Slot position (0-based) owning each point, -1 off every support."""
        X, _ = as_batch(X, self.dimension)
        owner = np.full(X.shape[0], -1, dtype=np.int64)
        for k, s in enumerate(self.plan.slots):
            owner[s.support.contains(X, closed=False) & (owner < 0)] = k
        return owner

    def value(self, x, t: float):
        X, single = as_batch(x, self.dimension)
        out = np.zeros_like(X)
        owner = self.slot_of(X)
        for k, s in enumerate(self.plan.slots):
            m = owner == k
            if np.any(m):
                f = self.schedules[k].active(t / s.tau)[1]
                out[m] = (s.side / s.tau) * f.value(s.to_block(X[m]))
        return out[0] if single else out

    def jacobian(self, x, t: float):
        X, single = as_batch(x, self.dimension)
        d = self.dimension
        out = np.zeros((X.shape[0], d, d))
        owner = self.slot_of(X)
        for k, s in enumerate(self.plan.slots):
            m = owner == k
            if np.any(m):
                f = self.schedules[k].active(t / s.tau)[1]
                out[m] = f.jacobian(s.to_block(X[m])) / s.tau
        return out[0] if single else out

    def breakpoints(self, t0: float, t1: float) -> np.ndarray:
        """All physical times in ``(t0, t1)`` where some slot switches segment."""
        pts = []
        for k, s in enumerate(self.plan.slots):
            sched = self.schedules[k]
            period = sched.total * s.tau
            edges = sched.breakpoints[:-1] * s.tau
            first = math.floor(t0 / period)
            last = math.ceil(t1 / period)
            for rep in range(first, last + 1):
                for e in edges:
                    tt = rep * period + e
                    if t0 < tt < t1:
                        pts.append(tt)
        return np.unique(np.array(pts, dtype=float))


def assemble_velocity(plan: CubePlan) -> GlobalVelocity:
    return GlobalVelocity(plan)


def linf_prefactors(lambdas, taus) -> np.ndarray:
    """``lambda_n / tau_n``, the factor relating ``||v_n||_inf`` to ``||u_n||_inf``."""
    return np.asarray(lambdas, dtype=float) / np.asarray(taus, dtype=float)


# --- series ------------------------------------------------------------------

def default_schedule(N: int):
    """``lambda_n = e^{-n}`` and ``tau_n = n^{-2}`` for n = 1..N."""
    n = np.arange(1, N + 1, dtype=float)
    return np.exp(-n), n ** -2.0


def series_solution(lambdas, taus, t: float, d: int, N: Optional[int] = None, masses=None) -> np.ndarray:
    """Log partial sums ``S_1..S_N`` of ``sum_n e^{t / tau_n} M_n``.

    ``M_n`` defaults to ``lambda_n^{d/2}``; every term is handled through its
    logarithm so that the divergent sums never overflow.
    """
    lam = np.asarray(lambdas, dtype=float)
    tau = np.asarray(taus, dtype=float)
    N = lam.size if N is None else N
    lam, tau = lam[:N], tau[:N]
    if masses is None:
        logM = 0.5 * d * np.log(lam)
    else:
        logM = np.log(np.asarray(masses, dtype=float)[:N])
    terms = t / tau + logM
    return np.logaddexp.accumulate(terms)


def gamma_of(r: float, p: float, d: int) -> float:
    """``gamma = 1 - r + d/p``; positive exactly below the Lipschitz embedding threshold."""
    if p < 1 or r < 0:
        raise ValueError("need p >= 1 and r >= 0")
    return 1.0 - r + d / p


def gamma_regime(gamma: float) -> str:
    if gamma > 0:
        return "subcritical"
    return "critical" if gamma == 0 else "supercritical"


def tail_threshold(gamma: float) -> int:
    """Smallest integer ``N`` with ``s^2 <= e^{gamma s / 2}`` for every ``s >= N``."""
    if not gamma > 0:
        raise SuperCritical("gamma must be positive")
    # s^2 e^{-gamma s/2} peaks at s = 4/gamma; past the last crossing it stays below 1
    h = lambda s: 2.0 * math.log(s) - 0.5 * gamma * s
    peak = 4.0 / gamma
    if h(peak) <= 0:
        return 1
    hi = peak
    while h(hi) > 0:
        hi *= 2.0
    root = brentq(h, peak, hi)
    return max(1, int(math.ceil(root)))


@dataclass(frozen=True)
class FieldSeries:
    partial: float
    tail: float          # inf when N is below the threshold
    threshold: int
    partials: tuple

    @property
    def upper(self) -> float:
        return self.partial + self.tail

    def __iter__(self):
        return iter((self.partial, self.tail))


def series_field(lambdas, taus, gamma: float, N: Optional[int] = None) -> FieldSeries:
    """Partial sum of ``lambda_n^gamma / tau_n`` with the geometric tail bound.

    The tail ``e^{-gamma N / 2} / (1 - e^{-gamma / 2})`` bounds the remainder of
    any continuation with ``lambda_n <= e^{-n}`` once ``N`` passes the threshold.
    """
    if not gamma > 0:
        raise SuperCritical(f"gamma = {gamma} is not positive")
    lam = np.asarray(lambdas, dtype=float)
    tau = np.asarray(taus, dtype=float)
    N = lam.size if N is None else N
    terms = lam[:N] ** gamma / tau[:N]
    partials = np.cumsum(terms)
    thr = tail_threshold(gamma)
    tail = math.exp(-gamma * N / 2.0) / (1.0 - math.exp(-gamma / 2.0)) if N >= thr else math.inf
    return FieldSeries(float(math.fsum(terms)), tail, thr, tuple(float(p) for p in partials))

"""Sobolev meters.

* ``l2_grad_norm``: ``||grad rho(t)||_{L^2(cube)}`` by tensor midpoint quadrature.
* ``fractional_h_norm``: the homogeneous ``H^r`` seminorm of periodic samples by FFT.
* ``wkp_seminorm``: integer-order ``W^{k,p}`` seminorms of a velocity by quadrature.
* ``velocity_norm_series``: the per-slot norms of the assembled velocity through
  the rescaling identity ``||v_n(t)|| = lambda_n^gamma / tau_n ||u_n(t / tau_n)||``.
* ``growth_curve``: measured gradient norms on the slot cubes against their
  certified lower bounds.

Every quadrature value carries a Richardson estimate: the same integral on the
half-resolution grid, with the difference scaled for a second-order rule.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import AliasWarning, FiniteDifferenceWarning, SuperCritical, TimeRangeError
from .fields import Cube, ScalarField, StationaryVelocity, as_batch
from .plan import CubePlan, GlobalVelocity, gamma_of, tail_threshold

__all__ = [
    "NormReport", "l2_grad_norm", "periodic_samples", "fractional_h_norm",
    "wkp_seminorm", "velocity_norm_series", "direct_slot_norm", "SlotNorm",
    "GrowthCurve", "growth_curve", "GROWTH_COLUMNS", "rescaled_velocity", "continuation_tail",
]

_CHUNK = 1 << 16
ALIAS_THRESHOLD = 1e-6


@dataclass(frozen=True)
class NormReport:
    label: str
    value: float
    n_quad: int
    error: float

    def __post_init__(self):
        if self.value < 0 or self.error < 0:
            raise ValueError("norm values and error estimates are nonnegative")

    def __float__(self):
        return self.value

    def to_json(self) -> dict:
        return {"label": self.label, "value": self.value, "n_quad": self.n_quad, "error": self.error}


def _richardson(fine: float, coarse: float) -> float:
    return abs(fine - coarse) / 3.0


# --- H^1 on a cube ----------------------------------------------------------

def _gradients(obj, X, t: float):
    if hasattr(obj, "evaluate_batch"):
        return obj.evaluate_batch(X, t)[1]
    if t != 0:
        raise TimeRangeError("a plain field has no time dependence; pass a solution handle")
    return obj.evaluate(X)[1]


def _grad_energy(obj, cube: Cube, t: float, n: int) -> float:
    nodes = cube.midpoint_nodes(n)
    total = 0.0
    for s in range(0, nodes.shape[0], _CHUNK):
        g = _gradients(obj, nodes[s:s + _CHUNK], t)
        total += float(np.sum(g * g))
    return cube.volume / n ** cube.dimension * total


def l2_grad_norm(obj, cube: Cube, t: float = 0.0, n_quad: int = 128) -> NormReport:
    """``(int_cube |grad rho(x, t)|^2 dx)^{1/2}`` for a field (``t = 0``) or a solution handle."""
    if n_quad < 16:
        raise ValueError("n_quad must be at least 16")
    fine = math.sqrt(_grad_energy(obj, cube, t, n_quad))
    coarse = math.sqrt(_grad_energy(obj, cube, t, n_quad // 2))
    return NormReport("||grad rho||_L2", fine, n_quad, _richardson(fine, coarse))


# --- fractional H^r by FFT --------------------------------------------------

def periodic_samples(f: ScalarField, period: float, n: int, origin=None) -> np.ndarray:
    """Values of ``f`` on the ``n^d`` grid ``origin + period * k / n`` (right endpoint excluded)."""
    d = f.dimension
    o = np.zeros(d) if origin is None else np.asarray(origin, dtype=float)
    ax = period * np.arange(n) / n
    mesh = np.meshgrid(*[ax + o[k] for k in range(d)], indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    return f.value(X).reshape((n,) * d)


def fractional_h_norm(samples: np.ndarray, period: float, r: float) -> NormReport:
    """Homogeneous ``H^r`` seminorm ``(V sum_k |k|^{2r} |c_k|^2)^{1/2}`` of periodic samples.

    ``c_k`` are the normalised discrete Fourier coefficients and ``V`` the cell
    volume, so ``r = 0`` gives the L^2 norm of the mean-free part.  The error
    column compares against the every-other-sample subgrid.
    """
    if r < 0:
        raise ValueError("r must be nonnegative")
    a = np.asarray(samples, dtype=float)
    value = _fourier_seminorm(a, period, r, warn=True)
    if all(s % 2 == 0 and s >= 4 for s in a.shape):
        half = _fourier_seminorm(a[(slice(None, None, 2),) * a.ndim], period, r, warn=False)
        err = abs(value - half)
    else:
        err = 0.0
    return NormReport(f"|.|_H^{r:g}", value, a.shape[0], err)


def _fourier_seminorm(a: np.ndarray, period: float, r: float, warn: bool) -> float:
    d = a.ndim
    c = np.fft.fftn(a) / a.size
    power = np.abs(c) ** 2
    idx = [np.fft.fftfreq(s, d=1.0 / s) for s in a.shape]        # integer frequencies
    K = np.meshgrid(*idx, indexing="ij")
    k2 = sum((2.0 * math.pi * k / period) ** 2 for k in K)
    power_nz = np.where(k2 > 0, power, 0.0)
    if warn:
        total = float(np.sum(power_nz))
        top = np.zeros(a.shape, dtype=bool)
        for k, s in zip(K, a.shape):
            top |= np.abs(k) > s // 4
        frac = float(np.sum(power_nz[top])) / total if total > 0 else 0.0
        if frac > ALIAS_THRESHOLD:
            warnings.warn(f"top-octave energy fraction {frac:.2e} exceeds {ALIAS_THRESHOLD:g}",
                          AliasWarning, stacklevel=3)
    weight = np.where(k2 > 0, k2 ** r, 0.0) if r > 0 else (k2 > 0).astype(float)
    return math.sqrt(period ** d * float(np.sum(weight * power_nz)))


# --- integer W^{k,p} --------------------------------------------------------

class _ScalarAsVelocity(StationaryVelocity):
    """A scalar field seen as a one-component 'velocity' so the same meter applies."""

    def __init__(self, f: ScalarField):
        self.f = f
        self.dimension = f.dimension
        self.support = None

    def value(self, x):
        X, _ = as_batch(x, self.dimension)
        return self.f.value(X)[:, None]

    def jacobian(self, x):
        X, _ = as_batch(x, self.dimension)
        return self.f.gradient(X)[:, None, :]


def _as_velocity(v):
    return _ScalarAsVelocity(v) if isinstance(v, ScalarField) else v


def _derivative_tensor(v, X: np.ndarray, k: int, h: float) -> np.ndarray:
    """All order-``k`` partials, shape ``(n, components * d^k)``."""
    n, d = X.shape
    if k == 0:
        return np.asarray(v.value(X)).reshape(n, -1)
    if k == 1:
        return np.asarray(v.jacobian(X)).reshape(n, -1)
    parts = []
    for ax in range(d):
        e = np.zeros(d)
        e[ax] = h
        parts.append((_derivative_tensor(v, X + e, k - 1, h) - _derivative_tensor(v, X - e, k - 1, h)) / (2 * h))
    return np.stack(parts, axis=-1).reshape(n, -1)


def _wkp_integral(v, k: int, p: float, cube: Cube, n: int) -> float:
    nodes = cube.midpoint_nodes(n)
    h = 1e-5 if k == 2 else 1e-3
    total = 0.0
    for s in range(0, nodes.shape[0], _CHUNK):
        D = _derivative_tensor(v, nodes[s:s + _CHUNK], k, h)
        if p == 2:
            total += float(np.sum(D * D))
        else:
            # sum over ordered index tuples of |d^alpha v|^p, |.| Euclidean over components
            comps = D.shape[1] // cube.dimension ** k
            D = D.reshape(D.shape[0], comps, -1)
            total += float(np.sum(np.linalg.norm(D, axis=1) ** p))
    return cube.volume / n ** cube.dimension * total


def wkp_seminorm(v, k: int, p: float, cube: Cube, n_quad: int = 128) -> NormReport:
    """``(sum_alpha int_cube |d^alpha v|^p)^{1/p}`` over ordered ``alpha`` of length ``k``.

    Orders 0 and 1 use the analytic value and jacobian, order 2 a central
    difference of the jacobian; higher orders nest differences and warn.
    """
    if not (isinstance(k, (int, np.integer)) and k >= 0):
        raise ValueError("k must be a nonnegative integer")
    if not (1 <= p < math.inf):
        raise ValueError("p must lie in [1, inf); L^inf is a lattice maximum, not a quadrature")
    if n_quad < 16:
        raise ValueError("n_quad must be at least 16")
    if k >= 3:
        warnings.warn(f"order {k} derivatives by nested finite differences", FiniteDifferenceWarning,
                      stacklevel=2)
    vv = _as_velocity(v)
    fine = _wkp_integral(vv, int(k), float(p), cube, n_quad) ** (1.0 / p)
    coarse = _wkp_integral(vv, int(k), float(p), cube, n_quad // 2) ** (1.0 / p)
    return NormReport(f"|.|_W^{k},{p:g}", fine, n_quad, _richardson(fine, coarse))


def _wrp(v, r: float, p: float, cube: Cube, n: int) -> NormReport:
    """Integer ``r`` directly; fractional ``r`` by interpolating the neighbouring integer orders."""
    lo = math.floor(r)
    if r == lo:
        return wkp_seminorm(v, int(r), p, cube, n)
    theta = r - lo
    a = wkp_seminorm(v, lo, p, cube, n)
    b = wkp_seminorm(v, lo + 1, p, cube, n)
    val = a.value ** (1 - theta) * b.value ** theta
    err = (1 - theta) * val / max(a.value, 1e-300) * a.error + theta * val / max(b.value, 1e-300) * b.error
    return NormReport(f"|.|_W^{r:g},{p:g} (interpolated)", val, n, err)


# --- the assembled velocity -------------------------------------------------

@dataclass(frozen=True)
class SlotNorm:
    slot: int
    lam: float
    tau: float
    factor: float          # lambda^gamma / tau
    reference: float       # max over the block's segments of ||u||
    segment_refs: tuple
    contribution: float

    def to_json(self) -> dict:
        return {"slot": self.slot, "lambda": self.lam, "tau": self.tau, "factor": self.factor,
                "reference": self.reference, "segment_refs": list(self.segment_refs),
                "contribution": self.contribution}


def _segment_key(f):
    prof = getattr(f, "profile", None)
    m = getattr(f, "map", None)
    if prof is None or m is None:
        return ("id", id(f))
    return (type(prof).__name__, getattr(prof, "spec", None), f.speed, m.dimension, tuple(m.plane),
            getattr(f, "extended", None), getattr(f, "c_out", None), getattr(f, "c_in", None))


_REF_CACHE: dict = {}


def _reference_norm(f, r: float, p: float, n: int) -> float:
    key = (_segment_key(f), float(r), float(p), int(n))
    if key[0][0] == "id" or key not in _REF_CACHE:
        box = f.support if getattr(f, "support", None) is not None else Cube.support_box(f.dimension)
        val = _wrp(f, r, p, box, n).value
        if key[0][0] == "id":
            return val
        _REF_CACHE[key] = val
    return _REF_CACHE[key]


def continuation_tail(N: int, gamma: float) -> float:
    """Bound on ``sum_{n > N} n^2 e^{-gamma n}``, the default-schedule remainder.

    Terms below the threshold ``N(gamma)`` are summed exactly; from there on
    the closed geometric bound takes over.  Finite for every ``N``.
    """
    K = max(int(N) + 1, tail_threshold(gamma))
    head = math.fsum(n * n * math.exp(-gamma * n) for n in range(int(N) + 1, K))
    return head + math.exp(-gamma * K / 2.0) / (1.0 - math.exp(-gamma / 2.0))


def velocity_norm_series(plan: CubePlan, r: float, p: float, N: Optional[int] = None,
                         n_quad: Optional[int] = None):
    """``sup_t ||v(t)||_{W^{r,p}}`` bounded slot by slot through the rescaling identity.

    Returns ``(report, table)``: the report's value is the finite sum plus the
    continuation tail bound (scaled by the largest reference norm seen), the
    table lists each slot's factor, per-segment reference norms and
    contribution.
    """
    d = plan.dimension
    gamma = gamma_of(r, p, d)
    if not gamma > 0:
        raise SuperCritical(f"gamma = {gamma:g} at (r, p) = ({r:g}, {p:g}); the series cannot converge")
    N = plan.N if N is None else int(N)
    if not 1 <= N <= plan.N:
        raise ValueError(f"N must lie in [1, {plan.N}]")
    n = n_quad or (128 if d == 2 else 32)
    table: List[SlotNorm] = []
    for s in plan.slots[:N]:
        if s.block is None:
            raise ValueError("plan was built without blocks")
        refs = tuple(_reference_norm(f, r, p, n) for _, f in s.block.schedule.segments)
        factor = s.side ** gamma / s.tau
        ref = max(refs)
        table.append(SlotNorm(s.index, s.side, s.tau, factor, ref, refs, factor * ref))
    top = max(t.reference for t in table)
    total = math.fsum(t.contribution for t in table) + top * continuation_tail(N, gamma)
    return NormReport(f"sup_t |v|_W^{r:g},{p:g}", total, n, 0.0), table


def rescaled_velocity(u: StationaryVelocity, center, lam: float, tau: float) -> StationaryVelocity:
    """``x -> (lambda / tau) u((x - center) / lambda + 1/2)`` as a stationary field."""
    return _Rescaled(u, np.asarray(center, dtype=float), float(lam), float(tau))


class _Rescaled(StationaryVelocity):
    def __init__(self, u, center, lam, tau):
        self.u = u
        self.center = center
        self.lam = lam
        self.tau = tau
        self.dimension = u.dimension
        self.support = Cube(center, 7.0 * lam)

    def _y(self, X):
        return (X - self.center) / self.lam + 0.5

    def value(self, x):
        X, _ = as_batch(x, self.dimension)
        return (self.lam / self.tau) * self.u.value(self._y(X))

    def jacobian(self, x):
        X, _ = as_batch(x, self.dimension)
        return self.u.jacobian(self._y(X)) / self.tau


class _FrozenVelocity(StationaryVelocity):
    def __init__(self, gv: GlobalVelocity, t: float):
        self.gv = gv
        self.t = float(t)
        self.dimension = gv.dimension
        self.support = None

    def value(self, x):
        return self.gv.value(x, self.t)

    def jacobian(self, x):
        return self.gv.jacobian(x, self.t)


def direct_slot_norm(plan: CubePlan, slot: int, r: float, p: float, t: float,
                     n_quad: Optional[int] = None):
    """Cross-check for one slot at time ``t``.

    Returns ``(direct, scaled)``: quadrature of the assembled velocity on the
    slot's support cube, and ``lambda^gamma / tau`` times the reference norm
    of the block segment active at ``t / tau``, both on matched node sets.
    """
    s = plan.slots[slot - 1]
    d = plan.dimension
    gamma = gamma_of(r, p, d)
    n = n_quad or (128 if d == 2 else 32)
    gv = GlobalVelocity(plan)
    direct = _wrp(_FrozenVelocity(gv, t), r, p, s.support, n).value
    seg = gv.schedules[slot - 1].active(t / s.tau)[1]
    ref = _wrp(seg, r, p, Cube.support_box(d), n).value
    return direct, s.side ** gamma / s.tau * ref


# --- growth curve -----------------------------------------------------------

GROWTH_COLUMNS = ("t", "cube", "measured_h1", "lower_bound_log", "aggregate_log")


@dataclass
class GrowthCurve:
    rows: List[tuple]
    betas: dict = field(default_factory=dict)
    columns: tuple = GROWTH_COLUMNS

    def all_bounded(self) -> bool:
        """Measured norm at least the certified lower bound on every row."""
        ok = True
        for t, _, m, lb, _ in self.rows:
            if math.isfinite(lb):
                ok &= m > 0 and math.log(m) >= lb - 1e-12
        return bool(ok)


def growth_curve(handle, cubes: Optional[Sequence[Cube]] = None, times: Sequence[float] = (0.0,),
                 n_quad: Optional[int] = None) -> GrowthCurve:
    """Rows ``(t, cube, ||grad rho(t)||_{L^2(cube)}, lower_bound_log, aggregate_log)``.

    Cubes default to the plan's slot cubes ``Q_n``.  For a slot cube the lower
    bound is ``alpha t / tau_n - beta_n + log M_n`` where ``beta_n`` is the
    smallest nonnegative shift making it hold on the sampled times; the
    aggregate column is the log-sum of the bounds of slots ``1..n``.
    Cubes that are not slot cubes get ``nan`` bounds.  The default resolution
    matches the one used for the slot masses, so the ``t = 0`` rows reproduce
    ``M_n`` exactly.
    """
    plan = handle.plan
    n_quad = n_quad or (64 if plan.dimension == 2 else 16)
    slots = plan.slots
    cubes = list(cubes) if cubes is not None else [s.cube for s in slots]
    times = [float(t) for t in times]
    for t in times:
        handle._check_time(t)
    owner = []
    for c in cubes:
        match = None
        for s in slots:
            if np.allclose(c.center, s.center, rtol=0, atol=1e-14) and abs(c.side - s.side) <= 1e-14:
                match = s
        owner.append(match)
    measured = np.array([[l2_grad_norm(handle, c, t, n_quad).value for c in cubes] for t in times])
    rate = np.zeros((len(times), len(cubes)))
    logm = np.full(len(cubes), np.nan)
    betas = {}
    for j, s in enumerate(owner):
        if s is None:
            continue
        alpha = s.block.alpha if s.block is not None else 0.0
        rate[:, j] = [alpha * t / s.tau for t in times]
        logm[j] = math.log(s.mass)
        gap = rate[:, j] + logm[j] - np.log(np.maximum(measured[:, j], 1e-300))
        betas[s.index] = max(0.0, float(np.max(gap)))
    rows = []
    for i, t in enumerate(times):
        acc = -math.inf
        for j, c in enumerate(cubes):
            s = owner[j]
            if s is None:
                lb = math.nan
                agg = acc if math.isfinite(acc) else math.nan
            else:
                lb = float(rate[i, j] + logm[j] - betas[s.index])
                acc = float(np.logaddexp(acc, lb))
                agg = acc
            rows.append((t, j + 1, float(measured[i, j]), lb, agg))
    return GrowthCurve(rows, betas)

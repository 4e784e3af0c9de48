"""Geometric and field primitives.

Everything here works on batches: a batch of points is an array of shape
``(n, d)``.  Single points of shape ``(d,)`` are accepted wherever a batch is,
and the result is squeezed back accordingly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import NdBSpline, make_interp_spline

from .errors import DomainError, NoClosedForm, TimeRangeError

__all__ = [
    "Point", "Cube", "ScalarField", "AnalyticField", "GridField",
    "ComposedField", "StationaryVelocity", "ConstantVelocity", "TimeSchedule",
    "grid_sample", "interpolate", "schedule_flow_map", "schedule_inverse",
    "as_batch", "write_grid", "read_grid", "fd_divergence", "ScheduleFlowMap",
    "transported", "ScaledVelocity",
]


def as_batch(x, d: Optional[int] = None):
    """Return ``(X, single)`` where X is a float array of shape (n, d)."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected points of shape (n, d), got {X.shape}")
    if d is not None and X.shape[1] != d:
        raise ValueError(f"expected dimension {d}, got {X.shape[1]}")
    return X, single


@dataclass(frozen=True)
class Point:
    coords: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.coords)
        if len(c) < 2:
            raise ValueError("a point needs at least two coordinates")
        if not all(math.isfinite(v) for v in c):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "coords", c)

    @property
    def dimension(self) -> int:
        return len(self.coords)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coords, dtype=dtype or float)


@dataclass(frozen=True)
class Cube:
    """Axis-aligned open cube ``center + side * (-1/2, 1/2)^d``."""

    center: tuple
    side: float

    def __post_init__(self):
        c = tuple(float(v) for v in np.asarray(self.center, dtype=float).ravel())
        if len(c) < 2:
            raise ValueError("cube dimension must be at least 2")
        if not (self.side > 0 and math.isfinite(self.side)):
            raise ValueError("cube side must be positive and finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "side", float(self.side))

    @classmethod
    def from_bounds(cls, lo, hi) -> "Cube":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        sides = hi - lo
        if not np.allclose(sides, sides[0], rtol=1e-12, atol=0.0):
            raise ValueError("bounds do not describe a cube")
        return cls(tuple((lo + hi) / 2), float(sides[0]))

    @classmethod
    def unit(cls, d: int) -> "Cube":
        return cls((0.5,) * d, 1.0)

    @classmethod
    def support_box(cls, d: int) -> "Cube":
        """The cube (-3, 4)^d that carries every building block."""
        return cls((0.5,) * d, 7.0)

    @property
    def dimension(self) -> int:
        return len(self.center)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - self.side / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + self.side / 2

    @property
    def volume(self) -> float:
        return self.side ** self.dimension

    def dilate(self, k: float) -> "Cube":
        return Cube(self.center, self.side * k)

    def contains(self, x, closed: bool = True, tol: float = 0.0):
        X, single = as_batch(x, self.dimension)
        lo, hi = self.lo - tol, self.hi + tol
        if closed:
            inside = np.all((X >= lo) & (X <= hi), axis=1)
        else:
            inside = np.all((X > lo) & (X < hi), axis=1)
        return bool(inside[0]) if single else inside

    def contains_cube(self, other: "Cube", tol: float = 1e-12) -> bool:
        return bool(np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol))

    def midpoint_nodes(self, n: int) -> np.ndarray:
        """Tensor midpoint nodes, ``n`` per axis, shape (n**d, d)."""
        h = self.side / n
        axes = [lo + h * (np.arange(n) + 0.5) for lo in self.lo]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def random_points(self, rng: np.random.Generator, n: int, margin: float = 0.0) -> np.ndarray:
        lo = self.lo + margin * self.side
        hi = self.hi - margin * self.side
        return rng.uniform(lo, hi, size=(n, self.dimension))

    def to_json(self) -> dict:
        return {"center": list(self.center), "side": self.side}


class ScalarField:
    """Evaluable scalar datum.  Subclasses implement ``evaluate``."""

    dimension: int
    domain: Optional[Cube]  # None means all of R^d (or a periodic torus)

    def evaluate(self, x):
        """Return ``(values, gradients)`` for a batch of points."""
        raise NotImplementedError

    def value(self, x):
        X, single = as_batch(x, self.dimension)
        v, _ = self.evaluate(X)
        return float(v[0]) if single else v

    def gradient(self, x):
        X, single = as_batch(x, self.dimension)
        _, g = self.evaluate(X)
        return g[0] if single else g

    def _check_domain(self, X):
        if self.domain is not None and not np.all(self.domain.contains(X, tol=1e-12)):
            raise DomainError("point outside the field's domain")


class AnalyticField(ScalarField):
    """Field given by vectorized callables ``f(X) -> (n,)``, ``grad(X) -> (n, d)``.

    ``period`` marks a torus field: points are wrapped before evaluation.
    """

    def __init__(self, f: Callable, grad: Callable, dimension: int,
                 domain: Optional[Cube] = None, period: Optional[float] = None,
                 name: str = "analytic"):
        self.f = f
        self.grad = grad
        self.dimension = int(dimension)
        self.domain = domain
        self.period = period
        self.name = name

    def evaluate(self, x):
        X, _ = as_batch(x, self.dimension)
        if self.period is not None:
            X = np.mod(X, self.period)
        else:
            self._check_domain(X)
        v = np.asarray(self.f(X), dtype=float).reshape(X.shape[0])
        g = np.asarray(self.grad(X), dtype=float).reshape(X.shape)
        return v, g

    def __repr__(self):
        return f"AnalyticField({self.name!r}, d={self.dimension})"


class GridField(ScalarField):
    """Tensor-product interpolant of samples on a uniform node grid.

    Nodes include both cube faces; spacing is ``side / (n - 1)``.  Order 3 uses
    not-a-knot cubic splines (gradients are exact derivatives of the spline),
    order 1 uses multilinear interpolation.
    """

    def __init__(self, cube: Cube, samples: np.ndarray, order: int = 3):
        samples = np.asarray(samples, dtype=float)
        d = cube.dimension
        if samples.ndim != d or len(set(samples.shape)) != 1:
            raise ValueError("samples must be an n x ... x n array matching the cube")
        n = samples.shape[0]
        if n < 2:
            raise ValueError("need at least two nodes per axis")
        if order not in (1, 3):
            raise ValueError("interpolation order must be 1 or 3")
        k = order if n > order else 1
        self.cube = cube
        self.domain = cube
        self.dimension = d
        self.samples = samples
        self.order = order
        self.n = n
        self.axes = [np.linspace(lo, hi, n) for lo, hi in zip(cube.lo, cube.hi)]
        coeffs = samples
        knots = []
        for ax in range(d):
            spl = make_interp_spline(self.axes[ax], coeffs, k=k, axis=ax)
            coeffs = np.moveaxis(spl.c, 0, ax)
            knots.append(spl.t)
        self._spline = NdBSpline(tuple(knots), coeffs, k)
        self._units = np.eye(d, dtype=np.int64)

    @property
    def spacing(self) -> float:
        return self.cube.side / (self.n - 1)

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def evaluate(self, x):
        X, _ = as_batch(x, self.dimension)
        self._check_domain(X)
        Xc = np.clip(X, self.cube.lo, self.cube.hi)
        v = self._spline(Xc)
        g = np.stack([self._spline(Xc, nu=self._units[a]) for a in range(self.dimension)], axis=1)
        return v, g


class ComposedField(ScalarField):
    """``base o inverse`` for an invertible map supplying ``inverse_with_jacobian``.

    ``mapping.inverse_with_jacobian(X)`` must return ``(Y, J)`` with
    ``Y = m^{-1}(X)`` and ``J = D(m^{-1})(X)``; the gradient is ``J^T grad(base)(Y)``.
    """

    def __init__(self, base: ScalarField, mapping, domain: Optional[Cube] = None):
        self.base = base
        self.mapping = mapping
        self.dimension = base.dimension
        self.domain = domain

    def evaluate(self, x):
        X, _ = as_batch(x, self.dimension)
        self._check_domain(X)
        Y, J = self.mapping.inverse_with_jacobian(X)
        v, g = self.base.evaluate(Y)
        return v, np.einsum("nij,ni->nj", J, g)


def grid_sample(field: ScalarField, cube: Cube, n_per_axis: int, order: int = 3) -> GridField:
    """Sample ``field`` at the ``n_per_axis**d`` nodes of ``cube``."""
    if n_per_axis < 2:
        raise ValueError("n_per_axis must be at least 2")
    if cube.dimension != field.dimension:
        raise ValueError("cube and field dimensions differ")
    if field.domain is not None and not field.domain.contains_cube(cube):
        raise DomainError("sampling cube is not inside the field's domain")
    axes = [np.linspace(lo, hi, n_per_axis) for lo, hi in zip(cube.lo, cube.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    vals, _ = field.evaluate(nodes)
    return GridField(cube, vals.reshape((n_per_axis,) * cube.dimension), order=order)


def interpolate(grid_field: GridField, x):
    """Value and gradient of the grid interpolant at ``x`` (one point or a batch)."""
    X, single = as_batch(x, grid_field.dimension)
    if not np.all(grid_field.cube.contains(X, tol=1e-12)):
        raise DomainError("interpolation point outside the sampled cube")
    v, g = grid_field.evaluate(X)
    if single:
        return float(v[0]), g[0]
    return v, g


# --- velocity fields -------------------------------------------------------

class StationaryVelocity:
    """Time-independent divergence-free velocity on R^d.

    Subclasses implement ``value`` and ``jacobian``; those with a closed-form
    flow also implement ``flow(X, t) -> (Y, DY/DX)``.
    """

    dimension: int
    support: Optional[Cube] = None
    has_flow: bool = False

    def value(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        raise NotImplementedError

    def flow(self, x, t: float):
        raise NoClosedForm(f"{type(self).__name__} has no closed-form flow")

    def scaled(self, speed: float) -> "StationaryVelocity":
        return ScaledVelocity(self, speed)


class ScaledVelocity(StationaryVelocity):
    """``speed * base``; its flow is the base flow run for ``speed * t``."""

    def __init__(self, base: StationaryVelocity, speed: float):
        self.base = base
        self.speed = float(speed)
        self.dimension = base.dimension
        self.support = base.support
        self.has_flow = base.has_flow

    def value(self, x):
        return self.speed * self.base.value(x)

    def jacobian(self, x):
        return self.speed * self.base.jacobian(x)

    def flow(self, x, t):
        return self.base.flow(x, self.speed * t)


class ConstantVelocity(StationaryVelocity):
    """Uniform translation; a test fixture more than a construction piece."""

    has_flow = True

    def __init__(self, vector):
        self.vector = np.asarray(vector, dtype=float)
        self.dimension = self.vector.size

    def value(self, x):
        X, single = as_batch(x, self.dimension)
        out = np.broadcast_to(self.vector, X.shape).copy()
        return out[0] if single else out

    def jacobian(self, x):
        X, single = as_batch(x, self.dimension)
        out = np.zeros((X.shape[0], self.dimension, self.dimension))
        return out[0] if single else out

    def flow(self, x, t):
        X, single = as_batch(x, self.dimension)
        Y = X + t * self.vector
        J = np.broadcast_to(np.eye(self.dimension), (X.shape[0], self.dimension, self.dimension)).copy()
        return (Y[0], J[0]) if single else (Y, J)


def fd_divergence(field: StationaryVelocity, X, h: float = 1e-5, order: int = 4) -> np.ndarray:
    """Central finite-difference divergence of ``field`` at a batch of points.

    ``order=4`` uses the five-point stencil, ``order=2`` the three-point one;
    both have step ``h``.
    """
    X, _ = as_batch(X, field.dimension)
    div = np.zeros(X.shape[0])
    for a in range(field.dimension):
        e = np.zeros(field.dimension)
        e[a] = h
        if order == 2:
            div += (field.value(X + e)[:, a] - field.value(X - e)[:, a]) / (2 * h)
        else:
            div += (8.0 * (field.value(X + e)[:, a] - field.value(X - e)[:, a])
                    - (field.value(X + 2 * e)[:, a] - field.value(X - 2 * e)[:, a])) / (12 * h)
    return div


@dataclass(frozen=True)
class TimeSchedule:
    """Ordered ``(duration, field)`` segments, optionally repeated periodically."""

    segments: tuple
    periodic: bool = False

    def __post_init__(self):
        segs = tuple((float(dur), f) for dur, f in self.segments)
        if not segs:
            raise ValueError("a schedule needs at least one segment")
        if any(not (dur > 0 and math.isfinite(dur)) for dur, _ in segs):
            raise ValueError("segment durations must be positive and finite")
        object.__setattr__(self, "segments", segs)

    @property
    def total(self) -> float:
        return math.fsum(dur for dur, _ in self.segments)

    @property
    def breakpoints(self) -> np.ndarray:
        """Segment start times within one period, plus the period end."""
        return np.concatenate([[0.0], np.cumsum([dur for dur, _ in self.segments])])

    def active(self, t: float):
        """Index and field of the segment active at time ``t`` (right-continuous)."""
        t = self._reduce(t)
        edges = self.breakpoints
        k = int(np.searchsorted(edges, t, side="right") - 1)
        k = min(max(k, 0), len(self.segments) - 1)
        return k, self.segments[k][1]

    def _reduce(self, t: float) -> float:
        if t < 0:
            raise TimeRangeError(f"negative time {t}")
        if self.periodic:
            return math.fmod(t, self.total)
        if t > self.total * (1 + 1e-12):
            raise TimeRangeError(f"time {t} beyond schedule length {self.total}")
        return min(t, self.total)

    def clipped(self, t: float):
        """List of ``(field, duration)`` pieces making up ``[0, t]``."""
        if t < 0:
            raise TimeRangeError(f"negative time {t}")
        pieces = []
        if self.periodic:
            reps, rem = divmod(t, self.total)
            for _ in range(int(reps)):
                pieces.extend((f, dur) for dur, f in self.segments)
            t = rem
        elif t > self.total * (1 + 1e-12):
            raise TimeRangeError(f"time {t} beyond schedule length {self.total}")
        left = t
        for dur, f in self.segments:
            if left <= 0:
                break
            step = min(dur, left)
            pieces.append((f, step))
            left -= step
        return pieces

    def value(self, x, t: float):
        _, f = self.active(t)
        return f.value(x)


def _rk4_segment(field: StationaryVelocity, X: np.ndarray, duration: float, dt: float, sign: float = 1.0):
    steps = max(1, int(math.ceil(duration / dt - 1e-9)))
    h = sign * duration / steps
    for _ in range(steps):
        k1 = field.value(X)
        k2 = field.value(X + 0.5 * h * k1)
        k3 = field.value(X + 0.5 * h * k2)
        k4 = field.value(X + h * k3)
        X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def _parse_integrator(integrator):
    if integrator in ("exact", None):
        return "exact", None
    if isinstance(integrator, str) and integrator.startswith("rk4"):
        dt = float(integrator.split(":")[1]) if ":" in integrator else 1e-3
        return "rk4", dt
    if isinstance(integrator, (tuple, list)) and integrator[0] == "rk4":
        return "rk4", float(integrator[1])
    raise ValueError(f"unknown integrator {integrator!r}")


def schedule_flow_map(sched: TimeSchedule, t: float, x, integrator="exact", with_jacobian: bool = False):
    """Flow of a piecewise-constant-in-time schedule from time 0 to ``t``.

    ``integrator`` is ``"exact"`` (per-segment closed forms) or ``("rk4", dt)``;
    RK4 steps are aligned so that no step straddles a segment boundary.
    """
    kind, dt = _parse_integrator(integrator)
    X, single = as_batch(x)
    d = X.shape[1]
    pieces = sched.clipped(t)
    J = np.broadcast_to(np.eye(d), (X.shape[0], d, d)).copy() if with_jacobian else None
    for f, dur in pieces:
        if kind == "exact":
            if not getattr(f, "has_flow", False):
                raise NoClosedForm(f"segment field {type(f).__name__} has no closed-form flow")
            X, Js = f.flow(X, dur)
            if with_jacobian:
                J = np.einsum("nij,njk->nik", Js, J)
        else:
            if with_jacobian:
                raise ValueError("the RK4 branch does not propagate jacobians")
            X = _rk4_segment(f, X, dur, dt)
    if single:
        return (X[0], J[0]) if with_jacobian else X[0]
    return (X, J) if with_jacobian else X


def schedule_inverse(sched: TimeSchedule, t: float, x):
    """``(Phi_t^{-1}(x), D Phi_t^{-1}(x))`` by running the closed forms backwards."""
    X, single = as_batch(x)
    d = X.shape[1]
    J = np.broadcast_to(np.eye(d), (X.shape[0], d, d)).copy()
    for f, dur in reversed(sched.clipped(t)):
        if not getattr(f, "has_flow", False):
            raise NoClosedForm(f"segment field {type(f).__name__} has no closed-form flow")
        X, Js = f.flow(X, -dur)
        J = np.einsum("nij,njk->nik", Js, J)
    return (X[0], J[0]) if single else (X, J)


class ScheduleFlowMap:
    """Time-``t`` flow of a schedule as an invertible map with jacobians."""

    def __init__(self, sched: TimeSchedule, t: float):
        sched.clipped(t)  # range check
        self.schedule = sched
        self.t = float(t)

    def forward(self, x):
        return schedule_flow_map(self.schedule, self.t, x)

    def forward_with_jacobian(self, x):
        return schedule_flow_map(self.schedule, self.t, x, with_jacobian=True)

    def jacobian(self, x):
        return self.forward_with_jacobian(x)[1]

    def inverse(self, x):
        return schedule_inverse(self.schedule, self.t, x)[0]

    def inverse_with_jacobian(self, x):
        return schedule_inverse(self.schedule, self.t, x)


def transported(datum: ScalarField, sched: TimeSchedule, t: float) -> ScalarField:
    """The datum carried by the schedule's flow to time ``t``."""
    if t == 0:
        return datum
    return ComposedField(datum, ScheduleFlowMap(sched, t), domain=None)


# --- flat binary layout for grid fields --------------------------------------

_MAGIC = b"RGLF"
_VERSION = 1


def write_grid(path, gf: GridField) -> None:
    d, n = gf.dimension, gf.n
    header = _MAGIC + struct.pack("<III", _VERSION, d, n)
    header += struct.pack(f"<{d}d", *gf.cube.center) + struct.pack("<d", gf.cube.side)
    body = np.ascontiguousarray(gf.samples, dtype="<f8").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_grid(path, order: int = 3) -> GridField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not an RGLF grid file")
    version, d, n = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported RGLF version {version}")
    off = 16
    center = struct.unpack_from(f"<{d}d", raw, off)
    off += 8 * d
    (side,) = struct.unpack_from("<d", raw, off)
    off += 8
    samples = np.frombuffer(raw, dtype="<f8", offset=off, count=n ** d).reshape((n,) * d)
    return GridField(Cube(center, side), samples.astype(float), order=order)

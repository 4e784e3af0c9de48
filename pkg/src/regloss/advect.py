"""The transported scalar ``rho(x, t) = rho_bar(Phi_t^{-1}(x))`` for an assembled plan.

Off every dilated slot the flow is the identity.  Inside slot ``n`` the
point is moved into block coordinates, pulled back through the block's
closed-form flow at block time ``t / tau_n`` and moved out again; the
dilation cancels in the jacobian.  ``rk4_trajectory`` integrates the
characteristics of the same field independently and serves as the oracle.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import TimeRangeError
from .fields import ScalarField, as_batch, schedule_flow_map, schedule_inverse
from .plan import CubePlan, GlobalVelocity, assemble_velocity

__all__ = ["SolutionHandle", "evaluate", "evaluate_gradient", "rk4_trajectory",
           "exact_trajectory", "write_samples", "sample_rows"]


class SolutionHandle:
    """Solution of the transport problem driven by ``plan``'s velocity.

    ``horizon`` (physical time) is optional; without it the periodically
    repeated block schedules define the solution for every ``t >= 0``.
    """

    def __init__(self, plan: CubePlan, datum: ScalarField, horizon: Optional[float] = None):
        self.plan = plan
        self.datum = datum
        self.dimension = datum.dimension
        self.velocity: GlobalVelocity = assemble_velocity(plan)
        self.horizon = horizon

    def _check_time(self, t: float):
        if t < 0:
            raise TimeRangeError(f"negative time {t}")
        if self.horizon is not None and t > self.horizon * (1 + 1e-12):
            raise TimeRangeError(f"time {t} beyond the horizon {self.horizon}")

    def inverse_flow(self, X, t: float):
        """``(Phi_t^{-1}(X), D Phi_t^{-1}(X))`` by slot dispatch."""
        self._check_time(t)
        X, _ = as_batch(X, self.dimension)
        d = self.dimension
        Y = X.copy()
        J = np.broadcast_to(np.eye(d), (X.shape[0], d, d)).copy()
        if t == 0:
            return Y, J
        owner = self.velocity.slot_of(X)
        for k, s in enumerate(self.plan.slots):
            m = owner == k
            if np.any(m):
                yb, Jb = schedule_inverse(self.velocity.schedules[k], t / s.tau, s.to_block(X[m]))
                Y[m] = np.asarray(s.center) + s.side * (yb - 0.5)
                J[m] = Jb
        return Y, J

    def forward_flow(self, X, t: float):
        """``Phi_t(X)`` by slot dispatch (slots are invariant under their own flow)."""
        self._check_time(t)
        X, _ = as_batch(X, self.dimension)
        Y = X.copy()
        if t == 0:
            return Y
        owner = self.velocity.slot_of(X)
        for k, s in enumerate(self.plan.slots):
            m = owner == k
            if np.any(m):
                yb = schedule_flow_map(self.velocity.schedules[k], t / s.tau, s.to_block(X[m]))
                Y[m] = np.asarray(s.center) + s.side * (yb - 0.5)
        return Y

    def evaluate_batch(self, X, t: float):
        """Values and gradients at a batch of points."""
        X, _ = as_batch(X, self.dimension)
        Y, J = self.inverse_flow(X, t)
        v, g = self.datum.evaluate(Y)
        return v, np.einsum("nij,ni->nj", J, g)

    def evaluate(self, x, t: float):
        X, single = as_batch(x, self.dimension)
        v, _ = self.evaluate_batch(X, t)
        return float(v[0]) if single else v

    def evaluate_gradient(self, x, t: float):
        X, single = as_batch(x, self.dimension)
        _, g = self.evaluate_batch(X, t)
        return g[0] if single else g

    def as_field(self, t: float) -> ScalarField:
        """Freeze time: the solution at ``t`` as a :class:`ScalarField`."""
        return _Frozen(self, t)


class _Frozen(ScalarField):
    def __init__(self, handle: SolutionHandle, t: float):
        self.handle = handle
        self.t = float(t)
        self.dimension = handle.dimension
        self.domain = None

    def evaluate(self, x):
        return self.handle.evaluate_batch(x, self.t)


def evaluate(handle: SolutionHandle, x, t: float):
    return handle.evaluate(x, t)


def evaluate_gradient(handle: SolutionHandle, x, t: float):
    return handle.evaluate_gradient(x, t)


def rk4_trajectory(v, x, t0: float, t1: float, dt: float):
    """Classical RK4 for ``x' = v(x, t)`` from ``t0`` to ``t1``.

    ``v`` is a :class:`GlobalVelocity` (steps are then aligned with every
    slot's segment switches), an object with ``value(x, t)``, or ``None`` for
    the zero field.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    X, single = as_batch(x)
    X = X.copy()
    if v is None or t1 == t0:
        return X[0] if single else X
    cuts = [t0]
    if hasattr(v, "breakpoints"):
        cuts.extend(v.breakpoints(min(t0, t1), max(t0, t1)))
        cuts = sorted(cuts, reverse=t1 < t0)
    cuts.append(t1)
    for a, b in zip(cuts[:-1], cuts[1:]):
        span = b - a
        steps = max(1, int(math.ceil(abs(span) / dt - 1e-9)))
        h = span / steps
        # the active segment is constant on (a, b); sample it at the midpoint
        tm = 0.5 * (a + b)
        for _ in range(steps):
            k1 = v.value(X, tm)
            k2 = v.value(X + 0.5 * h * k1, tm)
            k3 = v.value(X + 0.5 * h * k2, tm)
            k4 = v.value(X + h * k3, tm)
            X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X[0] if single else X


def exact_trajectory(handle: SolutionHandle, x, t: float):
    """Closed-form counterpart of :func:`rk4_trajectory` from time 0."""
    X, single = as_batch(x, handle.dimension)
    Y = handle.forward_flow(X, t)
    return Y[0] if single else Y


def sample_rows(handle: SolutionHandle, X, times):
    """Rows ``(x_1..x_d, t, rho, |grad rho|)`` for a batch of points at several times."""
    X, _ = as_batch(X, handle.dimension)
    rows = []
    for t in times:
        v, g = handle.evaluate_batch(X, float(t))
        gn = np.linalg.norm(g, axis=1)
        for row, val, n in zip(X, v, gn):
            rows.append(tuple(float(c) for c in row) + (float(t), float(val), float(n)))
    return rows


def write_samples(path, handle: SolutionHandle, X, times, config_hash: str = "-") -> None:
    """Batch evaluation as ``x1..xd,t,rho,grad_norm`` CSV rows."""
    from .report import write_csv
    d = handle.dimension
    cols = [f"x{k + 1}" for k in range(d)] + ["t", "rho", "grad_norm"]
    write_csv(path, cols, sample_rows(handle, X, times), config_hash)

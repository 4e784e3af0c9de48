"""Candidate trigonometric shears on the 8-periodic torus.

There are ``4d`` candidates ``u(x) = (-1)^i f_{i'}(x_j) e_{j'}`` with
``f_1 = A sin(2 pi z)``, ``f_2 = A cos(2 pi z)`` and ``j' = j + 1`` (wrapping to
1).  Axis indices are 1-based throughout, matching the usual notation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import ZeroGradient
from .fields import ComposedField, Cube, ScalarField, StationaryVelocity, as_batch

__all__ = [
    "TORUS_PERIOD", "TorusDescriptor", "ShearSpec", "ShearVelocity", "ShearFlowMap",
    "ShearSelection", "all_specs", "shear_velocity", "shear_flow_map",
    "advect_under_shear", "shear_growth_ratio", "shear_growth_ratios",
    "select_shear", "first_max", "sum_identity_defect",
]

TORUS_PERIOD = 8.0
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class TorusDescriptor:
    dimension: int
    period: float = TORUS_PERIOD

    @property
    def cube(self) -> Cube:
        return Cube((self.period / 2,) * self.dimension, self.period)


@dataclass(frozen=True)
class ShearSpec:
    i: int    # sign index: the field carries (-1)^i
    ip: int   # profile index: 1 = sine, 2 = cosine
    j: int    # 1-based axis the profile depends on
    A: float
    d: int

    def __post_init__(self):
        if self.i not in (1, 2) or self.ip not in (1, 2):
            raise ValueError("sign and profile indices must be 1 or 2")
        if self.d < 2 or not 1 <= self.j <= self.d:
            raise ValueError("axis out of range")
        if not self.A > 0:
            raise ValueError("amplitude must be positive")

    @property
    def jp(self) -> int:
        """1-based target axis ``j'``."""
        return self.j + 1 if self.j < self.d else 1

    @property
    def sign(self) -> float:
        return -1.0 if self.i == 1 else 1.0

    def with_amplitude(self, A: float) -> "ShearSpec":
        return ShearSpec(self.i, self.ip, self.j, A, self.d)

    # signed profile p(z) = (-1)^i f_{i'}(z) and its derivatives
    def profile(self, z):
        z = np.asarray(z, dtype=float)
        base = np.sin(TWO_PI * z) if self.ip == 1 else np.cos(TWO_PI * z)
        return self.sign * self.A * base

    def dprofile(self, z):
        z = np.asarray(z, dtype=float)
        base = np.cos(TWO_PI * z) if self.ip == 1 else -np.sin(TWO_PI * z)
        return self.sign * self.A * TWO_PI * base

    def d2profile(self, z):
        return -(TWO_PI ** 2) * self.profile(z)

    def antiderivative(self, z):
        """``H(z) = integral_0^z p``, the planar stream function of the strip shear."""
        z = np.asarray(z, dtype=float)
        if self.ip == 1:
            base = (1.0 - np.cos(TWO_PI * z)) / TWO_PI
        else:
            base = np.sin(TWO_PI * z) / TWO_PI
        return self.sign * self.A * base

    def to_json(self) -> dict:
        return {"i": self.i, "i_prime": self.ip, "j": self.j, "A": self.A, "d": self.d}

    @classmethod
    def from_json(cls, obj) -> "ShearSpec":
        return cls(int(obj["i"]), int(obj["i_prime"]), int(obj["j"]), float(obj["A"]), int(obj["d"]))


def all_specs(A: float, d: int) -> List[ShearSpec]:
    """The ``4d`` candidates in lexicographic ``(j, i', i)`` order."""
    return [ShearSpec(i, ip, j, A, d) for j in range(1, d + 1) for ip in (1, 2) for i in (1, 2)]


class ShearVelocity(StationaryVelocity):
    has_flow = True

    def __init__(self, spec: ShearSpec):
        self.spec = spec
        self.dimension = spec.d
        self.support = None

    def value(self, x):
        X, single = as_batch(x, self.dimension)
        out = np.zeros_like(X)
        out[:, self.spec.jp - 1] = self.spec.profile(X[:, self.spec.j - 1])
        return out[0] if single else out

    def jacobian(self, x):
        X, single = as_batch(x, self.dimension)
        J = np.zeros((X.shape[0], self.dimension, self.dimension))
        J[:, self.spec.jp - 1, self.spec.j - 1] = self.spec.dprofile(X[:, self.spec.j - 1])
        return J[0] if single else J

    def flow(self, x, t):
        return ShearFlowMap(self.spec, t).forward_with_jacobian(x)


class ShearFlowMap:
    """Time-``t`` flow of a shear together with its inverse and jacobians."""

    def __init__(self, spec: ShearSpec, t: float):
        self.spec = spec
        self.t = float(t)

    def _displace(self, x, t):
        X, single = as_batch(x, self.spec.d)
        Y = X.copy()
        z = X[:, self.spec.j - 1]
        Y[:, self.spec.jp - 1] += t * self.spec.profile(z)
        J = np.broadcast_to(np.eye(self.spec.d), (X.shape[0], self.spec.d, self.spec.d)).copy()
        J[:, self.spec.jp - 1, self.spec.j - 1] += t * self.spec.dprofile(z)
        return (Y[0], J[0]) if single else (Y, J)

    def forward(self, x):
        return self._displace(x, self.t)[0]

    def inverse(self, x):
        return self._displace(x, -self.t)[0]

    def jacobian(self, x):
        """Jacobian of the forward map at ``x``; unitriangular, so det = 1."""
        return self._displace(x, self.t)[1]

    def forward_with_jacobian(self, x):
        return self._displace(x, self.t)

    def inverse_with_jacobian(self, x):
        return self._displace(x, -self.t)


def shear_velocity(spec: ShearSpec) -> ShearVelocity:
    return ShearVelocity(spec)


def shear_flow_map(spec: ShearSpec, t: float) -> ShearFlowMap:
    return ShearFlowMap(spec, t)


def advect_under_shear(datum: ScalarField, spec: ShearSpec, t: float) -> ScalarField:
    """The datum transported for time ``t``: ``x -> datum(inverse(x))``."""
    if t == 0:
        return datum
    return ComposedField(datum, ShearFlowMap(spec, t), domain=None)


# --- growth functional -------------------------------------------------------

def _gradients_on(datum: ScalarField, region: Cube, n: int):
    nodes = region.midpoint_nodes(n)
    _, g = datum.evaluate(nodes)
    return nodes, g


def _sheared_energy(nodes, g, spec: ShearSpec, T: float, weight: float) -> float:
    # |J^{-T} g|^2 with J^{-T} = I - c e_j (x) e_{j'}, c = T p'(y_j)
    c = T * spec.dprofile(nodes[:, spec.j - 1])
    gj = g[:, spec.j - 1]
    gjp = g[:, spec.jp - 1]
    base = np.einsum("ni,ni->n", g, g)
    return weight * float(np.sum(base - 2.0 * c * gj * gjp + c * c * gjp * gjp))


def _check_quad(n_quad: int):
    if n_quad < 16:
        raise ValueError("n_quad must be at least 16")


def shear_growth_ratio(datum: ScalarField, region: Cube, spec: ShearSpec, T: float, n_quad: int = 256) -> float:
    """Squared H^1 growth of ``datum`` on ``region`` under the time-``T`` shear."""
    _check_quad(n_quad)
    nodes, g = _gradients_on(datum, region, n_quad)
    w = region.volume / n_quad ** region.dimension
    den = w * float(np.sum(g * g))
    if den < 1e-14:
        raise ZeroGradient("datum gradient vanishes on the region")
    return _sheared_energy(nodes, g, spec, T, w) / den


def shear_growth_ratios(datum: ScalarField, region: Cube, A: float, T: float, n_quad: int = 256):
    """All ``4d`` ratios plus a Richardson error bound for each.

    Returns ``(specs, ratios, errors, base_energy)``.
    """
    _check_quad(n_quad)
    d = region.dimension
    specs = all_specs(A, d)
    out = {}
    for n in (n_quad, max(n_quad // 2, 8)):
        nodes, g = _gradients_on(datum, region, n)
        w = region.volume / n ** d
        den = w * float(np.sum(g * g))
        if den < 1e-14:
            raise ZeroGradient("datum gradient vanishes on the region")
        out[n] = (np.array([_sheared_energy(nodes, g, s, T, w) / den for s in specs]), den)
    fine, coarse = out[n_quad][0], out[max(n_quad // 2, 8)][0]
    errors = np.abs(fine - coarse) / 3.0
    return specs, fine, errors, out[n_quad][1]


@dataclass(frozen=True)
class ShearSelection:
    """Winning shear.  Iterates as ``(spec, ratio)``."""

    spec: ShearSpec
    ratio: float
    error: float
    specs: tuple
    ratios: tuple
    errors: tuple
    floor: float  # 1 + 2 pi^2 A^2 T^2 / d, the guaranteed value up to quadrature slack

    def __iter__(self):
        return iter((self.spec, self.ratio))

    def rows(self):
        for s, r, e in zip(self.specs, self.ratios, self.errors):
            yield {"j": s.j, "i_prime": s.ip, "i": s.i, "ratio": r, "error": e}


def first_max(values, rtol: float = 1e-12) -> int:
    """Index of the first entry within ``rtol`` (relative) of the maximum."""
    v = np.asarray(values, dtype=float)
    top = float(np.max(v))
    return int(np.flatnonzero(v >= top - rtol * abs(top))[0])


def select_shear(datum: ScalarField, region: Cube, A: float, T: float, n_quad: int = 256) -> ShearSelection:
    """Argmax over the ``4d`` candidates; ties go to the first in ``(j, i', i)`` order.

    Ratios within ``1e-12`` relative of the maximum count as tied, so
    symmetric data select the same winner regardless of round-off.
    """
    specs, ratios, errors, _ = shear_growth_ratios(datum, region, A, T, n_quad)
    k = first_max(ratios)
    floor = 1.0 + 2.0 * math.pi ** 2 * A * A * T * T / region.dimension
    return ShearSelection(specs[k], float(ratios[k]), float(errors[k]), tuple(specs),
                          tuple(float(r) for r in ratios), tuple(float(e) for e in errors), floor)


def sum_identity_defect(datum: ScalarField, region: Cube, A: float, T: float, n_quad: int = 256) -> float:
    """Relative gap in ``sum ||grad phi_T||^2 = (4d + 8 pi^2 A^2 T^2) ||grad phi_0||^2``."""
    _check_quad(n_quad)
    d = region.dimension
    nodes, g = _gradients_on(datum, region, n_quad)
    w = region.volume / n_quad ** d
    den = w * float(np.sum(g * g))
    if den < 1e-14:
        raise ZeroGradient("datum gradient vanishes on the region")
    total = math.fsum(_sheared_energy(nodes, g, s, T, w) for s in all_specs(A, d))
    target = (4 * d + 8 * math.pi ** 2 * A * A * T * T) * den
    return abs(total - target) / den

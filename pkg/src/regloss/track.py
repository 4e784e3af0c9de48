"""The rounded octagonal track and its area-preserving map onto the strip.

Planar geometry
---------------
Let ``Rb = 2/pi`` and ``r_in, r_out = Rb -+ 1/2``.  The track is the set of
points whose distance to the rectangle ``R = [a, a+1] x [0, 1]`` (``a = r_out``)
lies in ``(r_in, r_out)``.  It splits into four unit squares (pieces 0, 2, 4, 6)
and four quarter annuli (pieces 1, 3, 5, 7) of area one each, traversed
clockwise starting with ``(0,1)^2`` flowing upward.  The strip is
``(0,1) x (0,8)``: ``u`` is the transverse coordinate (``u = 0`` on the outer
boundary, ``u = 1`` on the inner one) and ``v`` the longitudinal one.

Corner map
----------
On a quarter annulus with local polar coordinates ``(r, theta)`` put
``s = (r_out^2 - r^2) / (2 Rb)`` (area per unit angle, in strip units) and
``w = (theta_start - theta) * 2/pi``.  The transverse coordinate ``u`` solves

    s = (1 - b(w)) s_max + b(w) u - c(w) (r_out - u)^2 / (2 Rb),

which is a quadratic in ``u``, and ``v = k + B(w) + (r_out - u) C(w) / Rb``
with ``B' = b`` and ``C' = c``.  Here ``b`` is a plateau rising through septic
ramps and ``c = 1 + q - b (1 + Qbar)`` carries a curvature term ``q``
matching the polar metric to second order at the junction rays.  The
jacobian determinant is identically one, and at ``w = 0, 1`` the map agrees
with the neighbouring squares' maps to second order, so the assembled map is
C^2 and the pulled-back fields are C^1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import PointOffTrack, UnsupportedField
from .fields import Cube, StationaryVelocity, as_batch

__all__ = [
    "RBAR", "R_IN", "R_OUT", "C_OUT", "C_IN", "C_IN_LIMIT", "STRIP_PERIOD",
    "Piece", "TrackLayout", "TrackMap", "LiftedMap", "StripProfile",
    "ShearProfile", "ShiftProfile", "StripField", "TrackVelocity",
    "build_track", "track_map", "lift_map", "pullback_velocity", "shift_field",
    "extend_divfree", "region_index", "transverse_cutoff",
]

RBAR = 2.0 / math.pi
R_IN = RBAR - 0.5
R_OUT = RBAR + 0.5
STRIP_PERIOD = 8.0
HALF_PI = 0.5 * math.pi


# --- blending polynomials ----------------------------------------------------

def _b(w):
    return 30.0 * w * w * (1.0 - w) ** 2


def _B(w):
    return w ** 3 * (10.0 - 15.0 * w + 6.0 * w * w)


def _db(w):
    return 60.0 * w * (1.0 - w) * (1.0 - 2.0 * w)


def _s7(t):
    """Septic smoothstep and its first two derivatives and antiderivative from 0."""
    t2 = t * t
    t3 = t2 * t
    val = t2 * t2 * (35.0 - 84.0 * t + 70.0 * t2 - 20.0 * t3)
    d1 = 140.0 * t3 * (1.0 - t) ** 3
    d2 = 420.0 * t2 * (1.0 - t) ** 2 * (1.0 - 2.0 * t)
    anti = t3 * t2 * (7.0 - 14.0 * t + 10.0 * t2 - 2.5 * t3)
    return val, d1, d2, anti


# Corner blend.  b = kappa * P with P a plateau rising through septic ramps of
# width EPS, so b vanishes to third order at both ends and integrates to 1.
# q matches tan^2(pi w / 2) to second order at w = 0 and its mirror at w = 1.
BLEND_EPS = 0.25
_KAPPA = 1.0 / (1.0 - BLEND_EPS)
_QBAR = (math.pi ** 2 / 4.0) / 30.0


def _blend(w):
    """``(b, B, b', b'')`` with ``B(w) = int_0^w b``."""
    e = BLEND_EPS
    tl = np.clip(w / e, 0.0, 1.0)
    tr = np.clip((1.0 - w) / e, 0.0, 1.0)
    vl, d1l, d2l, al = _s7(tl)
    vr, d1r, d2r, ar = _s7(tr)
    left, right = w < e, w > 1.0 - e
    P = np.where(left, vl, np.where(right, vr, 1.0))
    dP = np.where(left, d1l / e, np.where(right, -d1r / e, 0.0))
    d2P = np.where(left, d2l / e ** 2, np.where(right, d2r / e ** 2, 0.0))
    IP = np.where(left, e * al, np.where(right, (1.0 - e) - e * ar, 0.5 * e + (w - e)))
    return _KAPPA * P, _KAPPA * IP, _KAPPA * dP, _KAPPA * d2P


def _curv(w):
    """``(q, int_0^w q, q', q'')`` for ``q = (pi^2/4) w^2 (1-w)^2``."""
    k = math.pi ** 2 / 4.0
    q = k * w * w * (1.0 - w) ** 2
    Q = k * (w ** 3 / 3.0 - w ** 4 / 2.0 + w ** 5 / 5.0)
    dq = k * 2.0 * w * (1.0 - w) * (1.0 - 2.0 * w)
    d2q = k * (2.0 - 12.0 * w + 12.0 * w * w)
    return q, Q, dq, d2q


def _corner_coeffs(w):
    """Coefficients of ``S(u, w) = (1 - b) s_max + b u - c (r_out - u)^2 / (2 R)``.

    Returns ``b, B, c, C`` and the first two w-derivatives of ``b`` and ``c``,
    where ``c = 1 + q - b (1 + Qbar)`` and ``C = int_0^w c``.
    """
    b, B, db, d2b = _blend(w)
    q, Q, dq, d2q = _curv(w)
    c = 1.0 + q - b * (1.0 + _QBAR)
    C = w + Q - B * (1.0 + _QBAR)
    dc = dq - db * (1.0 + _QBAR)
    d2c = d2q - d2b * (1.0 + _QBAR)
    return b, B, c, C, db, d2b, dc, d2c


def _smooth5(t):
    """Quintic smoothstep clamped to [0, 1] with its first two derivatives."""
    t = np.clip(t, 0.0, 1.0)
    return _B(t), _b(t), _db(t)


def _smooth7(t):
    """Septic smoothstep clamped to [0, 1] and its first derivative."""
    t = np.clip(t, 0.0, 1.0)
    t4 = t ** 4
    return t4 * (35.0 - 84.0 * t + 70.0 * t * t - 20.0 * t ** 3), 140.0 * t ** 3 * (1.0 - t) ** 3


# --- layout ------------------------------------------------------------------

@dataclass(frozen=True)
class Piece:
    index: int
    kind: str                      # "square" or "annulus"
    flow: Tuple[float, float]      # unit direction of increasing v at the piece centre
    bounds: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None
    center: Optional[Tuple[float, float]] = None
    theta_start: Optional[float] = None
    theta_end: Optional[float] = None
    r_in: Optional[float] = None
    r_out: Optional[float] = None

    @property
    def area(self) -> float:
        if self.kind == "square":
            (x0, x1), (y0, y1) = self.bounds
            return (x1 - x0) * (y1 - y0)
        sweep = abs(self.theta_end - self.theta_start)
        return 0.5 * sweep * (self.r_out ** 2 - self.r_in ** 2)

    def to_json(self) -> dict:
        out = {"index": self.index, "kind": self.kind, "flow": list(self.flow), "area": self.area}
        if self.kind == "square":
            out["bounds"] = [list(self.bounds[0]), list(self.bounds[1])]
        else:
            out.update(center=list(self.center), theta_start=self.theta_start,
                       theta_end=self.theta_end, r_in=self.r_in, r_out=self.r_out)
        return out


@dataclass(frozen=True)
class TrackLayout:
    pieces: Tuple[Piece, ...]
    r_in: float
    r_out: float

    @property
    def rbar(self) -> float:
        return 0.5 * (self.r_in + self.r_out)

    @property
    def offset(self) -> float:
        """Left edge ``a`` of the rectangle the track surrounds."""
        return self.r_out

    def areas(self) -> List[float]:
        return [p.area for p in self.pieces]

    def bounding_box(self):
        a = self.offset
        return (a - self.r_out, -self.r_out), (a + 1 + self.r_out, 1 + self.r_out)

    def centerline_length(self) -> float:
        return 4.0 + 4.0 * self.rbar * HALF_PI

    def to_json(self) -> dict:
        return {"r_in": self.r_in, "r_out": self.r_out, "rbar": self.rbar,
                "pieces": [p.to_json() for p in self.pieces]}


def build_track(r_in: Optional[float] = None, r_out: Optional[float] = None) -> TrackLayout:
    """Concrete placement of the eight pieces; radii may be overridden for fault injection."""
    ri = R_IN if r_in is None else float(r_in)
    ro = R_OUT if r_out is None else float(r_out)
    a = ro
    squares = {
        0: (((a - ro, a - ro + 1.0), (0.0, 1.0)), (0.0, 1.0)),
        2: (((a, a + 1.0), (1.0 + ri, 1.0 + ro)), (1.0, 0.0)),
        4: (((a + 1.0 + ri, a + 1.0 + ro), (0.0, 1.0)), (0.0, -1.0)),
        6: (((a, a + 1.0), (-ro, -ri)), (-1.0, 0.0)),
    }
    corners = {1: (a, 1.0), 3: (a + 1.0, 1.0), 5: (a + 1.0, 0.0), 7: (a, 0.0)}
    pieces = []
    for k in range(8):
        if k % 2 == 0:
            bounds, flow = squares[k]
            pieces.append(Piece(k, "square", flow, bounds=bounds))
        else:
            m = k // 2
            th0 = math.pi - m * HALF_PI
            mid = th0 - 0.25 * math.pi
            flow = (math.sin(mid), -math.cos(mid))  # clockwise tangent
            pieces.append(Piece(k, "annulus", flow, center=corners[k], theta_start=th0,
                                theta_end=th0 - HALF_PI, r_in=ri, r_out=ro))
    return TrackLayout(tuple(pieces), ri, ro)


# --- planar map --------------------------------------------------------------

class TrackMap:
    """Area-preserving C^1 map from the planar track onto the strip.

    ``forward`` and ``inverse`` also accept points in the collars
    ``-c_out < u < 0`` and ``1 < u < 1 + c_in`` when ``extended=True``.
    """

    def __init__(self, layout: TrackLayout, c_out: Optional[float] = None, c_in: Optional[float] = None):
        self.layout = layout
        self.r_out = layout.r_out
        self.rbar = layout.rbar
        self.a = layout.offset
        self.c_out = C_OUT if c_out is None else float(c_out)
        self.c_in = C_IN if c_in is None else float(c_in)
        self.s_max = self.r_out ** 2 / (2 * self.rbar)
        a = self.a
        self.centers = np.array([[a, 1.0], [a + 1.0, 1.0], [a + 1.0, 0.0], [a, 0.0]])
        self.theta_start = np.array([math.pi - m * HALF_PI for m in range(4)])

    def classify(self, P):
        """Region code per point: 0..7 for the piece sector, -1 inside the rectangle."""
        X, Y = P[:, 0], P[:, 1]
        a = self.a
        left, right = X < a, X > a + 1
        below, above = Y < 0, Y > 1
        code = np.full(P.shape[0], -1, dtype=np.int64)
        code[left & ~below & ~above] = 0
        code[left & above] = 1
        code[~left & ~right & above] = 2
        code[right & above] = 3
        code[right & ~below & ~above] = 4
        code[right & below] = 5
        code[~left & ~right & below] = 6
        code[left & below] = 7
        return code

    def state(self, P, hessian: bool = False):
        """Transverse/longitudinal coordinates with first (and second) derivatives.

        Returns a dict with ``u``, ``v``, ``du`` (n, 2), ``dv`` (n, 2),
        ``code`` and ``defined`` (False where ``u`` cannot be continued, deep in
        the hole); with ``hessian`` also ``hu`` (n, 2, 2).
        """
        n = P.shape[0]
        X, Y = P[:, 0], P[:, 1]
        a, ro = self.a, self.r_out
        code = self.classify(P)
        u = np.full(n, np.inf)
        v = np.zeros(n)
        du = np.zeros((n, 2))
        dv = np.zeros((n, 2))
        hu = np.zeros((n, 2, 2)) if hessian else None
        defined = code >= 0

        sq = {0: (X, Y, (1.0, 0.0), (0.0, 1.0)),
              2: (ro + 1.0 - Y, 2.0 + X - a, (0.0, -1.0), (1.0, 0.0)),
              4: (ro + a + 1.0 - X, 5.0 - Y, (-1.0, 0.0), (0.0, -1.0)),
              6: (ro + Y, 6.0 + a + 1.0 - X, (0.0, 1.0), (-1.0, 0.0))}
        for k, (uu, vv, gu, gv) in sq.items():
            m = code == k
            if np.any(m):
                u[m] = uu[m]
                v[m] = vv[m]
                du[m] = gu
                dv[m] = gv

        for m4 in range(4):
            k = 2 * m4 + 1
            m = code == k
            if not np.any(m):
                continue
            D = P[m] - self.centers[m4]
            r2 = np.einsum("ni,ni->n", D, D)
            r = np.sqrt(r2)
            th = np.arctan2(D[:, 1], D[:, 0])
            dth = np.mod(self.theta_start[m4] - th, 2 * math.pi)
            dth = np.where(dth > 1.5 * math.pi, dth - 2 * math.pi, dth)
            w = np.clip(dth / HALF_PI, 0.0, 1.0)
            rb = self.rbar
            b, B, c, C, db, d2b, dc, d2c = _corner_coeffs(w)
            # z = r_out - u is the positive root of c z^2 + 2 R b z - K = 0
            K = r2 + 2.0 * rb * b * (ro - self.s_max)
            disc = (rb * b) ** 2 + c * K
            ok = (disc > 0) & (r > 0)
            root = np.sqrt(np.where(ok, disc, 1.0))
            z = K / (rb * b + root)
            ok &= np.isfinite(z)
            z = np.where(ok, z, 0.0)
            uc = np.where(ok, ro - z, np.inf)
            ucf = ro - z
            h = z * z / (2.0 * rb)
            Su = b + c * z / rb
            Sw = db * (ucf - self.s_max) - dc * h
            er = D / np.where(r > 0, r, 1.0)[:, None]
            et = np.stack([-er[:, 1], er[:, 0]], axis=1)
            rs = np.where(r > 0, r, 1.0)
            grad_s = -D / rb
            grad_w = -(2.0 / math.pi) * et / rs[:, None]
            Su_safe = np.where(ok, Su, 1.0)
            u_s = 1.0 / Su_safe
            u_w = -Sw / Su_safe
            gu_ = u_s[:, None] * grad_s + u_w[:, None] * grad_w
            gv_ = -(C / rb)[:, None] * gu_ + Su[:, None] * grad_w
            u[m] = uc
            v[m] = k + B + z * C / rb
            du[m] = gu_
            dv[m] = gv_
            idx = np.flatnonzero(m)
            defined[idx[~ok]] = False
            if hessian:
                Suu = -c / rb
                Suw = db + dc * z / rb
                Sww = d2b * (ucf - self.s_max) - d2c * h
                u_ss = -Suu * u_s * u_s / Su_safe
                u_sw = -(Suu * u_w + Suw) * u_s / Su_safe
                u_ww = -(Suu * u_w * u_w + 2 * Suw * u_w + Sww) / Su_safe
                Hs = -np.eye(2) / rb
                sym = (er[:, :, None] * et[:, None, :] + et[:, :, None] * er[:, None, :])
                Hw = (2.0 / math.pi) * sym / (rs * rs)[:, None, None]
                oss = grad_s[:, :, None] * grad_s[:, None, :]
                osw = grad_s[:, :, None] * grad_w[:, None, :]
                oww = grad_w[:, :, None] * grad_w[:, None, :]
                H = (u_ss[:, None, None] * oss + u_sw[:, None, None] * (osw + osw.transpose(0, 2, 1))
                     + u_ww[:, None, None] * oww + u_s[:, None, None] * Hs + u_w[:, None, None] * Hw)
                hu[m] = H
        out = {"u": u, "v": v, "du": du, "dv": dv, "code": code, "defined": defined}
        if hessian:
            out["hu"] = hu
        return out

    # public planar interface
    def in_extended(self, st) -> np.ndarray:
        return st["defined"] & (st["u"] > -self.c_out) & (st["u"] < 1.0 + self.c_in)

    def on_track(self, P, tol: float = 1e-12) -> np.ndarray:
        P, _ = as_batch(P, 2)
        st = self.state(P)
        return st["defined"] & (st["u"] >= -tol) & (st["u"] <= 1.0 + tol)

    def forward(self, P, extended: bool = False):
        P, single = as_batch(P, 2)
        st = self.state(P)
        self._require(st, extended)
        UV = np.stack([st["u"], np.mod(st["v"], STRIP_PERIOD)], axis=1)
        return UV[0] if single else UV

    def jacobian(self, P, extended: bool = False):
        P, single = as_batch(P, 2)
        st = self.state(P)
        self._require(st, extended)
        J = np.stack([st["du"], st["dv"]], axis=1)
        return J[0] if single else J

    def forward_with_jacobian(self, P, extended: bool = False):
        P, single = as_batch(P, 2)
        st = self.state(P)
        self._require(st, extended)
        UV = np.stack([st["u"], np.mod(st["v"], STRIP_PERIOD)], axis=1)
        J = np.stack([st["du"], st["dv"]], axis=1)
        return (UV[0], J[0]) if single else (UV, J)

    def _require(self, st, extended):
        if extended:
            ok = self.in_extended(st)
        else:
            ok = st["defined"] & (st["u"] >= -1e-12) & (st["u"] <= 1.0 + 1e-12)
        if not np.all(ok):
            raise PointOffTrack(f"{int(np.sum(~ok))} point(s) outside the {'extended ' if extended else ''}track")

    def _w_from_longitudinal(self, u, ell):
        """Solve ``B(w) + (r_out - u) C(w) / R = ell`` for ``w`` in [0, 1] (monotone in w)."""
        zr_all = (self.r_out - u) / self.rbar
        w = ell.copy()
        lo = np.zeros_like(w)
        hi = np.ones_like(w)
        act = np.arange(w.size)
        for _ in range(80):
            wa, zr = w[act], zr_all[act]
            b, B, c, C = _corner_coeffs(wa)[:4]
            F = B + zr * C - ell[act]
            lo[act] = np.where(F < 0, wa, lo[act])
            hi[act] = np.where(F > 0, wa, hi[act])
            step = wa - F / (b + zr * c)
            bad = (step < lo[act]) | (step > hi[act]) | ~np.isfinite(step)
            w_new = np.where(bad, 0.5 * (lo[act] + hi[act]), step)
            w[act] = w_new
            # Newton is quadratic here: after a step this small the error is round-off
            act = act[(np.abs(w_new - wa) > 1e-12) | bad]
            if act.size == 0:
                break
        return w

    def inverse(self, UV, extended: bool = False):
        UV, single = as_batch(UV, 2)
        u = UV[:, 0]
        lim_lo, lim_hi = (-self.c_out, 1.0 + self.c_in) if extended else (-1e-12, 1.0 + 1e-12)
        if np.any((u < lim_lo) | (u > lim_hi)):
            raise PointOffTrack("transverse coordinate outside the strip")
        vv = np.mod(UV[:, 1], STRIP_PERIOD)
        k = np.clip(np.floor(vv).astype(np.int64), 0, 7)
        ell = vv - k
        a, ro = self.a, self.r_out
        P = np.zeros_like(UV)
        for kk, fn in {0: lambda uu, ll: (uu, ll),
                       2: lambda uu, ll: (a + ll, ro + 1.0 - uu),
                       4: lambda uu, ll: (ro + a + 1.0 - uu, 1.0 - ll),
                       6: lambda uu, ll: (a + 1.0 - ll, uu - ro)}.items():
            m = k == kk
            if np.any(m):
                xs, ys = fn(u[m], ell[m])
                P[m, 0] = xs
                P[m, 1] = ys
        for m4 in range(4):
            m = k == 2 * m4 + 1
            if not np.any(m):
                continue
            um, lm = u[m], ell[m]
            w = self._w_from_longitudinal(um, lm)
            b, _, c, _ = _corner_coeffs(w)[:4]
            s = (1.0 - b) * self.s_max + b * um - c * (ro - um) ** 2 / (2 * self.rbar)
            r = np.sqrt(np.maximum(ro * ro - 2 * self.rbar * s, 0.0))
            th = self.theta_start[m4] - HALF_PI * w
            P[m, 0] = self.centers[m4, 0] + r * np.cos(th)
            P[m, 1] = self.centers[m4, 1] + r * np.sin(th)
        return P[0] if single else P

    def inverse_jacobian(self, UV, extended: bool = False):
        """``D(phi^{-1})`` at strip points: the adjugate of the forward jacobian."""
        P = self.inverse(UV, extended=extended)
        J = self.jacobian(P, extended=True)
        return _adjugate(J)

    def lipschitz_constants(self, n: int = 200) -> Tuple[float, float]:
        """Lattice maxima of ``||D phi||`` and ``||D phi^{-1}||`` over the closed track."""
        uu = (np.arange(n) + 0.5) / n
        vv = 8.0 * (np.arange(8 * n) + 0.5) / (8 * n)
        U, V = np.meshgrid(uu, vv, indexing="ij")
        P = self.inverse(np.stack([U.ravel(), V.ravel()], axis=1))
        J = self.jacobian(P)
        fwd = float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2))))
        inv = float(np.max(np.linalg.norm(_adjugate(J), ord=2, axis=(1, 2))))
        return fwd, inv


def _adjugate(J):
    out = np.empty_like(J)
    out[..., 0, 0] = J[..., 1, 1]
    out[..., 0, 1] = -J[..., 0, 1]
    out[..., 1, 0] = -J[..., 1, 0]
    out[..., 1, 1] = J[..., 0, 0]
    return out


def _inner_collar_limit() -> float:
    """Largest inner collar width for which every corner stays invertible.

    At ``u = 1 + c`` the corner needs ``S(u, w) < s_max`` (a real radius) and
    ``dS/du > 0`` for every ``w``.
    """
    ro, rb = R_OUT, RBAR
    s_max = ro * ro / (2 * rb)
    w = np.linspace(0.0, 1.0, 4001)
    b, _, c, _ = _corner_coeffs(w)[:4]

    def fine(cw):
        u = 1.0 + cw
        z = ro - u
        S = (1.0 - b) * s_max + b * u - c * z * z / (2 * rb)
        return np.max(S) < s_max and np.min(b + c * z / rb) > 0

    lo, hi = 0.0, 0.1
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if fine(mid) else (lo, mid)
    return lo


C_IN_LIMIT = _inner_collar_limit()
C_IN = 0.8 * C_IN_LIMIT
C_OUT = 0.1


def track_map(layout: Optional[TrackLayout] = None) -> TrackMap:
    return TrackMap(layout or build_track())


# --- lift to d dimensions ----------------------------------------------------

class LiftedMap:
    """Planar map acting on axes ``plane = (a, b)`` (1-based), identity elsewhere.

    The planar ``(x, y)`` are ``(x_a, x_b)`` and the image ``(u, v)`` is written
    back into the same two slots, so ``x_a`` becomes transverse and ``x_b``
    longitudinal.
    """

    def __init__(self, planar: TrackMap, d: int, plane: Tuple[int, int] = (1, 2)):
        a, b = plane
        if d < 2 or a == b or not (1 <= a <= d and 1 <= b <= d):
            raise ValueError("invalid plane for the lift")
        self.planar = planar
        self.dimension = int(d)
        self.plane = (int(a), int(b))
        self.ia, self.ib = a - 1, b - 1
        self.others = [k for k in range(d) if k not in (self.ia, self.ib)]

    def split(self, X):
        return X[:, [self.ia, self.ib]], X[:, self.others]

    def join(self, P, Z):
        out = np.empty((P.shape[0], self.dimension))
        out[:, self.ia] = P[:, 0]
        out[:, self.ib] = P[:, 1]
        if self.others:
            out[:, self.others] = Z
        return out

    def _embed(self, J2):
        n = J2.shape[0]
        J = np.broadcast_to(np.eye(self.dimension), (n, self.dimension, self.dimension)).copy()
        idx = [self.ia, self.ib]
        J[np.ix_(np.arange(n), idx, idx)] = J2
        return J

    def on_track(self, X, tol: float = 1e-12):
        X, single = as_batch(X, self.dimension)
        P, Z = self.split(X)
        ok = self.planar.on_track(P, tol)
        if self.others:
            ok &= np.all((Z >= -tol) & (Z <= 1 + tol), axis=1)
        return bool(ok[0]) if single else ok

    def _check_solid(self, Z, extended):
        if self.others and not extended and np.any((Z < -1e-12) | (Z > 1 + 1e-12)):
            raise PointOffTrack("transverse coordinates outside (0,1)")

    def forward(self, X, extended: bool = False):
        X, single = as_batch(X, self.dimension)
        P, Z = self.split(X)
        self._check_solid(Z, extended)
        out = self.join(self.planar.forward(P, extended), Z)
        return out[0] if single else out

    def inverse(self, X, extended: bool = False):
        X, single = as_batch(X, self.dimension)
        P, Z = self.split(X)
        self._check_solid(Z, extended)
        out = self.join(self.planar.inverse(P, extended), Z)
        return out[0] if single else out

    def jacobian(self, X, extended: bool = False):
        X, single = as_batch(X, self.dimension)
        P, Z = self.split(X)
        self._check_solid(Z, extended)
        J = self._embed(self.planar.jacobian(P, extended))
        return J[0] if single else J

    def inverse_jacobian(self, X, extended: bool = False):
        X, single = as_batch(X, self.dimension)
        P, Z = self.split(X)
        self._check_solid(Z, extended)
        J = self._embed(self.planar.inverse_jacobian(P, extended))
        return J[0] if single else J


def lift_map(m: TrackMap, d: int, plane: Tuple[int, int] = (1, 2)) -> LiftedMap:
    return LiftedMap(m, d, plane)


def transverse_cutoff(Z):
    """Product bump equal to 1 on [0,1]^k and 0 outside (-3,4)^k, with gradient."""
    if Z.shape[1] == 0:
        return np.ones(Z.shape[0]), np.zeros((Z.shape[0], 0))
    vals = np.ones_like(Z)
    ders = np.zeros_like(Z)
    left = Z < 0
    right = Z > 1
    sl, dsl, _ = _smooth5((Z + 3.0) / 3.0)
    sr, dsr, _ = _smooth5((Z - 1.0) / 3.0)
    vals = np.where(left, sl, np.where(right, 1.0 - sr, 1.0))
    ders = np.where(left, dsl / 3.0, np.where(right, -dsr / 3.0, 0.0))
    G = np.prod(vals, axis=1)
    grad = np.empty_like(Z)
    for k in range(Z.shape[1]):
        others = np.prod(np.delete(vals, k, axis=1), axis=1) if Z.shape[1] > 1 else 1.0
        grad[:, k] = ders[:, k] * others
    return G, grad


# --- strip fields and their pullbacks ---------------------------------------

class StripProfile:
    """Signed strip velocity profile ``p(u)`` along ``e_v`` with stream function ``H``."""

    name = "profile"

    def p(self, u):
        raise NotImplementedError

    def dp(self, u):
        raise NotImplementedError

    def d2p(self, u):
        raise NotImplementedError

    def H(self, u):
        raise NotImplementedError


class ShearProfile(StripProfile):
    def __init__(self, spec):
        self.spec = spec
        self.name = f"shear(j={spec.j},i'={spec.ip},i={spec.i},A={spec.A:g})"

    def p(self, u):
        return self.spec.profile(u)

    def dp(self, u):
        return self.spec.dprofile(u)

    def d2p(self, u):
        return self.spec.d2profile(u)

    def H(self, u):
        return self.spec.antiderivative(u)


class ShiftProfile(StripProfile):
    """The unit shift ``U = -e_v``."""

    name = "shift"

    def p(self, u):
        return -np.ones_like(np.asarray(u, dtype=float))

    def dp(self, u):
        return np.zeros_like(np.asarray(u, dtype=float))

    def d2p(self, u):
        return np.zeros_like(np.asarray(u, dtype=float))

    def H(self, u):
        return -np.asarray(u, dtype=float)


class StripField(StationaryVelocity):
    """``speed * p(x_a) e_b`` on the strip (the ``a``, ``b`` slots of a lifted map)."""

    has_flow = True

    def __init__(self, profile: StripProfile, d: int, plane: Tuple[int, int] = (1, 2), speed: float = 1.0):
        self.profile = profile
        self.dimension = d
        self.plane = plane
        self.speed = float(speed)
        self.support = None

    def value(self, x):
        X, single = as_batch(x, self.dimension)
        out = np.zeros_like(X)
        out[:, self.plane[1] - 1] = self.speed * self.profile.p(X[:, self.plane[0] - 1])
        return out[0] if single else out

    def jacobian(self, x):
        X, single = as_batch(x, self.dimension)
        J = np.zeros((X.shape[0], self.dimension, self.dimension))
        J[:, self.plane[1] - 1, self.plane[0] - 1] = self.speed * self.profile.dp(X[:, self.plane[0] - 1])
        return J[0] if single else J

    def flow(self, x, t):
        X, single = as_batch(x, self.dimension)
        ia, ib = self.plane[0] - 1, self.plane[1] - 1
        Y = X.copy()
        Y[:, ib] = np.mod(X[:, ib] + t * self.speed * self.profile.p(X[:, ia]), STRIP_PERIOD)
        J = np.broadcast_to(np.eye(self.dimension), (X.shape[0], self.dimension, self.dimension)).copy()
        J[:, ib, ia] += t * self.speed * self.profile.dp(X[:, ia])
        return (Y[0], J[0]) if single else (Y, J)


class TrackVelocity(StationaryVelocity):
    """Pullback ``(D phi^{-1} U) o phi`` of a strip field, optionally extended.

    In the plane this is ``K'(u) grad^perp u`` with ``grad^perp = (-d_y, d_x)``,
    where ``K = H`` on the track.  With an extension ``K'`` continues ``p``
    through the collars and vanishes beyond them, and in d > 2 the field is
    multiplied by a transverse cutoff.  The
    exact flow keeps ``u`` and the transverse coordinates and advances
    ``v`` by ``t K'(u) G``.
    """

    has_flow = True

    def __init__(self, profile: StripProfile, m: LiftedMap, speed: float = 1.0,
                 extended: bool = False, c_out: Optional[float] = None, c_in: Optional[float] = None):
        self.profile = profile
        self.map = m
        self.speed = float(speed)
        self.extended = bool(extended)
        self.dimension = m.dimension
        pm = m.planar
        self.c_out = pm.c_out if c_out is None else float(c_out)
        self.c_in = pm.c_in if c_in is None else float(c_in)
        if extended:
            if not 0 < self.c_out <= C_OUT + 1e-15:
                raise ValueError(f"outer collar must lie in (0, {C_OUT}]")
            if not 0 < self.c_in <= C_IN_LIMIT:
                raise ValueError(f"inner collar must lie in (0, {C_IN_LIMIT:.6f}]")
            if (self.c_out, self.c_in) != (pm.c_out, pm.c_in):
                pm = TrackMap(pm.layout, self.c_out, self.c_in)
                m = LiftedMap(pm, m.dimension, m.plane)
                self.map = m
        self.support = Cube.support_box(self.dimension) if extended else None
        self._jet0 = (float(profile.p(0.0)), float(profile.dp(0.0)), float(profile.d2p(0.0)))
        self._jet1 = (float(profile.p(1.0)), float(profile.dp(1.0)), float(profile.d2p(1.0)))

    def with_speed(self, speed: float) -> "TrackVelocity":
        return TrackVelocity(self.profile, self.map, speed, self.extended, self.c_out, self.c_in)

    # K' and K'' (times speed).  On the track K' = p; in a collar K' is the
    # second-order Taylor polynomial of p at the boundary times a septic
    # fall-off, so K is C^3 across the boundary and constant past the collar.
    def _K(self, u):
        K1 = np.zeros_like(u)
        K2 = np.zeros_like(u)
        inside = (u >= 0) & (u <= 1)
        K1[inside] = self.profile.p(u[inside])
        K2[inside] = self.profile.dp(u[inside])
        if self.extended:
            for edge, width, sign, (p_e, dp_e, d2p_e) in ((0.0, self.c_out, -1.0, self._jet0),
                                                          (1.0, self.c_in, 1.0, self._jet1)):
                x = u - edge
                m = (sign * x > 0) & (sign * x < width)
                if not np.any(m):
                    continue
                xm = x[m]
                S, dS = _smooth7(sign * xm / width)
                chi, dchi = 1.0 - S, -dS * sign / width
                poly = p_e + dp_e * xm + 0.5 * d2p_e * xm * xm
                K1[m] = poly * chi
                K2[m] = (dp_e + d2p_e * xm) * chi + poly * dchi
        return self.speed * K1, self.speed * K2

    def stream_function(self, u):
        """``K`` (times speed) along the transverse coordinate, by quadrature in the collars."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = self.speed * self.profile.H(np.clip(u, 0.0, 1.0))
        if self.extended:
            for k, uk in enumerate(u):
                if uk < 0 or uk > 1:
                    edge = 0.0 if uk < 0 else 1.0
                    nodes = np.linspace(edge, uk, 401)
                    out[k] = self.speed * self.profile.H(edge) + np.trapezoid(self._K(nodes)[0], nodes)
        return out

    def _prepare(self, X, hessian=False):
        P, Z = self.map.split(X)
        pm = self.map.planar
        st = pm.state(P, hessian=hessian)
        if self.extended:
            active = pm.in_extended(st)
            if self.map.others:
                G, dG = transverse_cutoff(Z)
            else:
                G, dG = np.ones(X.shape[0]), np.zeros((X.shape[0], 0))
            active &= G > 0
        else:
            ok = st["defined"] & (st["u"] >= -1e-12) & (st["u"] <= 1 + 1e-12)
            if self.map.others:
                ok &= np.all((Z >= -1e-12) & (Z <= 1 + 1e-12), axis=1)
            if not np.all(ok):
                raise PointOffTrack("pullback field evaluated off the track")
            active = ok
            G, dG = np.ones(X.shape[0]), np.zeros((X.shape[0], len(self.map.others)))
        u = np.where(active, st["u"], 2.0)
        K1, K2 = self._K(np.clip(u, -1.0, 2.0) if self.extended else np.clip(u, 0.0, 1.0))
        K1 = np.where(active, K1, 0.0)
        K2 = np.where(active, K2, 0.0)
        return P, Z, st, active, G, dG, K1, K2

    def value(self, x):
        X, single = as_batch(x, self.dimension)
        _, _, st, _, G, _, K1, _ = self._prepare(X)
        du = st["du"]
        coef = K1 * G
        out = np.zeros_like(X)
        out[:, self.map.ia] = -coef * du[:, 1]
        out[:, self.map.ib] = coef * du[:, 0]
        return out[0] if single else out

    def jacobian(self, x):
        X, single = as_batch(x, self.dimension)
        n = X.shape[0]
        _, _, st, active, G, dG, K1, K2 = self._prepare(X, hessian=True)
        du = st["du"]
        hu = np.where(active[:, None, None], st["hu"], 0.0)
        perp = np.stack([-du[:, 1], du[:, 0]], axis=1)
        dperp = np.stack([-hu[:, 1, :], hu[:, 0, :]], axis=1)  # rows: d(-u_y), d(u_x)
        planar = (K2 * G)[:, None, None] * perp[:, :, None] * du[:, None, :] + (K1 * G)[:, None, None] * dperp
        J = np.zeros((n, self.dimension, self.dimension))
        idx = [self.map.ia, self.map.ib]
        J[np.ix_(np.arange(n), idx, idx)] = planar
        if self.map.others:
            J[np.ix_(np.arange(n), idx, self.map.others)] = K1[:, None, None] * perp[:, :, None] * dG[:, None, :]
        return J[0] if single else J

    def flow(self, x, t):
        X, single = as_batch(x, self.dimension)
        n, d = X.shape
        P, Z, st, active, G, dG, K1, K2 = self._prepare(X)
        pm = self.map.planar
        J = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        Y = X.copy()
        if np.any(active):
            a = np.flatnonzero(active)
            ua = st["u"][a]
            vnew = st["v"][a] + t * K1[a] * G[a]
            Pn = pm.inverse(np.stack([ua, vnew], axis=1), extended=True)
            Jf = pm.jacobian(Pn, extended=True)
            Jinv = _adjugate(Jf)
            M = np.stack([st["du"][a], st["dv"][a] + (t * K2[a] * G[a])[:, None] * st["du"][a]], axis=1)
            idx = [self.map.ia, self.map.ib]
            Ypl = Y[a]
            Ypl[:, self.map.ia] = Pn[:, 0]
            Ypl[:, self.map.ib] = Pn[:, 1]
            Y[a] = Ypl
            Ja = J[a]
            Ja[np.ix_(np.arange(a.size), idx, idx)] = np.einsum("nij,njk->nik", Jinv, M)
            if self.map.others:
                col = Jinv[:, :, 1]  # image of e_v
                Ja[np.ix_(np.arange(a.size), idx, self.map.others)] = (
                    (t * K1[a])[:, None, None] * col[:, :, None] * dG[a][:, None, :])
            J[a] = Ja
        return (Y[0], J[0]) if single else (Y, J)


def pullback_velocity(strip_field: StripField, m: LiftedMap) -> TrackVelocity:
    """Pull a strip field back through the lifted track map (defined on the track)."""
    if tuple(strip_field.plane) != tuple(m.plane):
        raise ValueError("strip field and map act on different planes")
    return TrackVelocity(strip_field.profile, m, strip_field.speed, extended=False)


def shift_field(m: LiftedMap, speed: float = 1.0) -> TrackVelocity:
    """Pullback of the unit shift ``-e_v``; its time-``i`` flow carries piece ``i`` to piece 0."""
    return TrackVelocity(ShiftProfile(), m, speed, extended=False)


def extend_divfree(track_field: TrackVelocity, m: Optional[LiftedMap] = None, collar=None) -> TrackVelocity:
    """C^1 divergence-free extension supported in (-3, 4)^d.

    ``collar`` is ``None`` (defaults), a single width applied to both sides
    subject to the geometric limits, or an ``(outer, inner)`` pair.
    """
    if not isinstance(track_field, TrackVelocity) or not hasattr(track_field.profile, "H"):
        raise UnsupportedField("field has no registered stream function")
    m = m or track_field.map
    if collar is None:
        c_out, c_in = None, None
    elif isinstance(collar, (tuple, list)):
        c_out, c_in = float(collar[0]), float(collar[1])
    else:
        c = float(collar)
        if not 0 < c <= 0.25:
            raise ValueError("collar must lie in (0, 1/4]")
        c_out, c_in = min(c, C_OUT), min(c, C_IN)
    return TrackVelocity(track_field.profile, m, track_field.speed, extended=True, c_out=c_out, c_in=c_in)


def region_index(x, m: LiftedMap):
    """Index 0..7 of the piece containing ``x``; shared boundaries go to the lower index."""
    X, single = as_batch(x, m.dimension)
    if not np.all(m.on_track(X)):
        raise PointOffTrack("point outside the closed track")
    P, _ = m.split(X)
    v = np.mod(m.planar.state(P)["v"], STRIP_PERIOD)
    k = np.clip(np.ceil(v).astype(np.int64) - 1, 0, 7)
    return int(k[0]) if single else k

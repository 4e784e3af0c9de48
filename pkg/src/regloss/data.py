"""Builtin initial data.

A datum is named either by a bare string (``"gaussian"``), by a call-like
string (``"random-trig(3, 5)"``) or by a mapping with a ``name`` key and the
parameters alongside.  ``grid`` reads an RGLF file.
"""

from __future__ import annotations

import math
import re
from typing import Any, Dict, Optional

import numpy as np

from .fields import AnalyticField, Cube, ScalarField, read_grid
from .shears import TORUS_PERIOD

__all__ = ["BUILTINS", "make_datum", "parse_datum_spec", "default_region", "random_trig"]

BUILTINS = ("linear-x1", "gaussian", "plane-wave-x2", "constant", "random-trig", "grid")

_CALL = re.compile(r"^\s*([a-z0-9-]+)\s*(?:\((.*)\))?\s*$")


def parse_datum_spec(spec: Any) -> Dict[str, Any]:
    """Normalise any accepted datum spelling to a ``{"name": ..., **params}`` dict."""
    if isinstance(spec, dict):
        if "name" not in spec:
            raise ValueError("datum mapping needs a 'name'")
        return dict(spec)
    if not isinstance(spec, str):
        raise ValueError(f"cannot interpret datum {spec!r}")
    m = _CALL.match(spec)
    if not m:
        raise ValueError(f"cannot parse datum {spec!r}")
    name, args = m.group(1), m.group(2)
    out: Dict[str, Any] = {"name": name}
    if args:
        parts = [a.strip() for a in args.split(",") if a.strip()]
        if name == "random-trig":
            keys = ("seed", "modes")
            out.update({k: int(v) for k, v in zip(keys, parts)})
        elif name == "grid":
            out["path"] = args.strip()
        else:
            raise ValueError(f"datum {name!r} takes no positional arguments")
    return out


def _linear(d: int) -> AnalyticField:
    e1 = np.zeros(d)
    e1[0] = 1.0
    return AnalyticField(lambda X: X[:, 0].copy(),
                         lambda X: np.broadcast_to(e1, X.shape).copy(), d, name="linear-x1")


def _gaussian(d: int, center=None, width: float = 1.0) -> AnalyticField:
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    if c.shape != (d,):
        raise ValueError("gaussian center has the wrong dimension")
    w2 = float(width) ** 2

    def f(X):
        return np.exp(-np.sum((X - c) ** 2, axis=1) / w2)

    def g(X):
        return (-2.0 / w2) * (X - c) * f(X)[:, None]

    return AnalyticField(f, g, d, name="gaussian")


def _plane_wave(d: int) -> AnalyticField:
    k = math.pi / 4.0

    def g(X):
        out = np.zeros_like(X)
        out[:, 1] = k * np.cos(k * X[:, 1])
        return out

    return AnalyticField(lambda X: np.sin(k * X[:, 1]), g, d, name="plane-wave-x2")


def _constant(d: int, value: float = 1.0) -> AnalyticField:
    return AnalyticField(lambda X: np.full(X.shape[0], float(value)),
                         lambda X: np.zeros_like(X), d, name="constant")


def random_trig(seed: int, modes: int, d: int, max_freq: int = 3) -> AnalyticField:
    """``sum_m a_m cos(2 pi k_m . x / 8 + phi_m)`` with nonzero integer ``k_m``.

    Every term is 8-periodic, so the datum lives on the torus of the shear lemma.
    """
    if modes < 1:
        raise ValueError("need at least one mode")
    rng = np.random.default_rng(seed)
    K = np.zeros((modes, d))
    for m in range(modes):
        while not np.any(K[m]):
            K[m] = rng.integers(-max_freq, max_freq + 1, size=d)
    amp = rng.normal(size=modes)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=modes)
    W = 2.0 * math.pi * K / TORUS_PERIOD

    def f(X):
        return np.cos(X @ W.T + phase) @ amp

    def g(X):
        return -(np.sin(X @ W.T + phase) * amp) @ W

    return AnalyticField(f, g, d, name=f"random-trig({seed},{modes})")


def make_datum(spec: Any, d: int) -> ScalarField:
    """Build the datum named by ``spec`` in dimension ``d``."""
    p = parse_datum_spec(spec)
    name = p.pop("name")
    if name == "linear-x1":
        return _linear(d)
    if name == "gaussian":
        return _gaussian(d, p.get("center"), p.get("width", 1.0))
    if name == "plane-wave-x2":
        return _plane_wave(d)
    if name == "constant":
        return _constant(d, p.get("value", 1.0))
    if name == "random-trig":
        return random_trig(int(p.get("seed", 0)), int(p.get("modes", 5)), d)
    if name == "grid":
        if "path" not in p:
            raise ValueError("grid datum needs a 'path'")
        gf = read_grid(p["path"], order=int(p.get("order", 3)))
        if gf.dimension != d:
            raise ValueError(f"grid file is {gf.dimension}-dimensional, config says d = {d}")
        return gf
    raise ValueError(f"unknown datum {name!r}; builtins are {', '.join(BUILTINS)}")


def default_region(spec: Any, d: int) -> Optional[Cube]:
    """The shear-selection region natural to a datum: the torus cell for periodic data, else Omega_0."""
    name = parse_datum_spec(spec)["name"]
    if name in ("plane-wave-x2", "random-trig"):
        return Cube((TORUS_PERIOD / 2,) * d, TORUS_PERIOD)
    return Cube.unit(d)

"""Experiment configuration: a flat JSON object with a few nested groups.

Unknown keys are rejected so that a typo never silently falls back to a
default.  ``config_hash`` digests everything except the output directory,
so the same experiment written to two places produces identical files.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from .data import BUILTINS, parse_datum_spec
from .plan import gamma_of

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "config_hash", "VERIFY_GROUPS"]

VERIFY_GROUPS = ("field-core", "torus-shears", "track-geometry", "building-block",
                 "cube-plan", "advect", "norms", "cli-report")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (usage error)."""


_QUAD_KEYS = ("shear", "block", "mass", "norm", "density", "growth")


@dataclass(frozen=True)
class ExperimentConfig:
    datum: Any = "gaussian"
    d: int = 2
    alpha: float = 0.3
    n_steps: int = 3
    N: int = 5
    probe_r: float = 0.05
    quad: Dict[str, Optional[int]] = field(default_factory=dict)
    times: Optional[List[float]] = None
    norms: List[List[float]] = field(default_factory=lambda: [[0, 2], [1, 2], [1, 3]])
    shear: Dict[str, float] = field(default_factory=lambda: {"A": 1.0, "T": 1.0})
    region: Optional[Dict[str, Any]] = None
    oracle: Dict[str, float] = field(default_factory=lambda: {"dt": 1e-3, "points": 100})
    track: Dict[str, Optional[float]] = field(default_factory=dict)
    series: Dict[str, float] = field(default_factory=lambda: {"N": 50, "t": 0.1})
    block_slots: Optional[int] = None
    verify: Dict[str, Any] = field(default_factory=dict)
    out: str = "out"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # -- accessors with defaults ---------------------------------------------
    def q(self, key: str) -> Optional[int]:
        v = self.quad.get(key)
        return None if v is None else int(v)

    @property
    def A(self) -> float:
        return float(self.shear.get("A", 1.0))

    @property
    def T(self) -> float:
        return float(self.shear.get("T", 1.0))

    @property
    def dt(self) -> float:
        return float(self.oracle.get("dt", 1e-3))

    @property
    def oracle_points(self) -> int:
        return int(self.oracle.get("points", 100))

    @property
    def verify_groups(self) -> tuple:
        only = self.verify.get("only")
        return tuple(only) if only else VERIFY_GROUPS

    # -- validation ----------------------------------------------------------
    def validate(self) -> None:
        if self.d not in (2, 3):
            raise ConfigError(f"d must be 2 or 3, got {self.d}")
        if not (isinstance(self.alpha, (int, float)) and self.alpha > 0):
            raise ConfigError("alpha must be positive")
        if int(self.n_steps) < 1:
            raise ConfigError("n_steps must be at least 1")
        if int(self.N) < 1:
            raise ConfigError("N must be at least 1")
        if not self.probe_r > 0:
            raise ConfigError("probe_r must be positive")
        bad = set(self.quad) - set(_QUAD_KEYS)
        if bad:
            raise ConfigError(f"unknown quadrature keys {sorted(bad)}; allowed {list(_QUAD_KEYS)}")
        for k, v in self.quad.items():
            if v is not None and int(v) < 16 and k != "density":
                raise ConfigError(f"quad.{k} must be at least 16")
        try:
            spec = parse_datum_spec(self.datum)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if spec["name"] not in BUILTINS:
            raise ConfigError(f"unknown datum {spec['name']!r}; builtins are {', '.join(BUILTINS)}")
        if spec["name"] == "grid":
            path = spec.get("path")
            if not path or not os.path.exists(path):
                raise ConfigError(f"grid file {path!r} does not exist")
        for pair in self.norms:
            if len(pair) != 2:
                raise ConfigError("norms entries are [r, p] pairs")
            r, p = pair
            if r < 0 or not 1 <= p < math.inf:
                raise ConfigError(f"norm pair {pair}: need r >= 0 and 1 <= p < inf")
        if self.times is not None and any(t < 0 for t in self.times):
            raise ConfigError("times must be nonnegative")
        if not self.dt > 0 or self.oracle_points < 1:
            raise ConfigError("oracle needs dt > 0 and at least one point")
        if set(self.track) - {"r_in", "r_out"}:
            raise ConfigError("track accepts only r_in and r_out")
        if self.block_slots is not None and not 1 <= int(self.block_slots) <= int(self.N):
            raise ConfigError("block_slots must lie in [1, N]")
        unknown = set(self.verify_groups) - set(VERIFY_GROUPS)
        if unknown:
            raise ConfigError(f"unknown verify groups {sorted(unknown)}")
        if self.region is not None and not {"center", "side"} <= set(self.region):
            raise ConfigError("region needs 'center' and 'side'")

    def gammas(self) -> Dict[tuple, float]:
        return {(float(r), float(p)): gamma_of(r, p, self.d) for r, p in self.norms}

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = asdict(self)
        data.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig(**data)

    def to_json(self) -> dict:
        return copy.deepcopy(asdict(self))


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Read a JSON config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: ExperimentConfig) -> str:
    data = cfg.to_json()
    data.pop("out", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]

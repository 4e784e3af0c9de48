"""The invariant battery behind ``regloss verify``.

Checks are grouped by module.  Each check returns a measured value, the
threshold it is compared against and a pass flag; exceptions inside a check
count as failures and are reported, never swallowed silently.  Expensive
objects (blocks, a one-slot plan with blocks) are built once per run and
shared between groups.
"""

from __future__ import annotations

import filecmp
import math
import sys
import tempfile
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List

import numpy as np

from .advect import SolutionHandle, rk4_trajectory
from .block import build_block, step_fields
from .config import ExperimentConfig, config_hash
from .data import make_datum, random_trig
from .errors import SuperCritical
from .fields import (AnalyticField, ConstantVelocity, Cube, TimeSchedule, fd_divergence, grid_sample,
                     interpolate, read_grid, schedule_flow_map, transported, write_grid)
from .norms import (direct_slot_norm, fractional_h_norm, growth_curve, l2_grad_norm, periodic_samples,
                    rescaled_velocity, wkp_seminorm)
from .plan import (default_schedule, find_density_point, linf_prefactors, plan_cubes, series_field,
                   series_solution)
from .report import write_csv
from .shears import ShearSpec, select_shear, shear_growth_ratio, sum_identity_defect
from .track import (ShearProfile, ShiftProfile, TrackVelocity, build_track, extend_divfree,
                    lift_map, track_map)

__all__ = ["CheckResult", "run_checks", "run_verify"]


@dataclass(frozen=True)
class CheckResult:
    group: str
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str
    seconds: float


class _Context:
    """Lazily built objects shared by several groups."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._cache = {}

    def get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def datum(self):
        return self.get("datum", lambda: make_datum(self.cfg.datum, self.cfg.d))

    def slot_plan(self):
        """One slot with its block, for the oracle and norm checks."""
        def build():
            cfg = self.cfg
            f = self.datum()
            dp = find_density_point(f, cfg.probe_r, n=cfg.q("density"))
            return plan_cubes(f, 1, dp.x_star, dp.delta_bar, cfg.probe_r, alpha=cfg.alpha,
                              n_steps=cfg.n_steps, build_blocks=True, n_mass=cfg.q("mass"),
                              block_quad=cfg.q("block"))
        return self.get("slot_plan", build)


Check = Callable[[_Context], tuple]


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# --- field-core ----------------------------------------------------------------

def _fc_linear(ctx):
    d = ctx.cfg.d
    coef = np.arange(1.0, d + 1.0)
    f = AnalyticField(lambda X: X @ coef, lambda X: np.tile(coef, (X.shape[0], 1)), d)
    g = grid_sample(f, Cube.unit(d), 8)
    X = Cube.unit(d).random_points(np.random.default_rng(ctx.cfg.seed), 200)
    v, gr = interpolate(g, X)
    err = max(float(np.max(np.abs(v - X @ coef))), float(np.max(np.abs(gr - coef))))
    return err, 1e-12, "cubic interpolant reproduces a linear datum"


def _fc_cubic(ctx):
    k = math.pi / 4
    f = AnalyticField(lambda X: np.sin(k * X[:, 0]), lambda X: np.stack([k * np.cos(k * X[:, 0]), 0 * X[:, 1]], 1), 2)
    g = grid_sample(f, Cube((4.0, 4.0), 8.0), 256)
    v, _ = interpolate(g, np.array([1.37, 2.0]))
    return abs(v - math.sin(k * 1.37)), 1e-8, "sin(pi x1/4) on 256^2 nodes at x1 = 1.37"


def _fc_schedule(ctx):
    d = ctx.cfg.d
    e = np.eye(d)
    sched = TimeSchedule(((1.0, ConstantVelocity(e[0])), (1.0, ConstantVelocity(e[1]))))
    x = np.full(d, 0.25)
    y = schedule_flow_map(sched, 1.5, x)
    return float(np.max(np.abs(y - (x + e[0] + 0.5 * e[1])))), 1e-15, "e1 then e2, t = 1.5"


def _fc_rglf(ctx):
    d = ctx.cfg.d
    f = make_datum("gaussian", d)
    g = grid_sample(f, Cube((0.0,) * d, 2.0), 9)
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "g.rglf"
        write_grid(p, g)
        h = read_grid(p)
    return float(np.max(np.abs(h.samples - g.samples))), 0.0, "grid file round trip"


# --- torus-shears ----------------------------------------------------------------

_TORUS2 = Cube((4.0, 4.0), 8.0)


def _ts_identity(ctx):
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(3):
        f = random_trig(ctx.cfg.seed + k, 5, 2)
        worst = max(worst, sum_identity_defect(f, _TORUS2, 1.0, 1.0, 256))
    dt = time.perf_counter() - t0
    return worst, 1e-6, "3 random trigonometric data, runtime budget 10 s", worst <= 1e-6 and dt <= 10.0


def _ts_floor2(ctx):
    worst = math.inf
    for k in range(3):
        sel = select_shear(random_trig(ctx.cfg.seed + k, 5, 2), _TORUS2, 1.0, 1.0, 256)
        worst = min(worst, sel.ratio - (sel.floor - sel.error))
    return worst, 0.0, "min over data of ratio - (1 + pi^2 - eps_quad), must be >= 0", worst >= 0


def _ts_floor3(ctx):
    sel = select_shear(random_trig(ctx.cfg.seed, 5, 3), Cube((4.0,) * 3, 8.0), 1.0, 1.0, 64)
    margin = sel.ratio - (1 + 2 * math.pi ** 2 / 3 - sel.error)
    return margin, 0.0, "ratio - (1 + 2 pi^2/3 - eps_quad) in d = 3, must be >= 0", margin >= 0


def _ts_plane(ctx):
    f = make_datum("plane-wave-x2", 2)
    r = shear_growth_ratio(f, _TORUS2, ShearSpec(1, 1, 1, 1.0, 2), 1.0, 256)
    sel = select_shear(f, _TORUS2, 1.0, 1.0, 256)
    err = _rel(r, 1 + 2 * math.pi ** 2)
    return err, 1e-6, f"closed form 1 + 2 pi^2; winner axis j = {sel.spec.j}", err <= 1e-6 and sel.spec.j == 1


# --- track-geometry ----------------------------------------------------------------

def _layout(ctx):
    return build_track(ctx.cfg.track.get("r_in"), ctx.cfg.track.get("r_out"))


def _tg_areas(ctx):
    areas = _layout(ctx).areas()
    return max(abs(a - 1.0) for a in areas), 1e-12, "eight piece areas"


def _strip_points(ctx, per_piece=10_000):
    rng = np.random.default_rng(ctx.cfg.seed)
    u = rng.uniform(0, 1, 8 * per_piece)
    v = np.repeat(np.arange(8.0), per_piece) + rng.uniform(0, 1, 8 * per_piece)
    return np.stack([u, v], axis=1)


def _tg_det(ctx):
    m = track_map(_layout(ctx))
    P = m.inverse(_strip_points(ctx))
    det = np.linalg.det(m.jacobian(P))
    return float(np.max(np.abs(det - 1.0))), 1e-8, "jacobian determinant at 10^4 points per piece"


def _tg_roundtrip(ctx):
    m = track_map(_layout(ctx))
    UV = _strip_points(ctx)
    return float(np.max(np.abs(m.forward(m.inverse(UV)) - UV))), 1e-10, "forward(inverse(x)) = x"


def _tg_identity(ctx):
    m = track_map(_layout(ctx))
    X = Cube.unit(2).random_points(np.random.default_rng(ctx.cfg.seed), 1000)
    return float(np.max(np.abs(m.forward(X) - X))), 0.0, "identity on the unit square (exact)"


def _divfree_fields(d):
    m = lift_map(track_map(), d, (1, 2) if d == 2 else (3, 1))
    return [extend_divfree(TrackVelocity(ShearProfile(ShearSpec(i, ip, 1, 0.7, d)), m, speed=3.0))
            for i in (1, 2) for ip in (1, 2)] + [extend_divfree(TrackVelocity(ShiftProfile(), m, speed=3.0))]


def _tg_divergence(ctx):
    rng = np.random.default_rng(ctx.cfg.seed)
    worst = 0.0
    for d in (2, 3):
        X = rng.uniform(-3, 4, (10_000, d))
        for f in _divfree_fields(d):
            worst = max(worst, float(np.max(np.abs(fd_divergence(f, X)))))
    return worst, 1e-6, "five-point divergence, h = 1e-5, 10^4 points in (-3,4)^d, d = 2, 3"


def _tg_outside(ctx):
    rng = np.random.default_rng(ctx.cfg.seed + 1)
    worst = 0.0
    for d in (2, 3):
        X = rng.uniform(-6, 7, (20_000, d))
        X = X[np.any((X <= -3) | (X >= 4), axis=1)][:1000]
        for f in _divfree_fields(d):
            worst = max(worst, float(np.max(np.abs(f.value(X)))))
    return worst, 0.0, "field values at 10^3 points outside (-3,4)^d"


# --- building-block ---------------------------------------------------------------

def _block_check(name):
    def check(ctx):
        d, alpha = 2, ctx.cfg.alpha
        f = make_datum(name, d)
        t0 = time.perf_counter()
        b = ctx.get(("block", name), lambda: build_block(f, alpha, ctx.cfg.n_steps, d, n_quad=ctx.cfg.q("block")))
        dt = time.perf_counter() - t0
        base = l2_grad_norm(f, Cube.unit(d), 0.0, 256).value
        worst = math.inf
        for n in range(1, b.n_steps + 1):
            g = transported(f, b.schedule, float(n))
            ratio = l2_grad_norm(g, Cube.unit(d), 0.0, 256).value / base
            worst = min(worst, ratio / math.exp(alpha * n))
        return (worst, 1.0, "min_n measured / e^(alpha n) on Omega_0 (must be >= 1), build budget 120 s",
                worst >= 1.0 and dt <= 120.0)
    return check


def _bb_segments(ctx):
    b = ctx.slot_plan().slots[0].block
    rng = np.random.default_rng(ctx.cfg.seed)
    X = rng.uniform(-3, 4, (10_000, b.d))
    worst = 0.0
    for _, f in b.schedule.segments:
        worst = max(worst, float(np.max(np.abs(fd_divergence(f, X)))))
    return worst, 1e-6, "divergence of every segment field of a built block"


# --- cube-plan ----------------------------------------------------------------------

def _cp_invariants(ctx):
    cfg = ctx.cfg
    failed = []
    for spec in (cfg.datum, "linear-x1"):
        f = make_datum(spec, cfg.d)
        dp = find_density_point(f, cfg.probe_r, n=cfg.q("density"))
        plan = plan_cubes(f, cfg.N, dp.x_star, dp.delta_bar, cfg.probe_r, build_blocks=False,
                          n_mass=cfg.q("mass"))
        failed += [f"{spec}:{k}" for k, v in plan.checks.items() if not v]
    return float(len(failed)), 0.0, "failed checks: " + (", ".join(failed) or "none")


def _cp_solution_series(ctx):
    lam, tau = default_schedule(50)
    s = series_solution(lam, tau, 0.1, 2)
    s0 = series_solution(lam, tau, 0.0, 2)
    limit = -math.log(math.e - 1.0)
    ok = s[19] > 18 and bool(np.all(np.diff(s) > 0)) and abs(s0[-1] - limit) < 1e-12
    return float(s[19]), 18.0, f"log S_20(t = 0.1); t = 0 limit {s0[-1]:.6f} vs log 1/(e-1) = {limit:.6f}", ok


def _cp_field_series(ctx):
    lam, tau = default_schedule(50)
    fs = series_field(lam, tau, 1.0)
    e = math.e
    oracle = e * (e + 1) / (e - 1) ** 3
    rejected = 0
    for g in (0.0, -0.5):
        try:
            series_field(lam, tau, g)
        except SuperCritical:
            rejected += 1
    err = abs(fs.upper - oracle)
    return err, 1e-3, f"partial + tail = {fs.upper:.6f} vs {oracle:.6f}; gamma <= 0 rejected {rejected}/2", \
        err <= 1e-3 and rejected == 2


def _cp_linf(ctx):
    lam, tau = default_schedule(20)
    pre = linf_prefactors(lam, tau)
    k = int(np.argmax(pre)) + 1
    err = abs(pre[k - 1] - 4 * math.exp(-2))
    return err, 1e-12, f"lambda_n / tau_n is largest at n = {k}", err <= 1e-12 and k == 2


# --- advect -----------------------------------------------------------------------

def _ad_oracle(ctx):
    plan = ctx.slot_plan()
    s = plan.slots[0]
    handle = SolutionHandle(plan, ctx.datum())
    rng = np.random.default_rng(ctx.cfg.seed)
    X = s.support.random_points(rng, ctx.cfg.oracle_points)
    T = s.horizon
    rk = rk4_trajectory(handle.velocity, X, 0.0, T, ctx.cfg.dt * s.tau)
    ex = handle.forward_flow(X, T)
    err = float(np.max(np.abs(rk - ex))) / s.side
    return err, 1e-4, f"RK4 vs exact over the block horizon, {len(X)} points, dt = {ctx.cfg.dt:g} block units"


def _ad_l2(ctx):
    plan = ctx.slot_plan()
    s = plan.slots[0]
    handle = SolutionHandle(plan, ctx.datum())
    n = 128 if plan.dimension == 2 else 32
    nodes = s.support.midpoint_nodes(n)
    w = s.support.volume / n ** plan.dimension
    m0 = w * float(np.sum(ctx.datum().value(nodes) ** 2))
    m1 = w * float(np.sum(handle.evaluate(nodes, s.horizon) ** 2))
    return _rel(m1, m0), 1e-4, "relative change of the L^2 mass on the dilated slot"


def _ad_inverse(ctx):
    plan = ctx.slot_plan()
    s = plan.slots[0]
    handle = SolutionHandle(plan, ctx.datum())
    X = s.support.random_points(np.random.default_rng(ctx.cfg.seed), 1000)
    Y, _ = handle.inverse_flow(handle.forward_flow(X, 0.7 * s.horizon), 0.7 * s.horizon)
    return float(np.max(np.abs(Y - X))) / s.side, 1e-9, "inverse(forward(x)) = x over 1000 points, block units"


# --- norms ------------------------------------------------------------------------

def _nm_single_mode(ctx):
    worst = 0.0
    for m in (1, 3):
        f = AnalyticField(lambda X, m=m: np.sin(2 * math.pi * m * X[:, 0] / 8),
                          lambda X: np.zeros_like(X), 2)
        a = periodic_samples(f, 8.0, 64)
        l2 = math.sqrt(8.0 ** 2 / 2)
        for r in (0.5, 1.0, 1.7):
            worst = max(worst, _rel(fractional_h_norm(a, 8.0, r).value, (2 * math.pi * m / 8) ** r * l2))
    return worst, 1e-8, "single-mode H^r, r in {0.5, 1, 1.7}, m in {1, 3}"


def _nm_plancherel(ctx):
    f = random_trig(ctx.cfg.seed, 5, 2)
    a = periodic_samples(f, 8.0, 64)
    worst = 0.0
    for k in (1, 2):
        worst = max(worst, _rel(wkp_seminorm(f, k, 2, _TORUS2, 256).value, fractional_h_norm(a, 8.0, k).value))
    return worst, 1e-6, "FFT H^k vs quadrature W^{k,2}, k = 1, 2, band-limited datum"


def _nm_scaling(ctx):
    plan = ctx.slot_plan()
    s = plan.slots[0]
    worst = 0.0
    for r, p in ((0, 2), (1, 2), (1, 3)):
        direct, scaled = direct_slot_norm(plan, 1, r, p, 0.37 * s.horizon, n_quad=ctx.cfg.q("norm"))
        worst = max(worst, _rel(direct, scaled))
    return worst, 1e-2, "slot 1: direct quadrature vs scaling identity at (0,2), (1,2), (1,3)"


def _nm_rescaling(ctx):
    d = ctx.cfg.d
    u = step_fields(ShearSpec(1, 1, 1, 0.5, d), 2)[0]
    n = 128 if d == 2 else 32
    ref = wkp_seminorm(u, 1, 2, Cube.support_box(d), n).value
    gamma = 1 - 1 + d / 2
    worst = 0.0
    for lam in (0.5, 0.25, 0.125):
        tau = math.log(1 / lam) ** -2
        v = rescaled_velocity(u, np.zeros(d), lam, tau)
        direct = wkp_seminorm(v, 1, 2, v.support, n).value
        worst = max(worst, _rel(direct / ref, lam ** gamma / tau))
    return worst, 1e-2, "direct / reference = lambda^gamma / tau for three lambda"


def _nm_growth(ctx):
    plan = ctx.slot_plan()
    handle = SolutionHandle(plan, ctx.datum(), horizon=plan.slots[0].horizon)
    times = np.linspace(0.0, plan.slots[0].horizon, 7)
    curve = growth_curve(handle, None, times)
    t0 = [r for r in curve.rows if r[0] == 0.0]
    err = max(_rel(r[2], plan.slots[r[1] - 1].mass) for r in t0)
    return err, 1e-12, f"t = 0 rows equal M_n; measured >= bound on all rows: {curve.all_bounded()}", \
        err <= 1e-12 and curve.all_bounded()


# --- cli-report ---------------------------------------------------------------------

def _cr_reproducible(ctx):
    from .cli import cmd_plan, cmd_select_shear
    with tempfile.TemporaryDirectory() as tmp:
        dirs = []
        for k in range(2):
            out = str(Path(tmp) / f"run{k}")
            cfg = ctx.cfg.with_overrides(out=out)
            cmd_select_shear(cfg)
            cmd_plan(cfg)
            dirs.append(Path(out))
        names = sorted(p.name for p in dirs[0].iterdir())
        same = [filecmp.cmp(dirs[0] / nm, dirs[1] / nm, shallow=False) for nm in names]
        meta_ok = all((dirs[0] / nm).read_text(encoding="utf-8").splitlines()[-1].startswith("# config ")
                      for nm in names if nm.endswith(".csv"))
    return float(same.count(False)), 0.0, f"{len(names)} files compared byte for byte; metadata line {meta_ok}", \
        all(same) and meta_ok


GROUPS = {
    "field-core": [("linear reproduction", _fc_linear), ("cubic accuracy", _fc_cubic),
                   ("schedule composition", _fc_schedule), ("grid file round trip", _fc_rglf)],
    "torus-shears": [("sum identity", _ts_identity), ("winner floor d=2", _ts_floor2),
                     ("winner floor d=3", _ts_floor3), ("plane wave closed form", _ts_plane)],
    "track-geometry": [("piece areas", _tg_areas), ("unit determinant", _tg_det),
                       ("round trip", _tg_roundtrip), ("identity on Omega_0", _tg_identity),
                       ("divergence free", _tg_divergence), ("support in (-3,4)^d", _tg_outside)],
    "building-block": [("growth gaussian", _block_check("gaussian")),
                       ("growth linear-x1", _block_check("linear-x1")),
                       ("segment divergence", _bb_segments)],
    "cube-plan": [("plan invariants", _cp_invariants), ("solution series", _cp_solution_series),
                  ("field series", _cp_field_series), ("L^inf prefactor", _cp_linf)],
    "advect": [("RK4 oracle", _ad_oracle), ("L^2 conservation", _ad_l2), ("flow inverse", _ad_inverse)],
    "norms": [("single-mode H^r", _nm_single_mode), ("Plancherel", _nm_plancherel),
              ("slot scaling", _nm_scaling), ("rescaling identity", _nm_rescaling),
              ("growth curve", _nm_growth)],
    "cli-report": [("byte reproducibility", _cr_reproducible)],
}


def run_checks(cfg: ExperimentConfig, groups=None, echo=None) -> List[CheckResult]:
    ctx = _Context(cfg)
    results = []
    for group in (groups or cfg.verify_groups):
        for name, fn in GROUPS[group]:
            t0 = time.perf_counter()
            try:
                out = fn(ctx)
                value, thr, detail = out[:3]
                passed = bool(out[3]) if len(out) > 3 else bool(value <= thr)
            except Exception as exc:  # a crashing check is a failing check
                value, thr, passed = math.nan, math.nan, False
                detail = f"{type(exc).__name__}: {exc}"
                if echo is not None:
                    traceback.print_exc(file=sys.stderr)
            res = CheckResult(group, name, passed, float(value), float(thr), detail, time.perf_counter() - t0)
            results.append(res)
            if echo is not None:
                echo(res)
    return results


def _echo(r: CheckResult) -> None:
    print(f"{r.group:15s} {r.name:24s} {'PASS' if r.passed else 'FAIL'}  "
          f"value={r.value:.3e} limit={r.threshold:.1e}  {r.seconds:6.1f}s  {r.detail}", flush=True)


def run_verify(cfg: ExperimentConfig) -> bool:
    t0 = time.perf_counter()
    results = run_checks(cfg, echo=_echo)
    total = time.perf_counter() - t0
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} checks passed in {total:.1f} s")
    out = Path(cfg.out)
    rows = [(r.group, r.name, r.passed, r.value, r.threshold, r.detail) for r in results]
    write_csv(out / "verify.csv", ("group", "check", "passed", "value", "threshold", "detail"), rows,
              config_hash(cfg))
    return n_pass == len(results)

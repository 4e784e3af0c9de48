"""Command line entry point.

    regloss <select-shear|plan|simulate|verify|track dump-geometry> --config FILE [--out DIR] [--seed N]

Exit codes: 0 success, 1 usage or configuration error, 2 degenerate data
(zero gradient, no growth data, supercritical norm request), 3 slot
rejected, 4 verification failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .advect import SolutionHandle, sample_rows
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .data import default_region, make_datum, parse_datum_spec
from .errors import ReglossError, SlotRejected, SuperCritical
from .fields import Cube
from .norms import GROWTH_COLUMNS, growth_curve, velocity_norm_series
from .plan import default_schedule, find_density_point, plan_cubes, series_field, series_solution
from .report import bar_plot, line_plot, track_plot, write_csv, write_json
from .shears import select_shear, sum_identity_defect
from .track import build_track, track_map

__all__ = ["main", "cmd_select_shear", "cmd_plan", "cmd_simulate", "cmd_track_dump",
           "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_SLOT", "EXIT_VERIFY"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SLOT, EXIT_VERIFY = 0, 1, 2, 3, 4


def _out(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _region(cfg: ExperimentConfig) -> Cube:
    if cfg.region is not None:
        return Cube(tuple(cfg.region["center"]), float(cfg.region["side"]))
    return default_region(cfg.datum, cfg.d)


# --- select-shear ------------------------------------------------------------

def cmd_select_shear(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    h = config_hash(cfg)
    datum = make_datum(cfg.datum, cfg.d)
    region = _region(cfg)
    n = cfg.q("shear") or (256 if cfg.d == 2 else 64)
    sel = select_shear(datum, region, cfg.A, cfg.T, n)
    defect = sum_identity_defect(datum, region, cfg.A, cfg.T, n)
    rows = []
    for k, (s, r, e) in enumerate(zip(sel.specs, sel.ratios, sel.errors)):
        rows.append((s.j, s.jp, s.ip, s.i, s.A, cfg.T, r, e, s == sel.spec, sel.floor, defect))
    write_csv(out / "shears.csv",
              ("j", "jp", "ip", "i", "A", "T", "ratio", "error", "selected", "floor", "defect"), rows, h)
    cert = {
        "datum": parse_datum_spec(cfg.datum), "d": cfg.d, "region": region.to_json(),
        "n_quad": n, "winner": sel.spec.to_json(), "ratio": sel.ratio, "error": sel.error,
        "floor": sel.floor, "mean_ratio": float(np.mean(sel.ratios)),
        "certified": bool(sel.ratio >= sel.floor - sel.error),
        "sum_identity_defect": defect, "config_hash": h,
    }
    write_json(out / "certificate.json", cert)
    labels = [f"j{s.j} i'{s.ip} i{s.i}" for s in sel.specs]
    bar_plot(out / "shears.svg", labels, sel.ratios, "energy ratio",
             title="candidate shears (dashed: guaranteed floor)", hline=sel.floor,
             highlight=list(sel.specs).index(sel.spec))
    return cert


# --- plan ----------------------------------------------------------------------

def _density(cfg, datum):
    return find_density_point(datum, cfg.probe_r, n=cfg.q("density"))


def _plan_doc(cfg, dp, plan) -> dict:
    return {"density_point": {"x_star": list(dp.x_star), "delta_bar": dp.delta_bar,
                              "probe_r": dp.probe_r, "averages": list(dp.averages),
                              "stable": dp.stable, "region": dp.region.to_json()},
            "plan": plan.to_json(), "all_checks_pass": bool(all(plan.checks.values())),
            "config_hash": config_hash(cfg)}


def _plan_figure(path, plan) -> None:
    xs = [s.center[0] for s in plan.slots]
    ys = [s.side for s in plan.slots]
    line_plot(path, [("lambda_n", [s.index for s in plan.slots], ys),
                     ("|x_n - x*|", [s.index for s in plan.slots],
                      [abs(x - plan.x_star[0]) for x in xs])],
              "slot n", "length", title="slot sides and distances to the density point",
              logy=True, styles=["o-", "s--"])


def cmd_plan(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    datum = make_datum(cfg.datum, cfg.d)
    dp = _density(cfg, datum)
    plan = plan_cubes(datum, cfg.N, dp.x_star, dp.delta_bar, cfg.probe_r, alpha=cfg.alpha,
                      n_steps=cfg.n_steps, build_blocks=False, n_mass=cfg.q("mass"))
    doc = _plan_doc(cfg, dp, plan)
    write_json(out / "plan.json", doc)
    _plan_figure(out / "plan.svg", plan)
    return doc


# --- simulate ------------------------------------------------------------------

def _default_times(plan, k: int = 13) -> List[float]:
    horizon = min(s.horizon for s in plan.slots)
    return [float(x) for x in np.linspace(0.0, horizon, k)]


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    h = config_hash(cfg)
    datum = make_datum(cfg.datum, cfg.d)
    gammas = cfg.gammas()
    for (r, p), g in gammas.items():
        if not g > 0:
            raise SuperCritical(f"(r, p) = ({r:g}, {p:g}) gives gamma = {g:g} <= 0")
    dp = _density(cfg, datum)
    n_slots = int(cfg.block_slots or cfg.N)
    plan = plan_cubes(datum, n_slots, dp.x_star, dp.delta_bar, cfg.probe_r, alpha=cfg.alpha,
                      n_steps=cfg.n_steps, build_blocks=True, n_mass=cfg.q("mass"),
                      block_quad=cfg.q("block"))
    handle = SolutionHandle(plan, datum, horizon=min(s.horizon for s in plan.slots))
    times = cfg.times if cfg.times is not None else _default_times(plan)
    curve = growth_curve(handle, None, times, n_quad=cfg.q("growth"))
    write_csv(out / "growth.csv", GROWTH_COLUMNS, curve.rows, h)

    # series on the default schedule
    Ns = int(cfg.series.get("N", 50))
    ts = float(cfg.series.get("t", 0.1))
    lam, tau = default_schedule(Ns)
    s0 = series_solution(lam, tau, 0.0, cfg.d)
    st = series_solution(lam, tau, ts, cfg.d)
    cols = ["n", "lambda", "tau", "log_sum_t0", f"log_sum_t{ts:g}"]
    field_cols = []
    for (r, p), g in gammas.items():
        fs = [series_field(lam, tau, g, N=k) for k in range(1, Ns + 1)]
        field_cols.append(([f.partial for f in fs], [f.upper for f in fs]))
        cols += [f"field_partial_r{r:g}_p{p:g}", f"field_upper_r{r:g}_p{p:g}"]
    rows = []
    for i in range(Ns):
        row = [i + 1, float(lam[i]), float(tau[i]), float(s0[i]), float(st[i])]
        for part, up in field_cols:
            row += [part[i], up[i]]
        rows.append(row)
    write_csv(out / "series.csv", cols, rows, h)

    # velocity norms of the realised plan
    nrows = []
    totals = {}
    for (r, p), g in gammas.items():
        rep, table = velocity_norm_series(plan, r, p, n_quad=cfg.q("norm"))
        for t in table:
            nrows.append((r, p, g, t.slot, t.lam, t.tau, t.factor, t.reference, t.contribution))
        nrows.append((r, p, g, "total", "", "", "", "", rep.value))
        totals[f"r{r:g}_p{p:g}"] = rep.value
    write_csv(out / "norms.csv", ("r", "p", "gamma", "slot", "lambda", "tau", "factor", "reference",
                                  "contribution"), nrows, h)

    rng = np.random.default_rng(cfg.seed)
    pts = plan.slots[0].support.random_points(rng, 32)
    write_csv(out / "samples.csv", [f"x{k + 1}" for k in range(cfg.d)] + ["t", "rho", "grad_norm"],
              sample_rows(handle, pts, times), h)

    doc = _plan_doc(cfg, dp, plan)
    doc["betas"] = {str(k): v for k, v in curve.betas.items()}
    doc["velocity_norms"] = totals
    doc["growth_bounded"] = curve.all_bounded()
    write_json(out / "simulation.json", doc)

    series = []
    for j in range(len(plan.slots)):
        rows_j = [r for r in curve.rows if r[1] == j + 1]
        series.append((f"Q{j + 1} measured", [r[0] for r in rows_j], [r[2] for r in rows_j]))
        series.append((f"Q{j + 1} bound", [r[0] for r in rows_j], [math.exp(r[3]) for r in rows_j]))
    line_plot(out / "growth.svg", series, "t", "||grad rho||_L2(Q_n)", logy=True,
              title="gradient growth on the slot cubes",
              styles=[("o-" if k % 2 == 0 else "--") for k in range(len(series))])
    n_axis = list(range(1, Ns + 1))
    line_plot(out / "series.svg", [("log sum, t = 0", n_axis, s0), (f"log sum, t = {ts:g}", n_axis, st)],
              "N", "log partial sum", title="solution series on the default schedule")
    return doc


# --- track ---------------------------------------------------------------------

def _corner_boundaries(m, layout, n: int = 257):
    """Preimages of the strip edges ``u = 0`` and ``u = 1`` over each corner band."""
    out = []
    for p in layout.pieces:
        if p.kind != "annulus":
            continue
        v = np.linspace(p.index, p.index + 1, n)
        out.append((p, {side: m.inverse(np.stack([np.full(n, u), v], axis=1))
                        for side, u in (("outer", 0.0), ("inner", 1.0))}))
    return out


def cmd_track_dump(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    layout = build_track(cfg.track.get("r_in"), cfg.track.get("r_out"))
    doc = layout.to_json()
    curves = None
    try:
        m = track_map(layout)
        doc["collars"] = {"outer": m.c_out, "inner": m.c_in}
        curves = _corner_boundaries(m, layout)
        doc["corner_boundary_deviation"] = {
            side: max(float(np.max(np.abs(np.hypot(*(c[side] - p.center).T) - r)))
                      for p, c in curves)
            for side, r in (("outer", layout.pieces[1].r_out), ("inner", layout.pieces[1].r_in))}
    except ReglossError as exc:
        doc["collars"] = {"error": str(exc)}
    write_json(out / "geometry.json", doc)
    track_plot(out / "track.svg", layout, title="octagonal track",
               curves=None if curves is None else [c[s] for _, c in curves for s in ("outer", "inner")])
    return doc


# --- main ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (JSON)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p = _Parser(prog="regloss", description="Instantaneous H^1 loss by cube-clustered track flows.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("select-shear", parents=[common], help="score the candidate torus shears")
    sub.add_parser("plan", parents=[common], help="density point and cube plan with invariant checks")
    sub.add_parser("simulate", parents=[common], help="build blocks, growth curve, series and norms")
    sub.add_parser("verify", parents=[common], help="run every invariant check")
    tr = sub.add_parser("track", help="track geometry utilities")
    tsub = tr.add_subparsers(dest="track_command", required=True, parser_class=_Parser)
    tsub.add_parser("dump-geometry", parents=[common], help="write the piece descriptors")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(out=args.out, seed=args.seed)
    except ConfigError as exc:
        print(f"regloss: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "select-shear":
            cert = cmd_select_shear(cfg)
            print(f"winner {cert['winner']}  ratio {cert['ratio']:.6f}  floor {cert['floor']:.6f}  "
                  f"defect {cert['sum_identity_defect']:.2e}")
        elif args.command == "plan":
            doc = cmd_plan(cfg)
            for k, v in doc["plan"]["checks"].items():
                print(f"{k:18s} {'pass' if v else 'FAIL'}")
            if not doc["all_checks_pass"]:
                return EXIT_VERIFY
        elif args.command == "simulate":
            doc = cmd_simulate(cfg)
            print(f"growth bounded on every sample: {doc['growth_bounded']}")
            for k, v in doc["velocity_norms"].items():
                print(f"sup_t |v|_{k}: {v:.6g}")
        elif args.command == "verify":
            from .verify import run_verify
            return EXIT_OK if run_verify(cfg) else EXIT_VERIFY
        elif args.command == "track":
            doc = cmd_track_dump(cfg)
            print(f"wrote {len(doc['pieces'])} pieces to {Path(cfg.out) / 'geometry.json'}")
    except SlotRejected as exc:
        print(f"regloss: slot rejected: {exc}", file=sys.stderr)
        return EXIT_SLOT
    except ConfigError as exc:
        print(f"regloss: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReglossError as exc:
        print(f"regloss: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # argument checks inside the library
        print(f"regloss: invalid setting: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import csv
import filecmp
import json
import math
from pathlib import Path

import pytest

from regloss.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from regloss.config import ConfigError, ExperimentConfig, config_hash, load_config
from regloss.data import make_datum, parse_datum_spec
from regloss.report import fmt, write_csv, write_json


def _config(tmp_path, **kw):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(kw), encoding="utf-8")
    return str(p)


def _rows(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    assert lines[-1].startswith("# config ")
    return list(csv.DictReader(lines[:-1]))


# --- config --------------------------------------------------------------------

def test_defaults_and_overrides():
    cfg = load_config(None)
    assert cfg.d == 2 and cfg.alpha == 0.3
    assert cfg.with_overrides(seed=None).seed == 0
    assert cfg.with_overrides(seed=5).seed == 5


@pytest.mark.parametrize("bad", [
    {"N": 0}, {"d": 4}, {"alpha": -1}, {"datum": "nope"}, {"norms": [[1, float("inf")]]},
    {"quad": {"shear": 4}}, {"quad": {"spline": 64}}, {"verify": {"only": ["physics"]}},
    {"oracle": {"dt": 0}}, {"track": {"radius": 1}}, {"region": {"side": 2}},
    {"datum": {"name": "grid", "path": "/nonexistent.rglf"}},
])
def test_invalid_configs(tmp_path, bad):
    with pytest.raises(ConfigError):
        load_config(_config(tmp_path, **bad))


def test_unknown_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_config(tmp_path, colour="red"))
    bad = tmp_path / "broken.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(bad))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))


def test_hash_ignores_output_directory():
    a = ExperimentConfig(out="x")
    assert config_hash(a) == config_hash(a.with_overrides(out="y"))
    assert config_hash(a) != config_hash(a.with_overrides(seed=1))


def test_datum_specs():
    assert parse_datum_spec("random-trig(3, 5)")["name"] == "random-trig"
    f = make_datum("random-trig(3, 5)", 2)
    g = make_datum({"name": "random-trig", "seed": 3, "modes": 5}, 2)
    assert float(f.value([1.0, 2.0])) == float(g.value([1.0, 2.0]))
    assert float(make_datum("constant", 3).value([0.1, 0.2, 0.3])) == 1.0


# --- report --------------------------------------------------------------------

def test_csv_and_json_writers(tmp_path):
    write_csv(tmp_path / "a.csv", ("x", "ok"), [(0.1, True), (1e-300, False)], "h")
    text = (tmp_path / "a.csv").read_text()
    assert text.splitlines()[:3] == ["x,ok", "0.1,1", "1e-300,0"]
    assert fmt(2.0 / 3.0) == repr(2.0 / 3.0)
    write_json(tmp_path / "b.json", {"b": math.inf, "a": [1, 2]})
    doc = json.loads((tmp_path / "b.json").read_text())
    assert doc == {"a": [1, 2], "b": "inf"}
    assert list(tmp_path.glob(".*.tmp")) == []


# --- commands ------------------------------------------------------------------

def test_select_shear_plane_wave(tmp_path):
    out = tmp_path / "o"
    assert main(["select-shear", "--config", _config(tmp_path, datum="plane-wave-x2"), "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "shears.csv")
    win = [r for r in rows if r["selected"] == "1"]
    assert len(win) == 1 and win[0]["j"] == "1"
    assert max(float(r["ratio"]) for r in rows) >= 1 + math.pi ** 2
    assert (out / "shears.svg").read_text().startswith("<?xml")


def test_select_shear_random_trig_defect(tmp_path):
    out = tmp_path / "o"
    main(["select-shear", "--config", _config(tmp_path, datum="random-trig(4)"), "--out", str(out)])
    assert all(float(r["defect"]) <= 1e-6 for r in _rows(out / "shears.csv"))


def test_constant_datum_exit_code(tmp_path):
    assert main(["select-shear", "--config", _config(tmp_path, datum="constant"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_usage_errors(tmp_path, capsys):
    assert main(["plan", "--config", _config(tmp_path, N=0), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["plan", "--config", _config(tmp_path, probe_r=5.0), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE


@pytest.mark.parametrize("datum", ["linear-x1", "gaussian"])
def test_plan_command(tmp_path, datum):
    out = tmp_path / "o"
    assert main(["plan", "--config", _config(tmp_path, datum=datum, N=5), "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "plan.json").read_text())
    assert doc["all_checks_pass"] and len(doc["plan"]["slots"]) == 5
    if datum == "gaussian":
        for s in doc["plan"]["slots"]:
            assert abs(math.hypot(*s["center"]) - 1 / math.sqrt(2)) < 0.1


def test_track_dump(tmp_path):
    out = tmp_path / "o"
    assert main(["track", "dump-geometry", "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "geometry.json").read_text())
    assert len(doc["pieces"]) == 8
    assert all(abs(p["area"] - 1) < 1e-12 for p in doc["pieces"])
    assert doc["corner_boundary_deviation"]["outer"] < 0.03


def test_simulate_outputs(tmp_path):
    out = tmp_path / "o"
    cfg = _config(tmp_path, datum="gaussian", N=2, n_steps=1, quad={"block": 32, "norm": 64},
                  norms=[[1, 2]])
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == EXIT_OK
    growth = _rows(out / "growth.csv")
    assert all(math.log(float(r["measured_h1"])) >= float(r["lower_bound_log"]) - 1e-12 for r in growth)
    series = _rows(out / "series.csv")
    assert float(series[19]["log_sum_t0.1"]) > 18
    assert float(series[-1]["field_upper_r1_p2"]) <= 2.0
    norms = _rows(out / "norms.csv")
    assert math.isfinite(float(norms[-1]["contribution"]))
    for name in ("samples.csv", "simulation.json", "growth.svg", "series.svg"):
        assert (out / name).exists()


def test_simulate_rejects_supercritical(tmp_path):
    cfg = _config(tmp_path, norms=[[2, 2]], n_steps=1, quad={"block": 32})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_verify_detects_a_tampered_track(tmp_path):
    cfg = _config(tmp_path, track={"r_in": 0.2, "r_out": 1.1}, verify={"only": ["track-geometry"]})
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_VERIFY
    rows = _rows(tmp_path / "o" / "verify.csv")
    assert [r["passed"] for r in rows if r["check"] == "piece areas"] == ["0"]


def test_verify_detects_a_coarse_oracle(tmp_path):
    cfg = _config(tmp_path, oracle={"dt": 0.1, "points": 20}, n_steps=1, quad={"block": 32},
                  verify={"only": ["advect"]})
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_VERIFY
    rows = _rows(tmp_path / "o" / "verify.csv")
    assert [r["passed"] for r in rows if r["check"] == "RK4 oracle"] == ["0"]


def test_outputs_are_byte_reproducible(tmp_path):
    cfg = _config(tmp_path, datum="random-trig(1)", N=3)
    for run in ("a", "b"):
        for cmd in (["select-shear"], ["plan"], ["track", "dump-geometry"]):
            assert main(cmd + ["--config", cfg, "--out", str(tmp_path / run), "--seed", "7"]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 7
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []

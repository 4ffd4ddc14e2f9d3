import csv
import json
import subprocess
import sys

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from neumannlab.cli import bundled_config, load_config, main, parse_config
from neumannlab.errors import ConfigError


def _write(tmp_path, raw, name="exp.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


DISK = {"shape": "disk", "params": {"R": 1.0}}


def test_empty_jobs_exit_zero(tmp_path, capsys):
    cfg = _write(tmp_path, {"name": "empty", "model": DISK, "jobs": []})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "empty.csv").read_text().startswith("statement,model,f")
    assert "PASS 0" in capsys.readouterr().out


def test_unknown_shape_names_the_field(tmp_path, capsys):
    cfg = _write(tmp_path, {"model": {"shape": "torus"}, "jobs": []})
    assert main(["run", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "config.model.shape" in err and "torus" in err


@pytest.mark.parametrize(
    "raw, path",
    [
        ({"jobs": []}, "config.model"),
        ({"model": DISK, "jobs": [{"type": "statements", "functions": ["coordinate"], "points": [[0, 0]], "times": [-1]}]}, "config.jobs[0].times[0]"),
        ({"model": DISK, "jobs": [{"type": "statements", "functions": ["nope"], "points": [[0, 0]], "times": [1]}]}, "config.jobs[0].functions[0].id"),
        ({"model": DISK, "jobs": [{"type": "statements", "functions": ["coordinate"], "points": [[0]], "times": [1]}]}, "config.jobs[0].points[0]"),
        ({"model": DISK, "jobs": [{"type": "mystery"}]}, "config.jobs[0].type"),
        ({"model": DISK, "sim": {"dt": 0}}, "config.sim.dt"),
        ({"model": {**DISK, "drift": {"kind": "linear"}}}, "config.model.drift.a"),
    ],
)
def test_config_errors_name_their_field(raw, path):
    with pytest.raises(ConfigError, match=path.replace("[", r"\[").replace("]", r"\]")):
        parse_config(raw)


def test_estimate_ii_needs_four_times(tmp_path, capsys):
    raw = {"model": DISK, "jobs": [{"type": "estimate_ii", "x": [1, 0], "v": [0, 1], "times": [0.01]}]}
    assert main(["estimate-ii", "--config", str(_write(tmp_path, raw))]) == 2
    assert "config.jobs[0].times" in capsys.readouterr().err
    assert main(["estimate-ii", "--shape", "disk", "--x", "1,0", "--v", "0,1", "--times", "0.02,0.01"]) == 2


def test_invalid_json_reports_position(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{\n  \"model\": \n}")
    assert main(["run", "--config", str(p)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_simulate_dump_row_count(tmp_path):
    raw = {"name": "sim", "model": DISK, "sim": {"dt": 0.01}}
    cfg = _write(tmp_path, raw)
    assert main(["simulate", "--config", str(cfg), "--x0", "0.3,0.2", "--t", "0.1", "--paths", "10", "--dump", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "sim_paths.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["path_index", "t", "x1", "x2", "l"]
    assert len(rows) - 1 == 10 * (10 + 1)
    assert {r[0] for r in rows[1:]} == {str(i) for i in range(10)}


def test_simulate_rejects_wrong_dimension(tmp_path):
    cfg = _write(tmp_path, {"model": DISK})
    assert main(["simulate", "--config", str(cfg), "--x0", "0.3", "--t", "0.1"]) == 2


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("ok") >= 7


def test_bundled_config_runs(tmp_path):
    cfg = load_config(bundled_config())
    assert main(["run", "--config", str(bundled_config()), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / f"{cfg.name}.json").read_text())
    assert doc["summary"] == {"PASS": 6, "INCONCLUSIVE": 0, "FAIL": 0}


def test_reports_are_byte_identical(tmp_path):
    raw = {
        "name": "repeat",
        "model": {"shape": "annulus", "params": {"r_in": 0.5, "r_out": 1.5}},
        "sim": {"dt": 0.001, "n_paths": 300},
        "base_seed": 4,
        "jobs": [
            {"type": "statements", "statements": ["S2", "S3", "S5"], "functions": ["cosine"], "points": [[1.0, 0.2]], "times": [0.05, 0.1]},
            {"type": "isoperimetric", "function": {"id": "smoothed_indicator", "c": 1.0}, "points": [[1.0, 0.0]], "times": [0.1]},
        ],
    }
    cfg = _write(tmp_path, raw)
    outs = []
    for k in range(2):
        d = tmp_path / f"o{k}"
        main(["run", "--config", str(cfg), "--out", str(d)])
        outs.append(((d / "repeat.csv").read_bytes(), (d / "repeat.json").read_bytes()))
    assert outs[0] == outs[1]


def test_seed_override_changes_output(tmp_path):
    raw = {"name": "s", "model": DISK, "sim": {"dt": 0.01, "n_paths": 200},
           "jobs": [{"type": "statements", "statements": ["S3"], "functions": ["radial_poly"], "points": [[0.3, 0.1]], "times": [0.1], "route": "mc"}]}
    cfg = _write(tmp_path, raw)
    main(["check", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["check", "--config", str(cfg), "--seed", "99", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "s.csv").read_text() != (tmp_path / "b" / "s.csv").read_text()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "neumannlab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "selftest" in res.stdout


_shapes = st.sampled_from([
    ({"shape": "disk", "params": {"R": 1.0}}, [0.2, 0.1]),
    ({"shape": "annulus", "params": {"r_in": 0.5, "r_out": 1.5}}, [1.0, 0.0]),
    ({"shape": "interval", "params": {"a": 0.0, "b": 3.0}}, [1.0]),
    ({"shape": "halfline"}, [0.5]),
])


@given(
    _shapes,
    st.lists(st.sampled_from(["S2", "S3", "S4", "S5", "S7"]), min_size=1, max_size=3, unique=True),
    st.sampled_from(["cosine", "bump", "smoothed_indicator", "affine_positive"]),
    st.floats(0.02, 0.2),
)
@settings(max_examples=6, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_generated_configs_run_cleanly(tmp_path, shape_point, stmts, fid, t):
    model, x = shape_point
    # dt small enough that no step can jump across the annulus hole
    raw = {"name": "gen", "model": model, "sim": {"dt": 0.001, "n_paths": 200},
           "jobs": [{"type": "statements", "statements": stmts, "functions": [fid], "points": [x], "times": [round(t, 3)]}]}
    code = main(["run", "--config", str(_write(tmp_path, raw)), "--out", str(tmp_path / "g")])
    assert code in (0, 1)
    with open(tmp_path / "g" / "gen.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(stmts)
    assert all(r["verdict"] in ("PASS", "INCONCLUSIVE", "FAIL") for r in rows)

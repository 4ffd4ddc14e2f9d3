"""Config-driven entry point.

    neumannlab run --config exp.json [--seed N] [--paths N] [--dt X] [--out DIR] [--dump]
    neumannlab check | estimate-ii | isoperimetric --config exp.json ...
    neumannlab simulate --config exp.json --x0 0.3,0.2 --t 0.1 --paths 10 --dump
    neumannlab selftest

Reports go to DIR/<name>.csv with a JSON sidecar DIR/<name>.json.  Nothing
time- or host-dependent is written, so a fixed config and seed give
byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import checks
from .errors import ConfigError, NeumannLabError, NoisyLimit
from .functions import REGISTERED, TestFunction
from .geometry import SHAPES, DriftSpec, ManifoldModel, ScalarField, make_shape
from .pde import solve_fields, terminal_datum
from .sde import SimParams, iter_chunks

log = logging.getLogger("neumannlab")

REPORT_COLUMNS = ["statement", "model", "f", "x", "t", "lhs", "rhs", "se", "margin", "verdict"]
JOB_TYPES = ("statements", "variable", "estimate_ii", "isoperimetric")
SUBCOMMAND_JOBS = {
    "run": JOB_TYPES,
    "check": ("statements", "variable"),
    "estimate-ii": ("estimate_ii",),
    "isoperimetric": ("isoperimetric",),
}


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str
    model: ManifoldModel
    sim: SimParams
    jobs: list
    resolution: object = None
    out_dir: Path = Path("reports")
    raw: dict = field(default_factory=dict)


def _need(obj, key, where, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise ConfigError(f"{where}.{key}: missing")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def _number(val, where, positive=False):
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigError(f"{where}: expected a finite number, got {val!r}")
    if positive and val <= 0:
        raise ConfigError(f"{where}: must be > 0")
    return float(val)


def _numbers(val, where, positive=False):
    if not isinstance(val, list):
        raise ConfigError(f"{where}: expected a list")
    return [_number(v, f"{where}[{i}]", positive) for i, v in enumerate(val)]


def _model(spec, where="model"):
    shape_name = _need(spec, "shape", where, str)
    if shape_name not in SHAPES:
        raise ConfigError(f"{where}.shape: unknown shape {shape_name!r} (known: {', '.join(SHAPES)})")
    params = spec.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError(f"{where}.params: expected an object")
    try:
        shape = make_shape(shape_name, **{k: _number(v, f"{where}.params.{k}") for k, v in params.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.params: {exc}") from None
    drift = spec.get("drift", {"kind": "zero"})
    dw = f"{where}.drift"
    kind = _need(drift, "kind", dw, str)
    try:
        if kind == "zero":
            d = DriftSpec.zero()
        elif kind == "linear":
            d = DriftSpec.linear(_number(_need(drift, "a", dw), f"{dw}.a"))
        elif kind == "potential":
            extra = {k: _number(v, f"{dw}.{k}") for k, v in drift.items() if k not in ("kind", "potential")}
            d = DriftSpec.gradient(_need(drift, "potential", dw, str), **extra)
        else:
            raise ConfigError(f"{dw}.kind: unknown drift kind {kind!r}")
    except ValueError as exc:
        raise ConfigError(f"{dw}: {exc}") from None
    return ManifoldModel(shape, d)


def _function(spec, dim, where):
    if isinstance(spec, str):
        spec = {"id": spec}
    fid = _need(spec, "id", where, str)
    if fid not in REGISTERED:
        raise ConfigError(f"{where}.id: unknown test function {fid!r}")
    params = {k: v for k, v in spec.items() if k != "id"}
    try:
        return TestFunction(fid, dim, params)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _points(val, dim, where):
    if not isinstance(val, list) or not val:
        raise ConfigError(f"{where}: expected a non-empty list of points")
    out = []
    for i, p in enumerate(val):
        p = [p] if not isinstance(p, list) else p
        pt = _numbers(p, f"{where}[{i}]")
        if len(pt) != dim:
            raise ConfigError(f"{where}[{i}]: expected {dim} coordinates")
        out.append(tuple(pt))
    return out


def _field(spec, where):
    if isinstance(spec, str):
        spec = {"name": spec}
    name = _need(spec, "name", where, str)
    try:
        return ScalarField(name, {k: v for k, v in spec.items() if k != "name"})
    except ValueError as exc:
        raise ConfigError(f"{where}.name: {exc}") from None


def _job(spec, model, where):
    kind = _need(spec, "type", where, str)
    dim = model.dimension
    job = {"type": kind}
    if kind == "statements":
        stmts = spec.get("statements", list(checks.STATEMENTS))
        for i, s in enumerate(stmts):
            if s not in checks.STATEMENTS:
                raise ConfigError(f"{where}.statements[{i}]: unknown statement {s!r}")
        job["statements"] = stmts
        fs = _need(spec, "functions", where, list)
        job["functions"] = [_function(f, dim, f"{where}.functions[{i}]") for i, f in enumerate(fs)]
        job["points"] = _points(_need(spec, "points", where), dim, f"{where}.points")
        job["times"] = _numbers(_need(spec, "times", where), f"{where}.times", positive=True)
        for key in ("K", "sigma"):
            job[key] = None if spec.get(key) is None else _number(spec[key], f"{where}.{key}")
        job["route"] = spec.get("route", "auto")
        if job["route"] not in ("auto", "pde", "mc"):
            raise ConfigError(f"{where}.route: expected auto, pde or mc")
    elif kind == "variable":
        stmt = spec.get("statement", "G2")
        if stmt not in ("G2", "G3"):
            raise ConfigError(f"{where}.statement: expected G2 or G3")
        job["statement"] = stmt
        job["function"] = _function(_need(spec, "function", where), dim, f"{where}.function")
        job["points"] = _points(_need(spec, "points", where), dim, f"{where}.points")
        job["times"] = _numbers(_need(spec, "times", where), f"{where}.times", positive=True)
        job["K1"] = _field(spec.get("K1", "drift_curvature"), f"{where}.K1")
        job["K2"] = _field(spec.get("K2", "boundary_curvature"), f"{where}.K2")
    elif kind == "estimate_ii":
        job["x"] = _points([_need(spec, "x", where)], dim, f"{where}.x")[0]
        job["v"] = tuple(_numbers(_need(spec, "v", where), f"{where}.v"))
        job["p"] = _number(spec.get("p", 2.0), f"{where}.p")
        times = _numbers(spec.get("times", [0.04, 0.02, 0.01, 0.005]), f"{where}.times", positive=True)
        if len(times) < 4:
            raise ConfigError(f"{where}.times: estimate_ii needs at least 4 time points, got {len(times)}")
        job["times"] = times
    elif kind == "isoperimetric":
        job["function"] = _function(_need(spec, "function", where), dim, f"{where}.function")
        job["points"] = _points(_need(spec, "points", where), dim, f"{where}.points")
        job["times"] = _numbers(_need(spec, "times", where), f"{where}.times", positive=True)
        job["limit"] = bool(spec.get("limit", False))
        s_grid = spec.get("s_grid")
        job["s_grid"] = None if s_grid is None else _numbers(s_grid, f"{where}.s_grid")
    else:
        raise ConfigError(f"{where}.type: unknown job type {kind!r} (known: {', '.join(JOB_TYPES)})")
    return job


def parse_config(raw, name="experiment"):
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    model = _model(_need(raw, "model", "config"), "config.model")
    sim = raw.get("sim", {})
    if not isinstance(sim, dict):
        raise ConfigError("config.sim: expected an object")
    try:
        params = SimParams(
            dt=_number(sim.get("dt", 1e-3), "config.sim.dt", positive=True),
            n_paths=int(_number(sim.get("n_paths", 10_000), "config.sim.n_paths", positive=True)),
            base_seed=int(_number(raw.get("base_seed", 0), "config.base_seed")),
        )
    except ValueError as exc:
        raise ConfigError(f"config.sim: {exc}") from None
    jobs = raw.get("jobs", [])
    if not isinstance(jobs, list):
        raise ConfigError("config.jobs: expected a list")
    parsed = [_job(j, model, f"config.jobs[{i}]") for i, j in enumerate(jobs)]
    res = raw.get("resolution")
    if isinstance(res, list):
        res = tuple(int(v) for v in res)
    out = raw.get("output", {}).get("dir", "reports") if isinstance(raw.get("output", {}), dict) else "reports"
    return ExperimentConfig(raw.get("name", name), model, params, parsed, res, Path(out), raw)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(raw, path.stem)


def bundled_config(name="theorem11_disk.json"):
    return resources.files("neumannlab").joinpath("configs", name)


# ---------------------------------------------------------------------------
# Jobs
# ---------------------------------------------------------------------------


def _run_job(cfg, job, workers=None):
    """(report rows, metadata records) for one job."""
    model, params = cfg.model, cfg.sim
    rows, meta = [], []
    kind = job["type"]
    if kind == "statements":
        for x in job["points"]:
            reps = checks.check_statements(
                model, job["functions"], x, job["times"], params, job["statements"],
                job["K"], job["sigma"], cfg.resolution, job["route"], workers,
            )
            rows += reps
    elif kind == "variable":
        for x in job["points"]:
            for t in job["times"]:
                rows.append(
                    checks.check_variable_bounds(
                        model, job["function"], x, t, job["K1"], job["K2"], params,
                        job["statement"], cfg.resolution, "auto", workers,
                    )
                )
    elif kind == "estimate_ii":
        try:
            est = checks.estimate_ii(model, job["x"], job["v"], job["p"], job["times"], params, workers=workers)
            meta.append({"estimate_ii": _clean(est.describe())})
        except NoisyLimit as exc:
            rec = {"error": str(exc)}
            if exc.estimate is not None:
                rec.update(_clean(exc.estimate.describe()))
            meta.append({"estimate_ii": rec})
    elif kind == "isoperimetric":
        f = job["function"]
        for x in job["points"]:
            for t in job["times"]:
                rows.append(checks.check_levy_gromov(model, f, x, t, params, workers=workers))
            if job["s_grid"]:
                t = max(job["times"])
                sm = checks.submartingale_diagnostic(model, f, x, t, job["s_grid"], params, resolution=cfg.resolution, workers=workers)
                meta.append({"submartingale": {"x": list(x), "t": t, **_clean(sm.describe())}})
        if job["limit"]:
            rows.append(checks.levy_gromov_limit(model, f))
    return rows, meta


def _clean(obj):
    """JSON-safe copy with numpy scalars converted and floats rounded to 12 digits."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if not math.isfinite(v) else float(f"{v:.12g}")
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj


def write_reports(cfg, reports, meta, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    csv_path = out_dir / f"{cfg.name}.csv"
    csv_path.write_text(buf.getvalue())
    summary = {v: sum(r.verdict == v for r in reports) for v in ("PASS", "INCONCLUSIVE", "FAIL")}
    doc = {
        "name": cfg.name,
        "model": cfg.model.describe(),
        "sim": {"dt": cfg.sim.dt, "n_paths": cfg.sim.n_paths, "base_seed": cfg.sim.base_seed, "scheme": cfg.sim.scheme},
        "summary": summary,
        "rows": [{**r.row(), "details": r.details} for r in reports],
        "extra": meta,
    }
    json_path = out_dir / f"{cfg.name}.json"
    json_path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path, summary


def run_config(cfg, subcommand="run", out_dir=None, workers=None):
    """Execute the jobs allowed for ``subcommand``; returns (reports, summary, paths)."""
    allowed = SUBCOMMAND_JOBS[subcommand]
    reports, meta = [], []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for job in cfg.jobs:
            if job["type"] not in allowed:
                continue
            rows, m = _run_job(cfg, job, workers)
            reports += rows
            meta += m
    for wmsg in caught:
        log.warning("%s", wmsg.message)
    csv_path, json_path, summary = write_reports(cfg, reports, meta, out_dir or cfg.out_dir)
    return reports, summary, (csv_path, json_path)


# ---------------------------------------------------------------------------
# simulate / selftest
# ---------------------------------------------------------------------------


def dump_paths(model, x0, t, params, path):
    """CSV rows (path_index, t, x..., l), one per path and grid time."""
    dim = model.dimension
    names = ["path_index", "t"] + [f"x{i + 1}" for i in range(dim)] + ["l"]
    n_rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for lo, times, pos, loc in iter_chunks(model, np.asarray(x0, dtype=float), t, params, workers=1):
            for j in range(pos.shape[0]):
                for k in range(times.size):
                    w.writerow([lo + j, f"{times[k]:.10g}", *(f"{v:.12g}" for v in pos[j, k]), f"{loc[j, k]:.12g}"])
                    n_rows += 1
    return n_rows


def dump_field(model, f, t, resolution, path):
    """CSV of the grid solution of the Neumann problem for f at time t."""
    fld = solve_fields(model, [terminal_datum(f, "f")], [t], resolution)[0][0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        rows = fld.rows()
        w.writerow(rows[0])
        for r in rows[1:]:
            w.writerow([f"{v:.12g}" for v in r])


def selftest():
    """Fast oracle checks; returns a list of (name, ok, detail)."""
    from .functions import make_function
    from .geometry import HalfLine, Interval, Disk
    from .semigroup import estimate_pt, estimate_weighted, WeightedFunctional

    out = []
    params = SimParams(dt=1e-4, n_paths=4000, base_seed=7)

    # local time at the boundary point: E l_t = 2 sqrt(t / pi)
    hl = ManifoldModel(HalfLine())
    lt = estimate_weighted(hl, WeightedFunctional(lambda X, l: l), None, (0.0,), 0.1, params)
    target = 2 * math.sqrt(0.1 / math.pi)
    ok = abs(lt.mean - target) <= max(3 * lt.std_error, 0.03 * target)
    out.append(("local time mean", ok, f"{lt.mean:.4f} vs {target:.4f}"))
    one = estimate_weighted(hl, WeightedFunctional("one"), None, (0.0,), 0.1, params)
    out.append(("unit mass", one.mean == 1.0 and one.std_error == 0.0, f"P_t 1 = {one.mean!r}"))

    # Neumann eigenfunction on (0, pi)
    iv = ManifoldModel(Interval(0.0, math.pi))
    cosf = make_function("cosine", 1)
    x = (math.pi / 2 - 0.5,)
    exact = math.exp(-0.5) * math.cos(x[0])
    e = estimate_pt(iv, cosf, x, 0.5, params.replace(dt=1e-3))
    ok = abs(e.mean - exact) <= 3 * e.std_error + 1e-3
    out.append(("MC cosine mode", ok, f"{e.mean:.5f} +- {e.std_error:.1e} vs {exact:.5f}"))
    fld = solve_fields(iv, [cosf], [0.5])[0][0]
    from .pde import grid_value

    v = grid_value(fld, x)
    out.append(("PDE cosine mode", abs(v - exact) <= 1e-4, f"{v:.7f} vs {exact:.7f}"))

    # constants and profile
    c = checks.kconst(1e-12, 0.3)
    lim = (0.6, 1 / 0.3, 1 / (2 * 0.09))
    ok = all(abs(a - b) <= 1e-6 * abs(b) for a, b in zip(c, lim))
    out.append(("K -> 0 limits", ok, str(c)))
    ok = checks.gaussian_profile(0.0) == 0.0 and checks.gaussian_profile(1.0) == 0.0
    ok &= abs(checks.gaussian_profile(0.5) - 1 / math.sqrt(2 * math.pi)) <= 1e-10
    out.append(("Gaussian profile endpoints", ok, ""))

    # Gamma_2 symbolic vs nested differences
    d = ManifoldModel(Disk(1.0), DriftSpec.linear(1.0))
    f = make_function("radial_poly", 2)
    a, rhs = checks.bochner_gamma2(d, f, (0.3, 0.2))
    b, _ = checks.bochner_gamma2(d, f, (0.3, 0.2), method="fd")
    out.append(("Gamma_2 oracle agreement", abs(a - b) <= 1e-6 and a >= rhs - 1e-5, f"{a:.8f} / {b:.8f} >= {rhs:.8f}"))
    return out


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------


def _csv_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="neumannlab", description="Numerical checks for Neumann semigroup inequalities.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="experiment JSON")
        sp.add_argument("--seed", type=int, help="override base_seed")
        sp.add_argument("--paths", type=int, help="override n_paths")
        sp.add_argument("--dt", type=float, help="override dt")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--dump", action="store_true", help="also write field dumps (run/check) or path dumps (simulate)")

    for name in ("run", "check", "isoperimetric"):
        common(sub.add_parser(name))
    sp = sub.add_parser("estimate-ii")
    common(sp, needs_config=False)
    sp.add_argument("--shape", help="disk or annulus (when no config is given)")
    sp.add_argument("--params", type=_csv_floats, help="shape parameters, e.g. 1 or 0.5,1.5")
    sp.add_argument("--x", type=_csv_floats, help="boundary point")
    sp.add_argument("--v", type=_csv_floats, help="tangent vector")
    sp.add_argument("--times", type=_csv_floats, help="decreasing times, at least 4")
    sp.add_argument("--p", type=float, default=2.0)
    sp = sub.add_parser("simulate")
    common(sp)
    sp.add_argument("--x0", type=_csv_floats, required=True)
    sp.add_argument("--t", type=float, required=True)
    sub.add_parser("selftest")
    return p


def _apply_overrides(cfg, args):
    kw = {}
    if args.seed is not None:
        kw["base_seed"] = args.seed
    if args.paths is not None:
        if args.paths < 1:
            raise ConfigError("--paths: must be >= 1")
        kw["n_paths"] = args.paths
    if args.dt is not None:
        if not args.dt > 0:
            raise ConfigError("--dt: must be > 0")
        kw["dt"] = args.dt
    if kw:
        cfg.sim = cfg.sim.replace(**kw)
    if args.out:
        cfg.out_dir = Path(args.out)
    return cfg


def _ii_config_from_flags(args):
    if not (args.shape and args.x and args.v):
        raise ConfigError("estimate-ii: give --config, or --shape, --x and --v")
    shape = args.shape
    names = {"disk": ["R"], "annulus": ["r_in", "r_out"]}.get(shape)
    if names is None:
        raise ConfigError(f"--shape: estimate-ii supports disk or annulus, got {shape!r}")
    vals = args.params or ([1.0] if shape == "disk" else [0.5, 1.5])
    if len(vals) != len(names):
        raise ConfigError(f"--params: {shape} takes {len(names)} values")
    raw = {
        "name": "estimate_ii",
        "model": {"shape": shape, "params": dict(zip(names, vals))},
        "jobs": [{"type": "estimate_ii", "x": args.x, "v": args.v, "p": args.p,
                  **({"times": args.times} if args.times is not None else {})}],
    }
    return parse_config(raw)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            results = selftest()
            for name, ok, detail in results:
                print(f"{'ok  ' if ok else 'FAIL'} {name} {detail}".rstrip())
            return 0 if all(ok for _, ok, _ in results) else 1
        if args.command == "estimate-ii" and not args.config:
            cfg = _ii_config_from_flags(args)
        else:
            cfg = load_config(args.config)
            if args.command == "estimate-ii" and args.times is not None and len(args.times) < 4:
                raise ConfigError(f"--times: estimate_ii needs at least 4 time points, got {len(args.times)}")
        cfg = _apply_overrides(cfg, args)
        if args.command == "simulate":
            x0 = args.x0
            if len(x0) != cfg.model.dimension:
                raise ConfigError(f"--x0: expected {cfg.model.dimension} coordinates")
            if not args.t > 0:
                raise ConfigError("--t: must be > 0")
            cfg.out_dir.mkdir(parents=True, exist_ok=True)
            path = cfg.out_dir / f"{cfg.name}_paths.csv"
            if args.dump:
                n = dump_paths(cfg.model, x0, args.t, cfg.sim, path)
                print(f"wrote {n} rows to {path}")
            else:
                from .semigroup import estimate_pt
                from .functions import make_function

                e = estimate_pt(cfg.model, make_function("coordinate", cfg.model.dimension), x0, args.t, cfg.sim)
                print(f"E X_t[0] = {e.mean:.6g} +- {e.std_error:.2g} ({e.n_paths} paths, dt={e.dt:g})")
            return 0
        reports, summary, paths = run_config(cfg, args.command)
        if args.dump:
            for job in cfg.jobs:
                if job["type"] == "statements":
                    for f in job["functions"]:
                        for t in job["times"]:
                            dump_field(cfg.model, f, t, cfg.resolution, cfg.out_dir / f"{cfg.name}_{f.name}_t{t:g}_field.csv")
        for r in reports:
            print(f"{r.statement:5s} {r.f:32s} x={r.row()['x']:14s} t={r.t:<6g} {r.verdict}")
        print(f"PASS {summary['PASS']}  INCONCLUSIVE {summary['INCONCLUSIVE']}  FAIL {summary['FAIL']}  -> {paths[0]}")
        if summary["INCONCLUSIVE"]:
            log.warning("%d inconclusive rows", summary["INCONCLUSIVE"])
        return 1 if summary["FAIL"] else 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NeumannLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

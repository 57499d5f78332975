"""Command-line front end.

    gharnack run <command> [config.json] [--config PATH] [--out DIR]
                 [--seed N] [--paths N] [--quiet]

Writes ``report.json`` (and ``paths.csv`` / ``grid.csv`` where relevant)
into the output directory. Exit status: 0 when every pass flag is true,
1 on a failed check or numerical error, 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import math
import subprocess
import sys
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import verify
from ._stats import mean_se
from .coupling import sigma_T
from .drift import DriftFn
from .exceptions import ConfigError, GHarnackError
from .gcore import GParams, TimeGrid, make_dictionary
from .gsde import HamiltonianSystem, semigroup_sup, simulate
from .hjb import hjb_value_at, solve_hjb

COMMANDS = ("simulate", "semigroup", "hjb", "coupling-check", "girsanov-check", "harnack",
            "gradient", "invariant", "weak-solution", "phi-integrability")

_num = {"type": "number"}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_expr = {"type": ["string", "number"]}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "params": {
            "type": "object",
            "properties": {"sigma_lower": {"type": "number", "exclusiveMinimum": 0},
                           "sigma_upper": {"type": "number", "exclusiveMinimum": 0}},
            "required": ["sigma_lower", "sigma_upper"],
            "additionalProperties": False,
        },
        "system": {
            "type": "object",
            "properties": {
                "preset": {"enum": ["damped_oscillator"]},
                "A": _num, "M": _num, "Q": _num, "K": {"type": "number"},
                "b1": _expr, "b2": _expr, "b1_bar": _expr, "b2_bar": _expr,
                "box": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4},
            },
            "additionalProperties": False,
        },
        "grid": {
            "type": "object",
            "properties": {"T": {"type": "number", "exclusiveMinimum": 0},
                           "n_steps": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "estimator": {
            "type": "object",
            "properties": {
                "dictionary": {"type": "array", "minItems": 1},
                "hjb": {
                    "type": "object",
                    "properties": {"half_width": {"type": "number", "exclusiveMinimum": 0},
                                   "nx": {"type": "integer", "minimum": 4},
                                   "ny": {"type": "integer", "minimum": 4},
                                   "cfl": {"type": "number", "exclusiveMinimum": 0,
                                           "maximum": 1}},
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "run": {
            "type": "object",
            "properties": {"seed": {"type": "integer", "minimum": 0},
                           "n_paths": {"type": "integer", "minimum": 2},
                           "dump_paths": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "z": _pair,
        "f": _expr,
        "h": _pair,
        "p": {"type": "number", "exclusiveMinimum": 1},
        "harnack": {
            "type": "object",
            "properties": {
                "zs": {"type": "array", "items": _pair, "minItems": 1},
                "h_norms": {"type": "array", "items": _num, "minItems": 1},
                "h_direction": _pair,
                "ps": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 1},
                       "minItems": 1},
                "Ts": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                       "minItems": 1},
                "estimators": {"type": "array",
                               "items": {"enum": ["mc_dictionary", "hjb"]}, "minItems": 1},
            },
            "additionalProperties": False,
        },
        "gradient": {
            "type": "object",
            "properties": {"Ts": {"type": "array", "items": {"type": "number",
                                                             "exclusiveMinimum": 0},
                                  "minItems": 1},
                           "h_norms": {"type": "array", "items": _num, "minItems": 1},
                           "f_sup": {"type": "number", "exclusiveMinimum": 0},
                           "diagnostics": {"type": "boolean"}},
            "additionalProperties": False,
        },
        "girsanov": {
            "type": "object",
            "properties": {"g1": _expr, "g2": _expr},
            "additionalProperties": False,
        },
        "invariant": {
            "type": "object",
            "properties": {"t_long": {"type": "number", "exclusiveMinimum": 0},
                           "dt": {"type": "number", "exclusiveMinimum": 0}},
            "additionalProperties": False,
        },
        "weak_solution": {
            "type": "object",
            "properties": {"eps": {"type": "number", "exclusiveMinimum": 0},
                           "margin": {"type": "number", "exclusiveMinimum": 0,
                                      "exclusiveMaximum": 1}},
            "required": ["eps"],
            "additionalProperties": False,
        },
        "phi": {
            "type": "object",
            "properties": {"c_phi": {"type": "number", "exclusiveMinimum": 0},
                           "s_min": {"type": "number", "exclusiveMinimum": 0},
                           "t_max": {"type": "number", "exclusiveMinimum": 0},
                           "quad_points": {"type": "integer", "minimum": 2},
                           "n_mc": {"type": "integer", "minimum": 2}},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


# --------------------------------------------------------------------------
# configuration


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    params = build_params(cfg)
    system = build_system(cfg)
    lip = system.check_lipschitz()
    if not lip["ok"]:
        raise ConfigError(
            f"system: drift Lipschitz estimate {max(lip['sampled_ratio'], lip['grid_estimate']):.3g} "
            f"exceeds the declared K = {system.K:g}; raise K or change the drifts")
    try:
        make_dictionary(_dictionary(cfg), params, TimeGrid(1.0, 8))
    except (ValueError, GHarnackError) as exc:
        raise ConfigError(f"estimator/dictionary: {exc}") from exc


def build_params(cfg):
    p = cfg.get("params", {"sigma_lower": 1.0, "sigma_upper": 2.0})
    try:
        return GParams(p["sigma_lower"], p["sigma_upper"])
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc


def build_system(cfg):
    s = dict(cfg.get("system", {"preset": "damped_oscillator"}))
    try:
        if s.pop("preset", None) == "damped_oscillator":
            return HamiltonianSystem.damped_oscillator(
                b1_bar=s.get("b1_bar"), b2_bar=s.get("b2_bar"), K=s.get("K", 2.0),
                box=tuple(s.get("box", (-5.0, 5.0, -5.0, 5.0))))
        missing = [k for k in ("A", "M", "Q") if k not in s]
        if missing:
            raise ConfigError(f"system: missing {', '.join(missing)} (or use preset)")
        if "box" in s:
            s["box"] = tuple(s["box"])
        return HamiltonianSystem(**s)
    except GHarnackError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"system: {exc}") from exc


def _function(cfg, key="f", default="1 / (1 + x^2 + y^2)"):
    try:
        return DriftFn(str(cfg.get(key, default)))
    except GHarnackError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _grid(cfg, system):
    g = cfg.get("grid", {})
    T = g.get("T", 1.0)
    if "n_steps" in g:
        return TimeGrid(T, g["n_steps"])
    return verify.default_grid(system, T)


def _dictionary(cfg):
    return tuple(cfg.get("estimator", {}).get("dictionary", verify.DEFAULT_DICTIONARY))


def _hjb_options(cfg):
    return dict(cfg.get("estimator", {}).get("hjb", {}))


# --------------------------------------------------------------------------
# report values


def est(value, se):
    return {"value": value, "se": se}


def exact(value):
    return {"value": value, "se": "exact"}


def tag(obj):
    """Attach an ``"exact"`` tag to every bare number.

    Keys ``k`` with a sibling ``k_se`` are merged into ``{value, se}``.
    """
    if isinstance(obj, dict):
        if set(obj) >= {"value", "se"} and not isinstance(obj["value"], (dict, list)):
            return {k: (_clean(v) if k in ("value", "se") else tag(v)) for k, v in obj.items()}
        out = {}
        for k, v in obj.items():
            if k.endswith("_se") and k[:-3] in obj:
                continue
            if f"{k}_se" in obj:
                out[k] = est(_clean(v), _clean(obj[f"{k}_se"]))
            else:
                out[k] = tag(v)
        return out
    if isinstance(obj, (list, tuple)):
        return [tag(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return bool(obj) if isinstance(obj, np.bool_) else obj
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return exact(_clean(obj))
    return obj


def _clean(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return int(v)
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _mc_pairs(d, keys):
    """Replace ``(mean, se)`` tuples under ``keys`` by tagged estimates."""
    for k in keys:
        if k in d:
            d[k] = est(*d[k])
    return d


def version_string():
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# --------------------------------------------------------------------------
# commands; each returns (results, fitted_constants, pass, extras)


def cmd_simulate(cfg, seed, n_paths, out):
    params, system = build_params(cfg), build_system(cfg)
    grid = _grid(cfg, system)
    z = tuple(cfg.get("z", (0.0, 0.0)))
    dump = cfg.get("run", {}).get("dump_paths", 10)
    rows, table = [], []
    for policy in make_dictionary(_dictionary(cfg), params, grid):
        state, driving = simulate(system, policy, z, grid, n_paths, seed)
        xT, yT = state.final
        table.append({"control": policy.label,
                      "mean_x": est(*mean_se(xT)), "mean_y": est(*mean_se(yT)),
                      "cross_variation_error": exact(float(np.max(np.abs(
                          driving.cross_variation() - grid.horizon))))})
        for i in range(min(dump, n_paths)):
            for k, t in enumerate(grid.times):
                rows.append((policy.label, i, k, repr(float(t)), repr(float(state.x[i, k])),
                             repr(float(state.y[i, k]))))
    if rows:
        _write_csv(out / "paths.csv", ("control", "path", "step", "t", "x", "y"), rows)
    return {"z": tag(list(z)), "per_control": table}, {}, True


def cmd_semigroup(cfg, seed, n_paths, out):
    params, system = build_params(cfg), build_system(cfg)
    grid = _grid(cfg, system)
    z = tuple(cfg.get("z", (0.0, 0.0)))
    f = _function(cfg)
    dic = make_dictionary(_dictionary(cfg), params, grid)
    res = semigroup_sup(system, dic, f, z, grid, n_paths, seed)
    table = [{"control": c.label, "mean": est(c.mean, c.se)} for c in res.per_control]
    return {"z": tag(list(z)), "f": f.expr, "value": est(res.value, res.se),
            "argmax": res.per_control[res.argmax].label, "per_control": table}, {}, True


def cmd_hjb(cfg, seed, n_paths, out):
    params, system = build_params(cfg), build_system(cfg)
    T = cfg.get("grid", {}).get("T", 1.0)
    f = _function(cfg)
    opts = {"half_width": 6.0, "nx": 161, "ny": 161}
    opts.update(_hjb_options(cfg))
    sol = solve_hjb(system, params, f, T, **opts)
    z = tuple(cfg.get("z", (0.0, 0.0)))
    rows = [(repr(float(x)), repr(float(y)), repr(float(sol.u[0][i, j])),
             repr(float(sol.policy[0][i, j])))
            for i, x in enumerate(sol.xs) for j, y in enumerate(sol.ys)]
    _write_csv(out / "grid.csv", ("x", "y", "u0", "theta0"), rows)
    return {"z": tag(list(z)), "f": f.expr, "value": exact(hjb_value_at(sol, z)),
            "n_steps": exact(sol.n_steps), "cfl_number": exact(sol.cfl_number),
            "half_width": exact(sol.half_width), "nx": exact(len(sol.xs)),
            "ny": exact(len(sol.ys))}, {}, True


def cmd_coupling_check(cfg, seed, n_paths, out):
    params, system = build_params(cfg), build_system(cfg)
    T = cfg.get("grid", {}).get("T", 1.0)
    r = verify.coupling_check(system, params, T, tuple(cfg.get("h", (0.3, 0.0))),
                              tuple(cfg.get("z", (0.0, 0.0))), _dictionary(cfg),
                              min(n_paths, 1024), seed)
    ok = r["theta1_start_exact"] and r["theta1_end_ok"] and r["identity_ok"] and r["gap_order_ok"]
    return tag(r), {}, ok


def cmd_girsanov_check(cfg, seed, n_paths, out):
    params, system = build_params(cfg), build_system(cfg)
    g = cfg.get("girsanov", {})
    T = cfg.get("grid", {}).get("T", 1.0)
    r = verify.girsanov_check(system, params, tuple(cfg.get("z", (0.0, 0.0))), T,
                              g.get("g1", "sin(x)"), g.get("g2", "0.5 * cos(y)"),
                              tuple(cfg.get("h", (0.3, 0.0))), n_paths=n_paths, seed=seed)
    return tag(r), {}, r["unit_mean_ok"] and r["deterministic_ok"]


def cmd_harnack(cfg, seed, n_paths, out):
    params, system = build_params(cfg), build_system(cfg)
    hc = cfg.get("harnack", {})
    f = _function(cfg)
    grid_report = verify.harnack_grid(
        system, params, f,
        zs=[tuple(z) for z in hc.get("zs", [(0.0, 0.0), (1.0, -1.0)])],
        h_norms=tuple(hc.get("h_norms", (0.1, 0.3))),
        ps=tuple(hc.get("ps", (1.5, 2.0, 4.0))), Ts=tuple(hc.get("Ts", (0.5, 1.0, 2.0))),
        estimators=tuple(hc.get("estimators", ("mc_dictionary", "hjb"))),
        h_direction=tuple(hc.get("h_direction", (-1.0, 1.0))), dictionary=_dictionary(cfg),
        n_paths=n_paths, seed=seed, hjb_options=_hjb_options(cfg))
    rows = []
    for r in grid_report.reports:
        d = r.as_dict()
        if r.estimator == "hjb":
            # grid values carry no sampling error
            d.pop("lhs_se"), d.pop("semigroup_fp_se")
        d["rhs_sigma_fitted"] = r.rhs_sigma(grid_report.fitted_constant)
        rows.append(tag(d))
    results = {"reports": rows, "all_exact_pass": grid_report.all_exact_pass,
               "sigma_form_pass": grid_report.sigma_form_pass,
               "p_monotone": grid_report.p_monotone,
               "p_monotone_detail": tag(grid_report.p_monotone_detail),
               "sigma": {str(T): exact(sigma_T(T, params))
                         for T in hc.get("Ts", (0.5, 1.0, 2.0))}}
    ok = grid_report.all_exact_pass and grid_report.sigma_form_pass and grid_report.p_monotone
    return results, {"C_sigma_form": exact(grid_report.fitted_constant)}, ok


def cmd_gradient(cfg, seed, n_paths, out):
    params, system = build_params(cfg), build_system(cfg)
    gc = cfg.get("gradient", {})
    f = _function(cfg, default="tanh(y)")
    r = verify.gradient_shape(system, params, f, tuple(cfg.get("z", (0.0, 0.0))),
                              Ts=tuple(gc.get("Ts", (0.5, 1.0, 2.0))), p=cfg.get("p", 2.0),
                              dictionary=_dictionary(cfg), n_paths=n_paths, seed=seed,
                              h_norms=tuple(gc.get("h_norms", (1e-1, 1e-2, 1e-3))),
                              f_sup=gc.get("f_sup"), diagnostics=gc.get("diagnostics", True))
    reports = [tag(rep.as_dict()) for rep in r.pop("reports")]
    fitted = {f"C_T{T:g}": exact(C) for T, C in zip(r["T"], r["fitted_C"])}
    results = tag(r)
    results["reports"] = reports
    return results, fitted, r["stable"] and r["log_slope_ok"]


def cmd_invariant(cfg, seed, n_paths, out):
    params = build_params(cfg)
    ic = cfg.get("invariant", {})
    r = verify.invariant_check(params, t_long=ic.get("t_long", 200.0), n_paths=n_paths,
                               seed=seed, dt=ic.get("dt", 0.005))
    _mc_pairs(r, ("mean_x", "mean_y"))
    _mc_pairs(r["second_moments"], ("xx", "yy", "xy"))
    for w in r["windows"]:
        w["moments"] = [est(m, s) for m, s in zip(w["moments"], w.pop("se"))]
        w["rel_error"] = est(w["rel_error"], w.pop("rel_se"))
    ok = r["means_within_3se"] and r["moments_within_tolerance"] and r["windows_monotone"]
    return tag(r), {}, ok


def cmd_weak_solution(cfg, seed, n_paths, out):
    params, system = build_params(cfg), build_system(cfg)
    wc = cfg.get("weak_solution", {"eps": 0.5})
    z = cfg.get("z", "mu0")
    r = verify.weak_solution_check(system, wc["eps"], cfg.get("p", 2.0), params,
                                   z0=tuple(z) if isinstance(z, list) else z, n_paths=n_paths,
                                   seed=seed, margin=wc.get("margin", 0.1),
                                   dictionary=_dictionary(cfg))
    nov = r["novikov"]
    if "se" in nov:
        nov["value"] = est(nov.pop("value"), nov.pop("se"))
        nov["per_control"] = [{"control": c, "value": est(m, s)} for c, m, s in nov["per_control"]]
    return tag(r), {}, r["finite"]


def cmd_phi_integrability(cfg, seed, n_paths, out):
    params = build_params(cfg)
    pc = cfg.get("phi", {})
    r = verify.phi_integrability_check(cfg.get("p", 2.0), tuple(cfg.get("z", (0.0, 0.0))),
                                       pc.get("c_phi", 1.0), params,
                                       s_min=pc.get("s_min", 1e-3), t_max=pc.get("t_max", 1.0),
                                       quad_points=pc.get("quad_points", 64),
                                       n_mc=pc.get("n_mc", 4096), seed=seed)
    fitted = {"inner_small_s_exponent": exact(r["inner_small_s_exponent"]),
              "ball_measure_exponent": exact(r["ball_measure_exponent"])}
    return tag(r), fitted, r["finite_on_interval"]


HANDLERS = {
    "simulate": cmd_simulate, "semigroup": cmd_semigroup, "hjb": cmd_hjb,
    "coupling-check": cmd_coupling_check, "girsanov-check": cmd_girsanov_check,
    "harnack": cmd_harnack, "gradient": cmd_gradient, "invariant": cmd_invariant,
    "weak-solution": cmd_weak_solution, "phi-integrability": cmd_phi_integrability,
}


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run(command, config, out_dir, seed=None, n_paths=None, quiet=False):
    """Run one command and write its report; returns the exit status."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    cfg = load_config(config) if isinstance(config, (str, Path)) else config
    if not isinstance(config, (str, Path)):
        validate_config(cfg)
    run_cfg = cfg.get("run", {})
    seed = run_cfg.get("seed", 0) if seed is None else seed
    n_paths = run_cfg.get("n_paths", 10_000) if n_paths is None else n_paths
    if n_paths < 2:
        raise ConfigError("--paths must be at least 2")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from exc

    try:
        results, fitted, ok = HANDLERS[command](cfg, seed, n_paths, out)
    except ConfigError:
        raise
    except GHarnackError as exc:
        results = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        fitted, ok = {}, False
    effective = dict(cfg)
    effective["run"] = dict(run_cfg, seed=seed, n_paths=n_paths)
    report = {
        "command": command,
        "config": effective,
        "results": results,
        "fitted_constants": fitted,
        "pass": bool(ok),
        "version": version_string(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, default=_json_default, allow_nan=False)
        fh.write("\n")
    if not quiet:
        status = "PASS" if ok else "FAIL"
        print(f"{command}: {status} (report: {out / 'report.json'})")
        if "error" in results:
            print(f"  {results['error']['type']}: {results['error']['message']}")
    return 0 if ok else 1


def _json_default(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return _clean(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def build_parser():
    parser = argparse.ArgumentParser(prog="gharnack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="run a command on a JSON config")
    r.add_argument("command", choices=COMMANDS)
    r.add_argument("config_path", nargs="?", help="config file (same as --config)")
    r.add_argument("--config", dest="config_flag", help="config file")
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--seed", type=int, help="override run.seed")
    r.add_argument("--paths", type=int, help="override run.n_paths")
    r.add_argument("--quiet", action="store_true", help="no console summary")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    config = args.config_flag or args.config_path
    try:
        if config is None:
            raise ConfigError("no config given; pass a path or --config")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        return run(args.command, config, args.out, args.seed, args.paths, args.quiet)
    except ConfigError as exc:
        print(f"gharnack: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

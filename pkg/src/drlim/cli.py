"""Command-line front end.

Subcommands write CSV (or limited data) plus a JSON summary into ``--out``.
Options can also come from a flat ``key = value`` file given by ``--config``;
flags override the file.

Exit codes: 0 ok, 1 postcondition failure, 2 bad input or configuration,
3 infeasible limiter problem, 4 limiter did not converge.
"""
from __future__ import annotations

import argparse
import csv
import enum
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .ch1d import CHConfig, CHError, Mobility, Potential, ch_run
from .dg1d import ModalField1D, apply_two_stage_limiter, default_sample_points
from .limiter import (
    DEFAULT_EPSILON,
    DEFAULT_MAX_ITERS,
    Bounds,
    InfeasibleError,
    LimiterProblem,
    limit_cell_averages,
)
from .studies import accuracy_study, rate_study, rows_as_dicts

logger = logging.getLogger("drlim")

EXIT_OK = 0
EXIT_POSTCONDITION = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_NOT_CONVERGED = 4

MASS_TOL = 1e-11
POINT_TOL = 1e-14
CH_MASS_TOL = 1e-10
RATE_TOL = 0.05
ITER_TARGET = 20


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- parsing

def parse_bounds(text: str) -> Bounds:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise UsageError(f"bounds must look like m,M, got {text!r}")
    try:
        return Bounds(float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise UsageError(f"bad bounds {text!r}: {exc}") from None


def parse_int_list(text: str) -> list:
    return [int(v) for v in str(text).replace(",", " ").split()]


def parse_float_list(text: str) -> list:
    return [float(v) for v in str(text).replace(",", " ").split()]


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _data_lines(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    lines = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append((n, line))
    if not lines:
        raise UsageError(f"{path}: no data")
    return lines


def _floats(path, n, tokens):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise UsageError(f"{path}:{n}: not a real number") from None
    if not all(math.isfinite(v) for v in vals):
        raise UsageError(f"{path}:{n}: non-finite value")
    return vals


def read_input(path):
    """Averages file (one real per line) or modal-field file.

    Returns a 1D array or a :class:`ModalField1D`.
    """
    lines = _data_lines(path)
    n0, first = lines[0]
    head = first.split()
    if len(head) == 1:
        vals = []
        for n, line in lines:
            tokens = line.split()
            if len(tokens) != 1:
                raise UsageError(f"{path}:{n}: expected one value per line")
            vals += _floats(path, n, tokens)
        return np.array(vals)
    if len(head) != 6:
        raise UsageError(f"{path}:{n0}: header must be 'n_cells degree h x_lo x_hi periodic'")
    try:
        n_cells, degree = int(head[0]), int(head[1])
    except ValueError:
        raise UsageError(f"{path}:{n0}: n_cells and degree must be integers") from None
    h, x_lo, x_hi = _floats(path, n0, head[2:5])
    periodic = parse_bool(head[5])
    if n_cells < 1 or degree < 0:
        raise UsageError(f"{path}:{n0}: need n_cells >= 1 and degree >= 0")
    if not math.isclose(h, (x_hi - x_lo) / n_cells, rel_tol=1e-9):
        raise UsageError(f"{path}:{n0}: h does not match (x_hi - x_lo) / n_cells")
    rows = lines[1:]
    if len(rows) != n_cells:
        raise UsageError(f"{path}: expected {n_cells} cell lines, found {len(rows)}")
    coeffs = []
    for n, line in rows:
        tokens = line.split()
        if len(tokens) != degree + 1:
            raise UsageError(f"{path}:{n}: expected {degree + 1} coefficients")
        coeffs.append(_floats(path, n, tokens))
    return ModalField1D(np.array(coeffs), x_lo, x_hi, periodic)


def write_averages(path, values):
    # repr round-trips every double exactly
    Path(path).write_text("".join(f"{float(v)!r}\n" for v in values))


def write_field(path, field: ModalField1D):
    head = (f"{field.n_cells} {field.degree} {field.h!r} {field.x_lo!r} {field.x_hi!r} "
            f"{str(field.periodic).lower()}\n")
    body = "".join(" ".join(repr(float(c)) for c in row) + "\n" for row in field.coeffs)
    Path(path).write_text(head + body)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".16e")
    return str(v)


def write_csv(path, rows):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.writer(fh)
        w.writerow(rows[0].keys())
        for row in rows:
            w.writerow([_fmt(v) for v in row.values()])


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        # JSON has no NaN/inf
        return v if math.isfinite(v) else None
    if isinstance(v, enum.Enum):
        return v.value if isinstance(v.value, str) else v.name
    return v


def write_summary(path, summary):
    Path(path).write_text(json.dumps(_jsonable(summary), indent=2) + "\n")


def thread_map():
    """``map`` for sweeps, threaded when ``DRLIM_THREADS`` > 1; order is kept."""
    raw = os.environ.get("DRLIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DRLIM_THREADS must be an integer, got {raw!r}") from None
    if n <= 1:
        return map, None
    pool = ThreadPoolExecutor(max_workers=n)
    return pool.map, pool


# ------------------------------------------------------------- commands

def cmd_limit(opts, out: Path, summary: dict) -> int:
    bounds = opts["bounds"]
    data = read_input(opts["input"])
    is_field = isinstance(data, ModalField1D)
    summary["input_kind"] = "modal_field" if is_field else "averages"
    averages = data.averages if is_field else data
    problem = LimiterProblem(averages, bounds)
    summary.update(N=problem.N, target_mass=problem.b)
    if not problem.feasible:
        summary["failure"] = "infeasible"
        return EXIT_INFEASIBLE

    if is_field:
        limited, res = apply_two_stage_limiter(data, bounds, opts["epsilon"], opts["max_iters"])
        target = out / "limited_field.txt"
        write_field(target, limited)
        vals = limited.values_at(default_sample_points(limited.degree))
        violation = max(0.0, bounds.m - float(vals.min()), float(vals.max()) - bounds.M)
        ok_bounds = violation <= POINT_TOL
    else:
        res = limit_cell_averages(problem, opts["epsilon"], opts["max_iters"])
        target = out / "limited.txt"
        write_averages(target, res.x_star)
        violation = bounds.violation(res.x_star)
        ok_bounds = violation == 0.0

    summary.update(
        r_hat=res.r_hat, theta_hat=res.theta_hat, c=res.c, lam=res.lam,
        regime=res.regime, iterations=res.iterations, converged=res.converged,
        mass_defect=res.mass_defect, max_bound_violation=violation,
        output=str(target), partial=not res.converged,
    )
    if not res.converged:
        summary["failure"] = "not_converged"
        return EXIT_NOT_CONVERGED
    problems = []
    if abs(res.mass_defect) > MASS_TOL * max(1.0, abs(problem.b)):
        problems.append("mass")
    if not ok_bounds:
        problems.append("bounds")
    if problems:
        summary["failure"] = "postcondition: " + ", ".join(problems)
        return EXIT_POSTCONDITION
    return EXIT_OK


def cmd_rate_study(opts, out: Path, summary: dict) -> int:
    N = opts["n"]
    if N < 2:
        raise UsageError("rate study needs N >= 2")
    if opts["r"]:
        rs = opts["r"]
    else:
        rs = [int(round(q * N)) for q in opts["ratios"]]
    if any(not 0 <= r <= N for r in rs):
        raise UsageError("every r must satisfy 0 <= r <= N")
    mapper, pool = thread_map()
    try:
        rows, notes = rate_study(N, rs, opts["seed"], opts["epsilon"], opts["bounds"], mapper)
    finally:
        if pool is not None:
            pool.shutdown()
    table = rows_as_dicts(rows)
    target = out / "rate_study.csv"
    write_csv(target, table)
    rel = [abs(r.measured_rate - r.predicted_rate) / r.predicted_rate
           if r.predicted_rate > 0 else float("nan") for r in rows]
    summary.update(
        N=N, r_values=rs, notes=notes, output=str(target), rows=len(rows),
        relative_rate_error=rel,
        checks={"measured_within_5pct": [bool(e <= RATE_TOL) for e in rel]},
    )
    return EXIT_OK


def cmd_accuracy_study(opts, out: Path, summary: dict) -> int:
    mapper, pool = thread_map()
    try:
        rows = accuracy_study(opts["meshes"], opts["degree"], opts["amplitude"],
                              opts["epsilon"], opts["bounds"], map_fn=mapper)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    finally:
        if pool is not None:
            pool.shutdown()
    target = out / "accuracy_study.csv"
    write_csv(target, rows_as_dicts(rows))
    by_mode = {}
    for row in rows:
        by_mode.setdefault(row.mode, []).append(row)
    unlimited = [r.l2_error for r in by_mode["none"]]
    ratios = {m: [r.l2_error / e for r, e in zip(by_mode[m], unlimited)]
              for m in ("average", "both")}
    finest = {m: [r.l2_order for r in rs[-2:]] for m, rs in by_mode.items()}
    summary.update(
        output=str(target), meshes=opts["meshes"], degree=opts["degree"],
        limited_to_unlimited_l2=ratios,
        checks={
            "l2_order_at_least_2.8": {m: bool(min(o) >= 2.8) for m, o in finest.items()},
            "ratio_at_most_2": {m: bool(max(v) <= 2 + 1e-6) for m, v in ratios.items()},
        },
    )
    mass_ok = all(abs(r.mass_change) <= MASS_TOL * max(1.0, r.h * r.n_cells) for r in rows)
    if not mass_ok:
        summary["failure"] = "postcondition: mass"
        return EXIT_POSTCONDITION
    return EXIT_OK


CH_KEYS = {f.name for f in fields(CHConfig)}


def build_ch_config(opts) -> CHConfig:
    raw = dict(opts["ch"])
    raw.setdefault("seed", opts["seed"])
    raw.setdefault("epsilon", opts["epsilon"])
    raw.setdefault("max_iters", opts["max_iters"])
    kinds = {f.name: f.type for f in fields(CHConfig)}
    values = {}
    for key, text in raw.items():
        if key not in CH_KEYS:
            raise UsageError(f"unknown ch-demo key {key!r}")
        kind = kinds[key]
        try:
            if kind == "float | None":
                values[key] = float(text)
            elif kind == "int":
                values[key] = int(text)
            elif kind == "float":
                values[key] = float(text)
            elif kind == "bool":
                values[key] = parse_bool(text)
            elif kind == "Mobility":
                values[key] = Mobility(str(text).lower())
            elif kind == "Potential":
                values[key] = Potential(str(text).lower())
            else:
                values[key] = text
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {text!r} ({exc})") from None
    try:
        return CHConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_ch_demo(opts, out: Path, summary: dict) -> int:
    config = opts["ch_config"]
    diags = ch_run(config)
    rows = [{
        "step": d.step, "time": d.time, "mass": d.mass, "bad_ratio": d.bad_ratio,
        "r_hat": d.r_hat, "dr_iterations": d.dr_iterations, "mass_defect": d.mass_defect,
        "min_avg": d.min_avg, "max_avg": d.max_avg,
    } for d in diags]
    target = out / "ch_demo.csv"
    write_csv(target, rows)
    m0 = diags[0].mass
    drift = max(abs(d.mass - m0) for d in diags)
    max_iters = max(d.dr_iterations for d in diags)
    summary.update(
        config=asdict(config), output=str(target), steps=len(diags) - 1,
        max_mass_drift=drift, max_dr_iterations=max_iters,
        limiter_triggered_steps=sum(1 for d in diags[1:] if d.r_hat > 0),
        min_avg=min(d.min_avg for d in diags[1:]) if len(diags) > 1 else diags[0].min_avg,
        max_avg=max(d.max_avg for d in diags[1:]) if len(diags) > 1 else diags[0].max_avg,
        checks={f"max_dr_iterations_at_most_{ITER_TARGET}": max_iters <= ITER_TARGET},
    )
    if not all(d.dr_converged for d in diags):
        summary["failure"] = "not_converged"
        return EXIT_NOT_CONVERGED
    problems = []
    if drift > CH_MASS_TOL * (1.0 + abs(m0)):
        problems.append("mass")
    if config.limiter_enabled and any(d.min_avg < -1.0 or d.max_avg > 1.0 for d in diags[1:]):
        problems.append("bounds")
    if problems:
        summary["failure"] = "postcondition: " + ", ".join(problems)
        return EXIT_POSTCONDITION
    return EXIT_OK


# -------------------------------------------------------------- options

COMMON = {
    "bounds": (parse_bounds, "-1,1"),
    "epsilon": (float, DEFAULT_EPSILON),
    "max_iters": (int, DEFAULT_MAX_ITERS),
    "seed": (int, 0),
    "out": (str, "."),
}

COMMANDS = {
    "limit": (cmd_limit, {"input": (str, None)}),
    "rate-study": (cmd_rate_study, {
        "n": (int, 10000),
        "r": (parse_int_list, ""),
        "ratios": (parse_float_list, "0.001,0.01,0.1,0.25,0.5"),
    }),
    "accuracy-study": (cmd_accuracy_study, {
        "meshes": (parse_int_list, "20,40,80,160"),
        "degree": (int, 2),
        "amplitude": (float, 5.0),
    }),
    "ch-demo": (cmd_ch_demo, {}),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        # defaults stay None so file values are only overridden by real flags
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--bounds", help="m,M (default -1,1)")
        p.add_argument("--epsilon", help="absolute stopping threshold")
        p.add_argument("--max-iters", dest="max_iters")
        p.add_argument("--seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("limit", help="limit an averages or modal-field file")
    p.add_argument("input", nargs="?")
    common(p)

    p = sub.add_parser("rate-study", help="predicted vs measured convergence rates")
    p.add_argument("--N", dest="n")
    p.add_argument("--r", help="comma-separated r values (overrides --ratios)")
    p.add_argument("--ratios", help="comma-separated r/N values")
    common(p)

    p = sub.add_parser("accuracy-study", help="order of accuracy with and without limiting")
    p.add_argument("--meshes")
    p.add_argument("--degree")
    p.add_argument("--amplitude", help="perturbation size in units of h^(k+1)")
    common(p)

    p = sub.add_parser("ch-demo", help="1D Cahn-Hilliard run with limiter diagnostics")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a Cahn-Hilliard setting")
    common(p)
    return parser


def resolve_options(args) -> dict:
    """Defaults, then the config file, then flags."""
    _, extra = COMMANDS[args.command]
    spec = {**COMMON, **extra}
    file_values = read_config_file(args.config) if args.config else {}
    ch = {}
    merged = {}
    for key, text in file_values.items():
        if key in spec:
            merged[key] = text
        elif args.command == "ch-demo" and key in CH_KEYS:
            ch[key] = text
        elif args.command == "rate-study" and key == "N":
            merged["n"] = text
        else:
            raise UsageError(f"unknown key {key!r} for {args.command}")
    for key in spec:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        ch[key.replace("-", "_")] = value

    opts = {}
    for key, (conv, default) in spec.items():
        text = merged.get(key, default)
        if text is None:
            raise UsageError(f"missing required {key}")
        try:
            opts[key] = conv(text)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad value for {key}: {text!r} ({exc})") from None
    if not opts["epsilon"] > 0:
        raise UsageError("epsilon must be positive")
    if opts["max_iters"] < 1:
        raise UsageError("max_iters must be positive")
    if args.command == "ch-demo":
        opts["ch"] = ch
        opts["ch_config"] = build_ch_config(opts)
    return opts


def _glue_negative_bounds(argv):
    # let "--bounds -1,1" through; argparse would read -1,1 as an option
    argv = list(argv)
    out = []
    i = 0
    while i < len(argv):
        if argv[i] == "--bounds" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--bounds={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_glue_negative_bounds(sys.argv[1:] if argv is None else argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    summary = {"command": args.command, "failure": None}
    out = Path(args.out or ".")
    name = args.command.replace("-", "_") + "_summary.json"
    try:
        opts = resolve_options(args)
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        summary["seed"] = opts["seed"]
        summary["bounds"] = [opts["bounds"].m, opts["bounds"].M]
        summary["epsilon"] = opts["epsilon"]
        code = COMMANDS[args.command][0](opts, out, summary)
    except UsageError as exc:
        summary["failure"] = f"usage: {exc}"
        code = EXIT_USAGE
    except InfeasibleError as exc:
        summary["failure"] = f"infeasible: {exc}"
        code = EXIT_INFEASIBLE
    except CHError as exc:
        summary["failure"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_POSTCONDITION
    summary["exit_code"] = code
    if code != EXIT_OK:
        print(f"drlim {args.command}: {summary['failure']}", file=sys.stderr)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_summary(out / name, summary)
    except OSError as exc:
        print(f"drlim: cannot write summary: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

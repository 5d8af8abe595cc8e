"""Command-line front end: ``bench``, ``search``, ``sweep`` and ``verify``.

Configs are flat ``key=value`` files; ``#`` starts a comment.  Keys::

    problem=quad-scalar | quad-10d | ridge-20f | toynas | inline
    problem.seed=0                      preset seed
    problem.A=2,0;0,1  problem.B=...  problem.c=...  problem.lambda_reg=...   (inline only)
    search.estimator, search.K, search.T, search.S, search.gamma, search.gamma_alpha,
    search.rounds, search.seed, search.epsilon_scale, search.batch_train, search.batch_val,
    search.gamma_alpha_schedule, search.gamma_alpha_floor, search.record_oracle_error
    sweep.T, sweep.K, sweep.gamma, sweep.gamma_alpha, sweep.seed   (comma lists)
    output.dir, output.format
"""
import argparse
import csv
import io
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import KINDS, REVERSE_KINDS, ConfigError, EstimatorSpec
from .problems import PRESETS, QuadraticBilevel, make_preset
from .search import SearchConfig, SearchError, run_search
from .verify import CHECKS, run_default

RESULT_COLUMNS = (
    "run_id", "problem", "estimator", "K", "T", "S", "gamma", "gamma_alpha", "seed", "round",
    "inner_loss", "outer_loss", "hyper_norm", "hyper_oracle_err", "hvp_count_cum",
    "stored_vector_peak", "wall_ns",
)
ERROR_COLUMNS = ("run_id", "stage", "message")
SWEEP_AXES = ("T", "K", "gamma", "gamma_alpha", "seed")
MAX_RUNS = 100_000
FORMATS = ("csv", "json", "both")

_INT = int
_SEARCH_KEYS = {
    "estimator": str, "K": _INT, "T": _INT, "S": _INT, "gamma": float, "gamma_alpha": float,
    "rounds": _INT, "seed": _INT, "epsilon_scale": float, "batch_train": _INT, "batch_val": _INT,
    "gamma_alpha_schedule": str, "gamma_alpha_floor": float, "record_oracle_error": "bool",
}
_SWEEP_TYPES = {"T": _INT, "K": _INT, "gamma": float, "gamma_alpha": float, "seed": _INT}
_INLINE_KEYS = ("A", "B", "c", "lambda_reg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# per-field range rules, checked with line numbers before whole-run validation
_RANGES = {
    "gamma": (lambda v: v > 0, "gamma must be > 0"),
    "gamma_alpha": (lambda v: v >= 0, "gamma_alpha must be >= 0"),
    "rounds": (lambda v: v >= 1, "rounds must be >= 1"),
    "T": (lambda v: v >= 1, "T must be >= 1"),
    "K": (lambda v: v >= 0, "K must be >= 0"),
    "S": (lambda v: v >= 1, "S must be >= 1"),
    "epsilon_scale": (lambda v: v > 0, "epsilon_scale must be > 0"),
    "batch_train": (lambda v: v >= 1, "batch sizes must be >= 1"),
    "batch_val": (lambda v: v >= 1, "batch sizes must be >= 1"),
    "seed": (lambda v: 0 <= v < 2 ** 64, "seed must be a 64-bit unsigned integer"),
}


class ConfigParseError(ConfigError):
    """All problems found in a config; ``errors`` is a list of ``(line, message)``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"line {ln}: {msg}" if ln else msg for ln, msg in self.errors))


@dataclass
class RunConfig:
    problem: str
    problem_params: dict
    search: dict
    sweep: dict = field(default_factory=dict)
    output_dir: str = None
    format: str = "csv"

    def plan(self):
        """Every run of the sweep as ``(run_id, search_fields)`` in a fixed order."""
        axes = [a for a in SWEEP_AXES if a in self.sweep]
        runs = []
        for idx, combo in enumerate(itertools.product(*(self.sweep[a] for a in axes))):
            fields = dict(self.search)
            fields.update(zip(axes, combo))
            runs.append((f"run{idx:05d}", fields))
        return runs

    def n_runs(self):
        n = 1
        for values in self.sweep.values():
            n *= len(values)
        return n


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _convert(kind, text):
    if kind == "bool":
        return _parse_bool(text)
    return kind(text.strip())


def _parse_matrix(text):
    rows = [[float(x) for x in row.split(",")] for row in text.split(";")]
    return np.array(rows, dtype=np.float64)


def build_problem(name, params):
    if name == "inline":
        return QuadraticBilevel(params["A"], params["B"], np.ravel(params["c"]),
                                lambda_reg=float(params.get("lambda_reg", 0.0)), name="inline")
    return make_preset(name, seed=int(params.get("seed", 0)))


def search_config_from(fields):
    """Build a :class:`SearchConfig` from flat ``search.*`` fields."""
    kind = fields.get("estimator")
    if kind is None:
        raise ConfigError("search.estimator is required")
    T = fields.get("T", 1)
    spec_kw = {
        "K": fields.get("K"),
        "S": fields.get("S"),
        "T": T if kind in REVERSE_KINDS else None,
        "gamma": fields.get("gamma", 0.01),
        "batch_train": fields.get("batch_train"),
        "batch_val": fields.get("batch_val"),
    }
    if "epsilon_scale" in fields:
        spec_kw["epsilon_scale"] = fields["epsilon_scale"]
    spec = EstimatorSpec(kind, **spec_kw)
    kw = {k: fields[k] for k in ("gamma", "gamma_alpha", "rounds", "seed", "gamma_alpha_schedule",
                                  "gamma_alpha_floor") if k in fields}
    return SearchConfig(spec, T=T, record_oracle_error=fields.get("record_oracle_error", True), **kw)


def parse_config(text):
    """Parse and validate a config; raises :class:`ConfigParseError` listing every problem."""
    errors = []
    problem, problem_params, search, sweep, out = None, {}, {}, {}, {}
    seen = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append((ln, f"expected key=value, got {line!r}"))
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            errors.append((ln, f"duplicate key {key!r} (first on line {seen[key]})"))
            continue
        seen[key] = ln
        section, _, name = key.partition(".")
        try:
            if key == "problem":
                if value != "inline" and value not in PRESETS:
                    raise ValueError(f"unknown problem {value!r}; valid: {', '.join(PRESETS)}, inline")
                problem = value
            elif section == "problem" and name == "seed":
                problem_params["seed"] = int(value)
            elif section == "problem" and name in _INLINE_KEYS:
                problem_params[name] = float(value) if name == "lambda_reg" else _parse_matrix(value)
            elif section == "search" and name in _SEARCH_KEYS:
                search[name] = _convert(_SEARCH_KEYS[name], value)
                _check_range(name, [search[name]])
            elif section == "sweep" and name in _SWEEP_TYPES:
                values = [_convert(_SWEEP_TYPES[name], v) for v in value.split(",") if v.strip()]
                if not values:
                    raise ValueError(f"sweep axis {name} is empty")
                _check_range(name, values)
                sweep[name] = values
            elif key == "output.dir":
                out["dir"] = value
            elif key == "output.format":
                if value not in FORMATS:
                    raise ValueError(f"output.format must be one of {', '.join(FORMATS)}")
                out["format"] = value
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            errors.append((ln, str(exc)))

    if problem is None:
        errors.append((0, "problem is required"))
    elif problem == "inline":
        missing = [k for k in ("A", "B", "c") if k not in problem_params]
        if missing:
            errors.append((seen["problem"], f"inline problem needs problem.{', problem.'.join(missing)}"))
    elif set(problem_params) - {"seed"}:
        errors.append((seen["problem"], "problem.A/B/c/lambda_reg only apply to problem=inline"))
    if "estimator" in search and search["estimator"] not in KINDS:
        errors.append((seen["search.estimator"],
                       f"unknown estimator {search['estimator']!r}; valid kinds: {', '.join(KINDS)}"))
    cfg = RunConfig(problem, problem_params, search, sweep, out.get("dir"), out.get("format", "csv"))
    if cfg.n_runs() > MAX_RUNS:
        errors.append((0, f"sweep expands to {cfg.n_runs()} runs; the limit is {MAX_RUNS}"))
    if errors:
        raise ConfigParseError(errors)

    # semantic validation of every planned run, reporting each distinct message once
    messages = {}
    try:
        built = build_problem(problem, problem_params)
    except (ValueError, ArithmeticError) as exc:
        built = None
        messages[str(exc)] = seen.get("problem", 0)
    checked = set()
    for _, fields in cfg.plan():
        try:
            spec = search_config_from(fields).round_spec()
            if built is not None and (spec.kind, spec.gamma) not in checked:
                checked.add((spec.kind, spec.gamma))
                spec.check_problem(built)
        except ConfigError as exc:
            messages.setdefault(str(exc), _line_for(str(exc), seen))
    if messages:
        raise ConfigParseError([(ln, msg) for msg, ln in messages.items()])
    return cfg


def _check_range(name, values):
    rule = _RANGES.get(name)
    if rule and not all(np.isfinite(v) and rule[0](v) for v in values):
        raise ValueError(rule[1])


def _line_for(message, seen):
    for key, ln in seen.items():
        name = key.partition(".")[2]
        if name and (message.startswith(f"{name} ") or f" {name} " in message or f"{name}=" in message):
            return ln
    return 0


# -- running -----------------------------------------------------------------

def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _rows_for(run_id, problem_name, fields, config, traj):
    spec = config.estimator
    K = spec.K if spec.kind in ("neumann_k", "stochastic_neumann", "truncated_reverse") else None
    out = []
    for rec in traj.records:
        out.append([
            run_id, problem_name, spec.kind, _fmt(K), _fmt(config.T), _fmt(spec.S), _fmt(config.gamma),
            _fmt(config.gamma_alpha), _fmt(config.seed), _fmt(rec.round), _fmt(rec.inner_loss),
            _fmt(rec.outer_loss), _fmt(rec.hyper_norm), _fmt(rec.hyper_oracle_err),
            _fmt(rec.hvp_count_cum), _fmt(rec.stored_vector_peak), _fmt(rec.wall_ns),
        ])
    return out


def execute_run(problem_name, problem_params, run_id, fields):
    """Run one planned search.  Returns ``(rows, trajectory_json, final_outer_loss, error)``."""
    try:
        problem = build_problem(problem_name, problem_params)
        config = search_config_from(fields)
    except (ValueError, ArithmeticError) as exc:
        return [], None, None, (run_id, "setup", str(exc))
    try:
        traj = run_search(problem, config)
    except SearchError as exc:
        rows = _rows_for(run_id, problem_name, fields, config, exc.trajectory)
        return rows, exc.trajectory.to_json(), None, (run_id, "search", str(exc))
    final = traj.records[-1].outer_loss
    return _rows_for(run_id, problem_name, fields, config, traj), traj.to_json(), final, None


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def run_bench(cfg, out_dir, jobs=1, fmt=None, stream=None):
    """Execute every run of ``cfg`` and write results under ``out_dir``.

    Returns the number of failed runs.
    """
    fmt = fmt or cfg.format
    stream = stream or sys.stdout
    plan = cfg.plan()
    os.makedirs(out_dir, exist_ok=True)
    args = [(cfg.problem, cfg.problem_params, run_id, fields) for run_id, fields in plan]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(execute_run, *zip(*args)))
    else:
        results = [execute_run(*a) for a in args]

    all_rows, errors, finals = [], [], []
    for (run_id, fields), (rows, traj_json, final, err) in zip(plan, results):
        all_rows.extend(rows)
        if err is not None:
            errors.append(err)
        finals.append((run_id, fields, final))
        if fmt in ("json", "both") and traj_json is not None:
            tdir = os.path.join(out_dir, "trajectories")
            os.makedirs(tdir, exist_ok=True)
            with open(os.path.join(tdir, f"{run_id}.json"), "w", encoding="utf-8") as fh:
                fh.write(traj_json)
    if fmt in ("csv", "both"):
        _write_csv(os.path.join(out_dir, "results.csv"), RESULT_COLUMNS, all_rows)
    _write_csv(os.path.join(out_dir, "errors.csv"), ERROR_COLUMNS, errors)
    summary = summarize(cfg, finals)
    _write_csv(os.path.join(out_dir, "summary.csv"), ("axis", "value", "best_outer_loss", "run_id"), summary)
    print_summary(summary, len(plan), len(errors), out_dir, stream)
    return len(errors)


def summarize(cfg, finals):
    """Best final outer loss per value of every sweep axis (or overall for a single run)."""
    axes = [a for a in SWEEP_AXES if a in cfg.sweep] or ["all"]
    table = []
    for axis in axes:
        values = cfg.sweep.get(axis, ["-"])
        for v in values:
            cands = [(loss, rid) for rid, fields, loss in finals
                     if loss is not None and (axis == "all" or fields.get(axis) == v)]
            if cands:
                loss, rid = min(cands)
                table.append([axis, _fmt(v), _fmt(loss), rid])
            else:
                table.append([axis, _fmt(v), "", ""])
    return table


def print_summary(table, n_runs, n_failed, out_dir, stream):
    print(f"{n_runs} run(s), {n_failed} failed; results in {out_dir}", file=stream)
    print(f"{'axis':<12} {'value':<12} {'best_outer_loss':<24} run_id", file=stream)
    for axis, value, loss, rid in table:
        print(f"{axis:<12} {value:<12} {loss:<24} {rid}", file=stream)


def run_verify(selection, out_dir=None, seed=0, stream=None):
    """Run the named checks; returns ``True`` iff all pass."""
    stream = stream or sys.stdout
    names = list(CHECKS) if "all" in selection else list(dict.fromkeys(selection))
    bad = [n for n in names if n not in CHECKS]
    if bad:
        raise ConfigError(f"unknown check(s) {', '.join(bad)}; valid: {', '.join(CHECKS)}, all")
    ok = True
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for name in names:
        rep = run_default(name, seed=seed)
        ok &= rep.passed
        print(rep.summary(), file=stream)
        if out_dir:
            with open(os.path.join(out_dir, f"verify_{name}.json"), "w", encoding="utf-8") as fh:
                fh.write(rep.to_json())
    return ok


# -- entry point -------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="bihyper", description="Bilevel hypergradient experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: config output.dir, $BIHYPER_OUT, ./results)")
    common.add_argument("--jobs", type=int, default=1, help="parallel runs")
    common.add_argument("--format", choices=FORMATS, help="csv, json trajectories, or both")
    common.add_argument("--seed", type=int, help="override the search seed (replaces a seed sweep)")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("bench", "run a config, including any sweep"),
                       ("search", "run a single search"),
                       ("sweep", "run a config that defines sweep axes")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("config", help="path to a key=value config file")
    vp = sub.add_parser("verify", parents=[common], help="run theory checks")
    vp.add_argument("checks", nargs="+", help=f"any of {', '.join(CHECKS)}, or all")
    return p


def _out_dir(args, cfg=None):
    if args.out:
        return args.out
    if cfg is not None and cfg.output_dir:
        return cfg.output_dir
    return os.environ.get("BIHYPER_OUT", "results")


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "verify":
        try:
            ok = run_verify(args.checks, _out_dir(args), seed=args.seed or 0)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return EXIT_OK if ok else EXIT_FAIL

    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
        if args.seed is not None:
            cfg.search["seed"] = args.seed
            cfg.sweep.pop("seed", None)
        if args.command == "search" and cfg.n_runs() != 1:
            raise ConfigError("search runs exactly one configuration; use bench or sweep for sweep.* axes")
        if args.command == "sweep" and not cfg.sweep:
            raise ConfigError("sweep needs at least one sweep.* axis")
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigParseError as exc:
        for ln, msg in exc.errors:
            print(f"{args.config}:{ln}: {msg}" if ln else f"{args.config}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    failed = run_bench(cfg, _out_dir(args, cfg), jobs=args.jobs, fmt=args.format)
    return EXIT_FAIL if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

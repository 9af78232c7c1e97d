"""Command-line interface: ``distfilt run | check-network | analyze | sweep``.

Scenario files use TOML syntax; see ``docs/scenario-format.md``.
"""
from __future__ import annotations

import argparse
import csv
import re
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import analysis
from .errors import DistFiltError, FormatError, IoFailure, ScenarioInvalid, UnknownParameter
from .harness import (
    SCENARIO_VERSION,
    AnalysisSpec,
    GainSpec,
    ModelSpec,
    NetworkSpec,
    Scenario,
    build,
    export_csv,
    export_discrepancy_csv,
    export_trajectory_csv,
    run_scenario,
    simulate,
    sweep,
)
from .network import check_assumption3, combination_matrix, read_combination_csv, read_topology

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3

TOP_LEVEL = {"version": int, "name": str, "seed": int, "horizon": int, "realisations": int,
             "workers": int}
SECTIONS = {"model": ModelSpec, "network": NetworkSpec, "gain": GainSpec, "analysis": AnalysisSpec}
# shorthand accepted for command-line overrides
OVERRIDE_ALIASES = {"model.zeta": "gain.zeta"}


# -- scenario files ----------------------------------------------------------

def _line_of(text: str, section: str | None, key: str) -> int | None:
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        header = re.fullmatch(r"\[\s*([A-Za-z0-9_.-]+)\s*\]", line)
        if header:
            current = header.group(1)
        elif current == section and re.match(rf"[\"']?{re.escape(key)}[\"']?\s*=", line):
            return lineno
        elif section is not None and current is None and line.startswith(f"{section}."):
            return lineno
    return None


def _toml_error_line(exc) -> int | None:
    m = re.search(r"line (\d+)", str(exc))
    return int(m.group(1)) if m else None


def scenario_from_dict(data: dict, text: str = "", path=None, base_dir=None) -> Scenario:
    """Validate a parsed scenario mapping and build the Scenario.

    Relative file references resolve against ``base_dir``, by default the
    directory of ``path``.
    """
    for key in data:
        if key not in TOP_LEVEL and key not in SECTIONS:
            raise FormatError(f"unknown key {key!r}", _line_of(text, None, key), path)
    if "seed" not in data:
        raise FormatError("missing required key 'seed' (no implicit seeding)", None, path)
    for key in ("name", "horizon", "realisations"):
        if key not in data:
            raise FormatError(f"missing required key {key!r}", None, path)
    for key, typ in TOP_LEVEL.items():
        if key in data and (not isinstance(data[key], typ) or isinstance(data[key], bool)):
            raise FormatError(f"{key} must be of type {typ.__name__}", _line_of(text, None, key), path)
    parts = {}
    for name, cls in SECTIONS.items():
        table = dict(data.get(name, {}))
        if not isinstance(data.get(name, {}), dict):
            raise FormatError(f"{name} must be a table", _line_of(text, None, name), path)
        if cls is ModelSpec:
            kind = table.pop("kind", "tanh")
            parts[name] = ModelSpec(kind, table)
            continue
        known = {f.name for f in fields(cls)}
        for key in table:
            if key not in known:
                raise FormatError(f"unknown key {name}.{key}", _line_of(text, name, key), path)
        parts[name] = cls(**table)
    scenario = Scenario(
        name=data["name"], seed=data["seed"], horizon=data["horizon"],
        realisations=data["realisations"], workers=data.get("workers", 1),
        version=data.get("version", SCENARIO_VERSION),
        base_dir=base_dir if base_dir is not None else (Path(path).parent if path else None),
        **parts,
    )
    try:
        scenario.validate()
    except ScenarioInvalid as exc:
        raise ScenarioInvalid(f"{path}: {exc}" if path else str(exc)) from None
    return scenario


def parse_scenario(text: str, path=None) -> Scenario:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(str(exc), _toml_error_line(exc), path) from None
    return scenario_from_dict(data, text, path)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(text, path)


def scenario_to_dict(scenario: Scenario) -> dict:
    out = {"version": scenario.version, "name": scenario.name, "seed": scenario.seed,
           "horizon": scenario.horizon, "realisations": scenario.realisations,
           "workers": scenario.workers}
    out["model"] = {"kind": scenario.model.kind, **scenario.model.params}
    for name in ("network", "gain", "analysis"):
        out[name] = {k: v for k, v in asdict(getattr(scenario, name)).items() if v is not None}
    return out


def dump_scenario(scenario: Scenario) -> str:
    return tomli_w.dumps(scenario_to_dict(scenario))


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(scenario: Scenario, overrides) -> Scenario:
    """Apply ``section.key=value`` strings; values use TOML literal syntax."""
    data = scenario_to_dict(scenario)
    for item in overrides:
        if "=" not in item:
            raise ScenarioInvalid(f"override {item!r} is not of the form key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        key = OVERRIDE_ALIASES.get(key, key)
        value = _parse_value(raw)
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in SECTIONS:
                raise UnknownParameter(f"unknown section in override {key!r}")
            data.setdefault(section, {})[sub] = value
        else:
            if key not in TOP_LEVEL:
                raise UnknownParameter(f"unknown override key {key!r}")
            data[key] = value
    return scenario_from_dict(data, base_dir=scenario.base_dir)


# -- trajectory files --------------------------------------------------------

def read_trajectory_csv(path):
    """Parse a trajectory dump into (truth, central, estimates, phis)."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    rows = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["step", "agent", "component", "truth", "estimate", "phi"]:
            raise FormatError("expected header step,agent,component,truth,estimate,phi", 1, path)
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 6:
                raise FormatError(f"expected 6 fields, got {len(rec)}", lineno, path)
            try:
                s, a, k = int(rec[0]), int(rec[1]), int(rec[2])
                phi = float(rec[5]) if rec[5] else np.nan
                rows.append((s, a, k, float(rec[3]), float(rec[4]), phi))
            except ValueError:
                raise FormatError(f"non-numeric field in {','.join(rec)!r}", lineno, path) from None
            if s < 0 or a < -1 or k < 0:
                raise FormatError("negative step, agent or component", lineno, path)
    if not rows:
        raise FormatError("no data rows", None, path)
    arr = np.array(rows)
    s, a, k = (arr[:, j].astype(int) for j in range(3))
    T1, n, d = s.max() + 1, a.max() + 1, k.max() + 1
    if len(arr) != T1 * (n + 1) * d:
        raise FormatError(f"expected {T1 * (n + 1) * d} rows for a full grid, got {len(arr)}", None, path)
    truth = np.full((T1, d), np.nan)
    central = np.full((T1, d), np.nan)
    est = np.full((T1, n, d), np.nan)
    phi = np.full((T1, n, d), np.nan)
    truth[s, k] = arr[:, 3]
    cm = a < 0
    central[s[cm], k[cm]] = arr[cm, 4]
    am = ~cm
    est[s[am], a[am], k[am]] = arr[am, 4]
    phi[s[am], a[am], k[am]] = arr[am, 5]
    return truth, central, est, phi[1:]


def analyze_directory(directory, burn_in: int = 0):
    """Recompute discrepancy, contraction factors, window products and the
    exponential fit from trajectory dumps in ``directory``.

    Returns ``(report, mean_delta_sq, mean_agent_mse)``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError("not a directory", None, directory)
    files = sorted(p for p in directory.glob("*.csv") if _is_trajectory(p))
    if not files:
        raise FormatError("no trajectory CSV files found", None, directory)
    deltas, agent_mse, gammas, shape = [], [], [], None
    rep = analysis.ConvergenceReport()
    for f in files:
        truth, central, est, phis = read_trajectory_csv(f)
        if shape is None:
            shape = est.shape
        elif est.shape != shape:
            raise FormatError(f"trajectory shape {est.shape} differs from {shape}", None, f)
        errors = analysis.ErrorTrace.from_estimates(truth, central, est)
        deltas.append(analysis.discrepancy(errors).sq_norm)
        agent_mse.append(errors.agent_sq)
        gammas.append(analysis.gamma_ratios(truth, est, phis)[0])
        rep.mu_prime = max(np.nan_to_num(rep.mu_prime, nan=0.0),
                           float(np.max(np.sum((est - central[:, None]) ** 2, axis=-1))))
    delta = np.mean(deltas, axis=0)
    mse = np.mean(agent_mse, axis=0)
    rep.gamma_per_agent = analysis.summarize_gamma(np.stack(gammas))
    rep.gamma_max = float(np.nanmax(rep.gamma_per_agent))
    try:
        fit = analysis.fit_exponential_bound(mse[1:].mean(axis=1), burn_in, float(mse[1].mean()))
        rep.fit_eta, rep.fit_rho, rep.fit_nu, rep.fit_valid = fit.eta, fit.rho, fit.nu, fit.valid
    except DistFiltError:
        rep.fit_valid = False
    g_files = sorted(directory.glob("*g_delta.csv"))
    if g_files:
        steps, g = analysis.read_g_delta_csv(g_files[0])
        rep.g_delta_steps, rep.g_delta = steps, g
        rep.theorem3_k_max = max(len(g) - 1, 0)
        if len(g):
            rep.theorem3_k, rep.theorem3_product = analysis.theorem3_search(g, rep.theorem3_k_max)
    return rep, delta, mse


def _is_trajectory(path):
    try:
        with open(path) as fh:
            return fh.readline().strip() == "step,agent,component,truth,estimate,phi"
    except OSError:
        return False


# -- commands ----------------------------------------------------------------

def _say(args, msg):
    if not args.quiet:
        print(msg)


def _out_dir(args, default):
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare(args):
    scenario = load_scenario(args.scenario)
    overrides = list(getattr(args, "overrides", []) or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.realisations is not None:
        overrides.append(f"realisations={args.realisations}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    return apply_overrides(scenario, overrides) if overrides else scenario


def _write_run(summary, scenario, out, stem):
    export_csv(summary, out / f"{stem}_summary.csv")
    export_discrepancy_csv(summary, out / f"{stem}_discrepancy.csv")
    summary.report.write(out / f"{stem}_report.txt", out / f"{stem}_g_delta.csv")
    (out / f"{stem}_scenario.cfg").write_text(dump_scenario(scenario))


def _describe(summary):
    rep = summary.report
    k = "none" if rep.theorem3_k is None else str(rep.theorem3_k)
    return (f"realisations={summary.realisations} diverged={len(summary.diverged)} "
            f"wall={summary.wall_seconds:.1f}s\n"
            f"final central_mse={summary.central_mse[-1]:.6g} "
            f"agent_mse=[{summary.agent_mse_min[-1]:.6g}, {summary.agent_mse_max[-1]:.6g}] "
            f"delta_sq={summary.delta_sq[-1]:.6g}\n"
            f"lemma1_radius={rep.lemma1_radius:.6g} gamma_max={rep.gamma_max:.6g} "
            f"fit_rho={rep.fit_rho:.6g} theorem3_k={k}")


def cmd_run(args) -> int:
    scenario = _prepare(args)
    out = _out_dir(args, Path(args.scenario).parent)
    progress = None
    if not args.quiet:
        step = max(1, scenario.realisations // 10)

        def progress(done, total):
            if done % step == 0 or done == total:
                print(f"  {done}/{total} realisations", file=sys.stderr)

    summary = run_scenario(scenario, progress=progress)
    _write_run(summary, scenario, out, scenario.name)
    if args.dump_trajectories:
        setup = build(scenario)
        for r in range(min(args.dump_trajectories, scenario.realisations)):
            export_trajectory_csv(simulate(setup, scenario, r), out / f"{scenario.name}_traj_{r:04d}.csv")
    _say(args, _describe(summary))
    _say(args, f"wrote {out}/{scenario.name}_*")
    if summary.diverged:
        print(f"warning: {len(summary.diverged)} realisation(s) diverged: {summary.diverged[:10]}",
              file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_check_network(args) -> int:
    try:
        topology = read_topology(args.topology)
    except DistFiltError as exc:
        if isinstance(exc, IoFailure):
            raise
        print(f"FAIL connected: {exc}")
        return EXIT_CHECK_FAILED
    if args.weights in ("uniform", "metropolis"):
        C = combination_matrix(topology, args.weights)
    else:
        C = read_combination_csv(args.weights)
        if C.size != topology.num_agents:
            print(f"FAIL size: matrix is {C.size}x{C.size} for {topology.num_agents} agents")
            return EXIT_CHECK_FAILED
    checks = check_assumption3(topology, C)
    for name, (ok, detail) in checks.items():
        _say(args, f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
    ok = all(v[0] for v in checks.values())
    _say(args, f"agents={topology.num_agents} edges={topology.num_edges} diameter={topology.diameter()}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_analyze(args) -> int:
    rep, delta, mse = analyze_directory(args.directory, args.burn_in)
    out = _out_dir(args, args.directory)
    rep.write(out / "analysis_report.txt")
    lines = ["step,mean_sq_delta," + ",".join(f"mse_agent_{i}" for i in range(mse.shape[1]))]
    for s in range(len(delta)):
        lines.append(f"{s},{delta[s]:.12g}," + ",".join(f"{v:.12g}" for v in mse[s]))
    (out / "analysis_discrepancy.csv").write_text("\n".join(lines) + "\n")
    k = "none" if rep.theorem3_k is None else rep.theorem3_k
    _say(args, f"max mean ||Delta||^2 = {np.nanmax(delta):.6g}; gamma_max = {rep.gamma_max:.6g}; "
               f"fit_rho = {rep.fit_rho:.6g} (valid={rep.fit_valid}); theorem3_k = {k}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    scenario = _prepare(args)
    out = _out_dir(args, Path(args.scenario).parent)
    values = [_parse_value(v) for v in args.values]
    summaries = sweep(scenario, args.parameter, values)
    code = EXIT_OK
    for v, s in zip(values, summaries):
        stem = f"{scenario.name}_{args.parameter.replace('.', '-')}_{v}"
        _write_run(s, scenario, out, stem)
        _say(args, f"{args.parameter}={v}: final agent_mse_mean={s.agent_mse_mean[-1]:.6g} "
                   f"delta_sq={s.delta_sq[-1]:.6g} diverged={len(s.diverged)}")
        if s.diverged:
            code = EXIT_DIVERGED
    return code


# -- parser ------------------------------------------------------------------

def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--out", metavar="DIR", default=default,
                        help="directory for output artifacts (default: next to the input)")
    parser.add_argument("--seed", type=int, metavar="U64", default=default,
                        help="override the scenario's master seed")
    parser.add_argument("--realisations", type=int, metavar="N", default=default,
                        help="override the number of Monte Carlo realisations")
    parser.add_argument("--quiet", action="store_true", default=default,
                        help="print nothing but errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distfilt",
        description="Centralised, federated and distributed nonlinear filtering simulator.",
    )
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("run", parents=[common], help="run a scenario file",
                       description="Run a scenario and write summary, report and g_Delta CSVs.")
    p.add_argument("scenario", help="scenario file (TOML syntax)")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="dotted overrides applied after parsing, e.g. gain.zeta=0.1")
    p.add_argument("--workers", type=int, metavar="N", help="worker processes for realisations")
    p.add_argument("--dump-trajectories", type=int, default=0, metavar="K",
                   help="also write full trajectory CSVs of the first K realisations")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check-network", parents=[common], help="check a topology and weight rule",
                       description="Report connectivity, row sums, primitivity and the averaging radius.")
    p.add_argument("topology", help="topology file ('agents N' and 'edge i j' lines)")
    p.add_argument("--weights", default="metropolis", metavar="RULE",
                   help="uniform, metropolis, or a combination-matrix CSV (default: metropolis)")
    p.set_defaults(func=cmd_check_network)

    p = sub.add_parser("analyze", parents=[common], help="analyse stored trajectory CSVs",
                       description="Recompute discrepancy, contraction factors and bound fits offline.")
    p.add_argument("directory", help="directory holding trajectory CSVs")
    p.add_argument("--burn-in", type=int, default=0, metavar="STEPS",
                   help="steps skipped before the exponential fit (default: 0)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", parents=[common], help="run a scenario over parameter values",
                       description="Run one scenario per value of a sweepable parameter.")
    p.add_argument("scenario", help="scenario file (TOML syntax)")
    p.add_argument("parameter", help="gain.zeta, horizon, network.weights or model.active_coords")
    p.add_argument("values", nargs="*", help="values to sweep")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioInvalid, FormatError, IoFailure, UnknownParameter, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

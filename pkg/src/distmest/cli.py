"""Command-line front end: ``simulate``, ``are``, ``estimate`` and ``report``.

Exit codes: 0 on success, 2 for bad arguments or configuration, 1 when an
estimator fails at run time. Errors go to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .asymptotics import EIV_LAMBDAS, EIV_SCENARIOS, EivScenario, eiv_asymptotic_variances
from .errors import AggregationError, ContractViolation, EvaluationDomainError, FitFailure
from .local import SolverOptions
from .models import EIVModel, ExponentialModel, LogisticModel, ParameterBox, QuadraticModel, read_block_csv
from .simnet.experiment import (
    CONFIG_SCHEMA,
    ExperimentConfig,
    parse_config_text,
    parse_config_value,
    reports_from_json,
    reports_to_csv,
    reports_to_json,
    sweep,
)
from .simnet.protocol import ESTIMATORS, canonical_kind, run_protocols
from .svg import line_chart


class ConfigError(Exception):
    """Bad flags, config files or input files (exit code 2)."""


def write_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# simulate


def _experiment_config(args):
    data = {}
    if args.config:
        try:
            data.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    flag_values = {
        "design": args.design,
        "estimators": args.estimators,
        "N": args.N,
        "n": args.n,
        "p2": args.p2,
        "B": args.B,
        "seed": args.seed,
        "alphas": args.alpha,
        "savgm_r": args.savgm_r,
        "threads": args.threads,
        "scenario": args.scenario,
        "lambdas": args.lambdas,
        "homogeneous": "true" if args.homogeneous else None,
        "full_scale": "true" if args.full_scale else None,
    }
    for key, value in flag_values.items():
        if value is not None:
            k, v = parse_config_value(key, str(value))
            data[k] = v
    Ks = data.pop("K", None)
    if args.K is not None:
        Ks = args.K
    if isinstance(Ks, str):
        Ks = parse_config_value("K", Ks)[1]
    if Ks is not None and len(Ks) == 0:
        raise ConfigError("--K needs at least one value")
    cfg = ExperimentConfig.from_dict({**data, **({"K": Ks[0]} if Ks else {})})
    if cfg.design == "eiv":
        Ks = [cfg.K]
    return cfg, Ks or [cfg.K]


def _plots(reports, out_dir: Path) -> list:
    """RMSE-vs-K and bias-vs-K charts from report data only."""
    kinds = []
    for r in reports:
        for k in r.metrics:
            if k not in kinds:
                kinds.append(k)
    rmse = {k: [(r.config.K, r.metrics[k].rmse) for r in reports if k in r.metrics] for k in kinds}
    bias = {k: [(r.config.K, r.metrics[k].bias) for r in reports if k in r.metrics] for k in kinds}
    p2 = reports[0].config.p2
    files = []
    for name, data, label in (("rmse_vs_K.svg", rmse, "RMSE"), ("bias_vs_K.svg", bias, "bias")):
        path = out_dir / name
        write_atomic(path, line_chart(data, f"{label} vs K (p2 = {p2})", "K (log scale)", label, logx=True))
        files.append(str(path))
    return files


def cmd_simulate(args) -> int:
    cfg, Ks = _experiment_config(args)
    out = Path(args.out)

    def progress(outcome):
        if args.verbose:
            print(f"replicate {outcome.index}{' failed: ' + outcome.error if outcome.error else ''}", file=sys.stderr)

    reports = sweep(cfg, Ks, progress=progress)
    write_atomic(out / "report.json", reports_to_json(reports))
    write_atomic(out / "report.csv", reports_to_csv(reports))
    timing = [{"K": r.config.K, "seconds_per_replicate": r.timing} for r in reports]
    write_atomic(out / "timing.json", _dumps(timing))
    files = [str(out / "report.json"), str(out / "report.csv"), str(out / "timing.json")]
    if args.plot:
        files += _plots(reports, out)
    print(_dumps({"outputs": files, "valid": all(r.valid for r in reports)}), end="")
    return 0


# ---------------------------------------------------------------------------
# are


def cmd_are(args) -> int:
    scenario = args.scenario
    if scenario is None and not args.all and (args.mu_z is None or args.var_z is None):
        raise ConfigError("choose --scenarioN, --all, or give both --mu-z and --var-z")
    scenarios = []
    if args.all:
        for s in sorted(EIV_SCENARIOS):
            for lams in EIV_LAMBDAS[s]:
                scenarios.append((s, lams))
    else:
        lams_list = [tuple(_floats(args.lambdas))] if args.lambdas else (EIV_LAMBDAS[scenario] if scenario else None)
        if lams_list is None:
            raise ConfigError("--lambda is required with explicit --mu-z/--var-z")
        scenarios = [(scenario, lams) for lams in lams_list]
    records = []
    for s, lams in scenarios:
        mu, var = EIV_SCENARIOS[s] if s is not None else (None, None)
        mu = args.mu_z if args.mu_z is not None else mu
        var = args.var_z if args.var_z is not None else var
        try:
            scn = EivScenario(lambdas=lams, mu_z=mu, var_z=var, sigma2=args.sigma2, N=args.N)
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from None
        rec = eiv_asymptotic_variances(scn).to_dict()
        rec["scenario_id"] = s
        records.append(rec)
    result = records[0] if len(records) == 1 else {"records": records}
    text = _dumps(result)
    if args.out:
        write_atomic(args.out, text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# estimate


def _model_for(args, d: int):
    name = args.model
    if name == "logistic":
        p2 = args.p2 if args.p2 is not None else d - 1 - args.p1
        if args.p1 + p2 != d - 1:
            raise ConfigError(f"logistic rows have {d} columns, expected p1 + p2 + 1 = {args.p1 + p2 + 1}")
        return LogisticModel(args.p1, p2)
    if name == "eiv":
        if d != 2:
            raise ConfigError("EIV rows need exactly two columns (X, Y)")
        return EIVModel(args.sigma2)
    if name == "quadratic":
        p2 = d - args.p1 if args.p2 is None else args.p2
        return QuadraticModel(args.p1, p2)
    if name == "exponential":
        return ExponentialModel()
    raise ConfigError(f"unknown model {name!r}")


def cmd_estimate(args) -> int:
    paths = [p for p in args.blocks.split(",") if p.strip()]
    if not paths:
        raise ConfigError("--blocks needs at least one CSV path")
    try:
        blocks = [read_block_csv(p, k) for k, p in enumerate(paths, start=1)]
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read blocks: {exc}") from None
    dims = {b.d for b in blocks}
    if len(dims) != 1:
        raise ConfigError("all block files must have the same number of columns")
    model = _model_for(args, dims.pop())
    box = ParameterBox.symmetric(model.p1, model.p2, args.box_radius)
    kind = canonical_kind(args.estimator)
    results = run_protocols([kind], blocks, model, box, SolverOptions(), args.savgm_r, seed=args.seed)
    res = results[kind]
    out = {
        "model": model.describe(),
        "estimate": res.estimate.to_dict(),
        "comm": res.log.to_dict(),
    }
    if res.estimate.standardizer is not None:
        region = agg.confidence_region(res.estimate, args.alpha)
        out["region"] = region.to_dict()
    text = _dumps(out)
    if args.out:
        write_atomic(args.out, text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# report


def _table(reports) -> str:
    lines = []
    header = f"{'K':>6} {'estimator':>9} {'alpha':>6} {'bias x100':>10} {'SD x100':>9} {'RMSE x100':>10} {'cover':>6} {'width x100':>11} {'bytes':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        for row in r.csv_rows():
            alpha = "" if row["alpha"] == "" else f"{row['alpha']:.2f}"
            cover = "" if row["coverage"] == "" else f"{row['coverage']:.3f}"
            width = "" if row["width"] == "" else f"{100 * row['width']:.3f}"
            lines.append(
                f"{row['K']:>6} {row['estimator']:>9} {alpha:>6} {100 * row['bias']:>10.3f} {100 * row['sd']:>9.3f} "
                f"{100 * row['rmse']:>10.3f} {cover:>6} {width:>11} {row['comm_bytes']:>10.0f}"
            )
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    try:
        reports = reports_from_json(Path(args.input).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read report: {exc}") from None
    if args.out:
        out = Path(args.out)
        write_atomic(out / "table.csv", reports_to_csv(reports))
        _plots(reports, out)
    print(_table(reports), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distmest",
        description="Distributed M-estimation under block heterogeneity: simulations, oracles and estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser(
        "simulate",
        help="run a Monte Carlo experiment",
        description="Run a Monte Carlo experiment and write report.json, report.csv and timing.json.",
        epilog=CONFIG_SCHEMA,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sim.add_argument("--config", help="key = value config file; flags override its entries")
    sim.add_argument("--design", choices=("logistic", "eiv"), help="simulation design (default logistic)")
    sim.add_argument("--estimators", help=f"comma list from {', '.join(ESTIMATORS)}")
    sim.add_argument("--K", help="number of blocks; a comma list runs a sweep at fixed N")
    sim.add_argument("--N", help="total sample size (desk default 2e5 logistic, 1e5 EIV)")
    sim.add_argument("--n", help="block size; overrides --N for a single K")
    sim.add_argument("--p2", help="dimension of the block-specific parameter (logistic)")
    sim.add_argument("--B", help="number of Monte Carlo replicates (desk default 200)")
    sim.add_argument("--seed", help="master seed (default 0)")
    sim.add_argument("--alpha", help="comma list of significance levels (default 0.05)")
    sim.add_argument("--savgm-r", dest="savgm_r", help="SAVGM subsampling rate (default 0.05)")
    sim.add_argument("--threads", help="replicates run on this many threads; results do not depend on it")
    sim.add_argument("--scenario", help="EIV reference scenario 1-4")
    sim.add_argument("--lambda", dest="lambdas", help="EIV block slopes, comma list")
    sim.add_argument("--homogeneous", action="store_true", help="logistic blocks share one parameter")
    sim.add_argument("--full-scale", dest="full_scale", action="store_true", help="use N = 2e6 and B = 500")
    sim.add_argument("--out", default=".", help="output directory (default: current directory)")
    sim.add_argument("--plot", action="store_true", help="also write RMSE-vs-K and bias-vs-K SVG charts")
    sim.add_argument("--verbose", action="store_true", help="log each replicate to stderr")
    sim.set_defaults(func=cmd_simulate)

    are = sub.add_parser("are", help="closed-form EIV asymptotic variances and ARE")
    group = are.add_mutually_exclusive_group()
    for s in sorted(EIV_SCENARIOS):
        mu, var = EIV_SCENARIOS[s]
        group.add_argument(
            f"--scenario{s}",
            dest="scenario",
            action="store_const",
            const=s,
            help=f"mu_Z = {mu:g}, var_Z = {var:g}",
        )
    group.add_argument("--all", action="store_true", help="every reference scenario and slope pair")
    are.add_argument("--lambda", dest="lambdas", help="block slopes, comma list (default: the scenario's reference rows)")
    are.add_argument("--mu-z", dest="mu_z", type=float, help="mean of Z (overrides the scenario)")
    are.add_argument("--var-z", dest="var_z", type=float, help="variance of Z (overrides the scenario)")
    are.add_argument("--sigma2", type=float, default=1.0, help="measurement-error variance (default 1)")
    are.add_argument("--N", type=int, default=100_000, help="total sample size used for the SD columns")
    are.add_argument("--out", help="also write the JSON to this file")
    are.set_defaults(func=cmd_are, scenario=None)

    est = sub.add_parser("estimate", help="estimate the common parameter from block CSV files")
    est.add_argument("--blocks", required=True, help="comma list of CSV files, one block each")
    est.add_argument("--model", required=True, choices=("logistic", "eiv", "quadratic", "exponential"))
    est.add_argument("--estimator", default="WD", help=f"one of {', '.join(ESTIMATORS)} (default WD)")
    est.add_argument("--alpha", type=float, default=0.05, help="significance level of the region (default 0.05)")
    est.add_argument("--p1", type=int, default=1, help="dimension of the common parameter (default 1)")
    est.add_argument("--p2", type=int, help="dimension of the block parameter (default: inferred from columns)")
    est.add_argument("--sigma2", type=float, default=1.0, help="EIV measurement-error variance (default 1)")
    est.add_argument("--savgm-r", dest="savgm_r", type=float, default=0.05, help="SAVGM subsampling rate")
    est.add_argument("--box-radius", dest="box_radius", type=float, default=50.0, help="parameter box half-width")
    est.add_argument("--seed", type=int, default=0, help="seed for the dWD splits and SAVGM subsamples")
    est.add_argument("--out", help="also write the JSON to this file")
    est.set_defaults(func=cmd_estimate)

    rep = sub.add_parser("report", help="format a report and draw its charts")
    rep.add_argument("--in", dest="input", required=True, help="report.json written by simulate")
    rep.add_argument("--out", help="directory for table.csv and the SVG charts")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation, ValueError) as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except (FitFailure, AggregationError, EvaluationDomainError, np.linalg.LinAlgError) as exc:
        record = {"error": "runtime", "type": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, FitFailure):
            record["block_ids"] = list(exc.block_ids)
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

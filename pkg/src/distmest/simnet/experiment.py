"""Monte Carlo experiment engine.

A replicate is a pure function of ``(config, master seed, replicate index)``.
Replicates may run on a thread pool, but results are collected by index and
reduced with ``math.fsum``, so the report does not depend on the number of
threads or on scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..aggregation import confidence_region
from ..asymptotics import EIV_SCENARIOS, EivScenario
from ..errors import AggregationError, ContractViolation, FitFailure
from ..local import SolverOptions
from ..models import EIVModel, LogisticModel, ParameterBox
from ..rng import derive_seed
from .generate import SIGMA_X, generate_eiv, generate_logistic, generate_logistic_blocks
from .protocol import DEFAULT_SAVGM_R, canonical_kind, run_protocols

DESK_N = 200_000
FULL_N = 2_000_000
DESK_B = 200
FULL_B = 500
EIV_N = 100_000
MAX_FAILURE_RATE = 0.01

DEFAULT_ESTIMATORS = {
    "logistic": ("SaC", "WD", "dSaC", "dWD", "SAVGM"),
    "eiv": ("full", "SaC", "WD"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one Monte Carlo experiment.

    For ``design = "logistic"`` the blocks follow the heterogeneous design
    unless ``homogeneous`` is set, in which case every block uses
    ``theta = (phi, lambda_hom * (-1)^j)``. ``n`` (block size) overrides
    ``N`` when given. For ``design = "eiv"`` either ``scenario`` picks the
    reference ``(mu_z, var_z)`` or they are given explicitly.
    """

    design: str = "logistic"
    estimators: tuple = ()
    K: int = 10
    N: Optional[int] = None
    n: Optional[int] = None
    p2: int = 4
    phi: float = 1.0
    sigma_x: float = SIGMA_X
    homogeneous: bool = False
    lambda_hom: float = 1.0
    scenario: Optional[int] = None
    lambdas: tuple = (0.25, 2.25)
    mu_z: float = 0.0
    var_z: float = 0.5
    sigma2: float = 1.0
    B: int = DESK_B
    alphas: tuple = (0.05,)
    seed: int = 0
    threads: int = 1
    savgm_r: float = DEFAULT_SAVGM_R
    box_radius: float = 50.0
    full_scale: bool = False

    def __post_init__(self):
        if self.design not in ("logistic", "eiv"):
            raise ContractViolation(f"unknown design {self.design!r}")
        ests = self.estimators or DEFAULT_ESTIMATORS[self.design]
        try:
            object.__setattr__(self, "estimators", tuple(canonical_kind(e) for e in ests))
        except ValueError as exc:
            raise ContractViolation(str(exc)) from None
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "lambdas", tuple(float(l) for l in self.lambdas))
        if self.scenario is not None:
            if self.scenario not in EIV_SCENARIOS:
                raise ContractViolation(f"unknown scenario {self.scenario}")
            mu, var = EIV_SCENARIOS[self.scenario]
            object.__setattr__(self, "mu_z", mu)
            object.__setattr__(self, "var_z", var)
        if self.N is None:
            if self.design == "eiv":
                default_n = EIV_N
            else:
                default_n = FULL_N if self.full_scale else DESK_N
            object.__setattr__(self, "N", default_n)
        if self.full_scale and self.B == DESK_B:
            object.__setattr__(self, "B", FULL_B)
        if self.B < 1:
            raise ContractViolation("B must be at least 1")
        if self.threads < 1:
            raise ContractViolation("threads must be at least 1")
        if not all(0 < a < 1 for a in self.alphas):
            raise ContractViolation("alpha levels must lie in (0, 1)")
        if not 0 < self.savgm_r < 1:
            raise ContractViolation("savgm_r must lie in (0, 1)")
        if self.design == "logistic":
            if self.K < 1 or (self.K < 2 and not self.homogeneous):
                raise ContractViolation("the heterogeneous logistic design needs K >= 2")
            n = self.n if self.n is not None else self.N // self.K
            if n < 2 * (1 + self.p2):
                raise ContractViolation(f"block size {n} too small for p = {1 + self.p2}")
            object.__setattr__(self, "n", int(n))
            object.__setattr__(self, "N", int(n) * self.K)
        else:
            object.__setattr__(self, "K", len(self.lambdas))
            object.__setattr__(self, "p2", 1)
            self.eiv_scenario()  # validates

    # -- derived objects -------------------------------------------------

    def eiv_scenario(self) -> EivScenario:
        return EivScenario(
            lambdas=self.lambdas, mu_z=self.mu_z, var_z=self.var_z, sigma2=self.sigma2, phi=self.phi, N=self.N
        )

    def model(self):
        if self.design == "eiv":
            return EIVModel(self.sigma2)
        return LogisticModel(1, self.p2)

    def box(self) -> ParameterBox:
        return ParameterBox.symmetric(1, self.p2, self.box_radius)

    def truth(self) -> np.ndarray:
        return np.array([self.phi])

    def generate(self, replicate: int) -> list:
        if self.design == "eiv":
            return generate_eiv(self.eiv_scenario(), None, self.seed, replicate)
        if self.homogeneous:
            lam = self.lambda_hom * (-1.0) ** np.arange(1, self.p2 + 1)
            thetas = np.tile(np.concatenate([[self.phi], lam]), (self.K, 1))
            return generate_logistic_blocks(thetas, self.n, self.seed, replicate, self.sigma_x)
        return generate_logistic(self.K, self.n, self.p2, self.phi, self.seed, replicate, self.sigma_x)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("estimators", "lambdas", "alphas"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ContractViolation(f"unknown config keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        for key in ("estimators", "lambdas", "alphas"):
            if key in data:
                data[key] = tuple(data[key])
        if isinstance(data.get("K"), (list, tuple)):
            if len(data["K"]) != 1:
                raise ContractViolation("a single experiment takes one K; use sweep() for several")
            data["K"] = data["K"][0]
        return cls(**data)


# ---------------------------------------------------------------------------
# key = value config files

_INT_KEYS = {"N", "n", "p2", "scenario", "B", "seed", "threads"}
_FLOAT_KEYS = {"phi", "sigma_x", "lambda_hom", "mu_z", "var_z", "sigma2", "savgm_r", "box_radius"}
_BOOL_KEYS = {"homogeneous", "full_scale"}
_LIST_KEYS = {"estimators": str, "lambdas": float, "alphas": float, "K": int}
_KEY_ALIASES = {"alpha": "alphas", "lambda": "lambdas"}

CONFIG_SCHEMA = """\
# Experiment config: one `key = value` per line, `#` starts a comment.
# design       logistic | eiv
# estimators   comma list from full, SaC, WD, dSaC, dWD, SAVGM
# K, N, n, p2  block count (comma list = sweep at fixed N), total size, block size (overrides N), nuisance dimension
# phi          true common parameter
# sigma_x      covariate standard deviation (logistic)
# homogeneous  true | false; lambda_hom sets the shared nuisance magnitude
# scenario     1-4 (EIV reference mu_z, var_z); or mu_z, var_z, sigma2 explicitly
# lambdas      comma list of EIV block slopes
# B, seed, threads, alpha (comma list), savgm_r, box_radius, full_scale
"""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ContractViolation(f"not a boolean: {text!r}")


def parse_config_value(key: str, value: str):
    key = _KEY_ALIASES.get(key, key)
    try:
        if key in _INT_KEYS:
            return key, int(float(value)) if "e" in value.lower() else int(value)
        if key in _FLOAT_KEYS:
            return key, float(value)
        if key in _BOOL_KEYS:
            return key, _parse_bool(value)
        if key in _LIST_KEYS:
            conv = _LIST_KEYS[key]
            return key, tuple(conv(v.strip()) for v in value.split(",") if v.strip())
        if key == "design":
            return key, value.strip().lower()
    except ValueError:
        raise ContractViolation(f"bad value for {key}: {value!r}") from None
    raise ContractViolation(f"unknown config key {key!r}")


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        k, v = parse_config_value(key, value)
        out[k] = v
    return out


def load_config(path, **overrides) -> ExperimentConfig:
    data = parse_config_text(Path(path).read_text(encoding="utf-8"))
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class EstimatorMetrics:
    """Metrics for one estimator; ``coverage``/``width`` map alpha -> value."""

    estimator: str
    n_valid: int
    bias: float
    sd: float
    rmse: float
    comm_bytes: float
    inference_bytes: float
    coverage: dict = field(default_factory=dict)
    width: dict = field(default_factory=dict)
    fallback_rate: float = 0.0

    @property
    def abs_bias(self) -> float:
        return abs(self.bias)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "n_valid": self.n_valid,
            "bias": self.bias,
            "abs_bias": self.abs_bias,
            "sd": self.sd,
            "rmse": self.rmse,
            "comm_bytes": self.comm_bytes,
            "inference_bytes": self.inference_bytes,
            "fallback_rate": self.fallback_rate,
            "coverage": {repr(a): c for a, c in self.coverage.items()},
            "width": {repr(a): w for a, w in self.width.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorMetrics":
        return cls(
            estimator=d["estimator"],
            n_valid=d["n_valid"],
            bias=d["bias"],
            sd=d["sd"],
            rmse=d["rmse"],
            comm_bytes=d["comm_bytes"],
            inference_bytes=d["inference_bytes"],
            coverage={float(a): c for a, c in d["coverage"].items()},
            width={float(a): w for a, w in d["width"].items()},
            fallback_rate=d.get("fallback_rate", 0.0),
        )


CSV_COLUMNS = (
    "design", "K", "n", "N", "estimator", "alpha", "n_valid", "bias", "abs_bias", "sd", "rmse",
    "coverage", "width", "comm_bytes", "inference_bytes",
)


@dataclass(frozen=True)
class ExperimentReport:
    """Per-estimator metrics plus the config echo.

    ``estimates`` holds each replicate's estimate of the first coordinate
    of ``phi`` (``None`` for failed replicates). Wall times live in
    ``timing`` and are kept out of ``to_dict`` because they are not
    reproducible.
    """

    config: ExperimentConfig
    metrics: dict
    failures: tuple = ()
    estimates: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict, compare=False)

    @property
    def valid(self) -> bool:
        return len(self.failures) <= MAX_FAILURE_RATE * self.config.B

    def __getitem__(self, kind: str) -> EstimatorMetrics:
        return self.metrics[canonical_kind(kind)]

    def to_dict(self) -> dict:
        # the thread count is an execution detail and must not change the report
        config = self.config.to_dict()
        config.pop("threads")
        return {
            "config": config,
            "seed": self.config.seed,
            "B": self.config.B,
            "valid": self.valid,
            "failures": [list(f) for f in self.failures],
            "metrics": [m.to_dict() for m in self.metrics.values()],
            "estimates": {k: list(v) for k, v in self.estimates.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        metrics = {m["estimator"]: EstimatorMetrics.from_dict(m) for m in d["metrics"]}
        return cls(
            config=ExperimentConfig.from_dict(d["config"]),
            metrics=metrics,
            failures=tuple(tuple(f) for f in d.get("failures", ())),
            estimates={k: list(v) for k, v in d.get("estimates", {}).items()},
        )

    def csv_rows(self) -> list:
        cfg = self.config
        rows = []
        for m in self.metrics.values():
            base = {
                "design": cfg.design,
                "K": cfg.K,
                "n": cfg.n if cfg.n is not None else "",
                "N": cfg.N,
                "estimator": m.estimator,
                "n_valid": m.n_valid,
                "bias": m.bias,
                "abs_bias": m.abs_bias,
                "sd": m.sd,
                "rmse": m.rmse,
                "comm_bytes": m.comm_bytes,
                "inference_bytes": m.inference_bytes,
            }
            if m.coverage:
                for a in sorted(m.coverage):
                    rows.append({**base, "alpha": a, "coverage": m.coverage[a], "width": m.width[a]})
            else:
                rows.append({**base, "alpha": "", "coverage": "", "width": ""})
        return rows


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in reports:
        for row in rep.csv_rows():
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def reports_to_json(reports) -> str:
    return json.dumps({"runs": [r.to_dict() for r in reports]}, indent=1, sort_keys=True) + "\n"


def reports_from_json(text: str) -> list:
    data = json.loads(text)
    runs = data["runs"] if "runs" in data else [data]
    return [ExperimentReport.from_dict(r) for r in runs]


# ---------------------------------------------------------------------------
# engine


@dataclass(frozen=True)
class ReplicateOutcome:
    index: int
    phi: dict = field(default_factory=dict)
    covered: dict = field(default_factory=dict)
    width: dict = field(default_factory=dict)
    comm: dict = field(default_factory=dict)
    inference: dict = field(default_factory=dict)
    fallback: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    error: Optional[str] = None


def run_replicate(cfg: ExperimentConfig, index: int, opts: SolverOptions = SolverOptions()) -> ReplicateOutcome:
    """Generate, estimate and score one replicate."""
    blocks = cfg.generate(index)
    truth = cfg.truth()
    try:
        results = run_protocols(
            cfg.estimators,
            blocks,
            cfg.model(),
            cfg.box(),
            opts,
            cfg.savgm_r,
            seed=derive_seed(cfg.seed, index, 1),
        )
        out = ReplicateOutcome(index)
        for kind, res in results.items():
            est = res.estimate
            out.phi[kind] = float(est.phi[0])
            out.comm[kind] = res.log.total_bytes
            out.inference[kind] = res.log.inference_bytes
            out.fallback[kind] = bool(est.fallback_used)
            out.seconds[kind] = res.seconds
            if est.standardizer is not None:
                for a in cfg.alphas:
                    region = confidence_region(est, a)
                    out.covered[(kind, a)] = region.contains(truth)
                    out.width[(kind, a)] = region.width
        return out
    except (FitFailure, AggregationError, np.linalg.LinAlgError) as exc:
        return ReplicateOutcome(index, error=f"{type(exc).__name__}: {exc}")


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def summarize(cfg: ExperimentConfig, outcomes) -> ExperimentReport:
    outcomes = sorted(outcomes, key=lambda o: o.index)
    good = [o for o in outcomes if o.error is None]
    failures = tuple((o.index, o.error) for o in outcomes if o.error is not None)
    truth = cfg.phi
    metrics, estimates, timing = {}, {}, {}
    for kind in cfg.estimators:
        errs = [o.phi[kind] - truth for o in good]
        B = len(errs)
        bias = _mean(errs)
        if B > 1:
            sd = math.sqrt(math.fsum((e - bias) ** 2 for e in errs) / (B - 1))
        else:
            sd = 0.0
        rmse = math.sqrt(_mean(e * e for e in errs)) if B else float("nan")
        coverage, width = {}, {}
        if good and (kind, cfg.alphas[0]) in good[0].covered:
            for a in cfg.alphas:
                coverage[a] = _mean(1.0 if o.covered[(kind, a)] else 0.0 for o in good)
                width[a] = _mean(o.width[(kind, a)] for o in good)
        metrics[kind] = EstimatorMetrics(
            estimator=kind,
            n_valid=B,
            bias=bias,
            sd=sd,
            rmse=rmse,
            comm_bytes=_mean(o.comm[kind] for o in good),
            inference_bytes=_mean(o.inference[kind] for o in good),
            coverage=coverage,
            width=width,
            fallback_rate=_mean(1.0 if o.fallback[kind] else 0.0 for o in good),
        )
        by_index = {o.index: o.phi[kind] for o in good}
        estimates[kind] = [by_index.get(o.index) for o in outcomes]
        timing[kind] = _mean(o.seconds[kind] for o in good)
    return ExperimentReport(config=cfg, metrics=metrics, failures=failures, estimates=estimates, timing=timing)


def monte_carlo(cfg: ExperimentConfig, opts: SolverOptions = SolverOptions(), progress=None) -> ExperimentReport:
    """Run ``cfg.B`` replicates on ``cfg.threads`` threads and aggregate the metrics."""

    def one(i):
        res = run_replicate(cfg, i, opts)
        if progress is not None:
            progress(res)
        return res

    if cfg.threads == 1:
        outcomes = [one(i) for i in range(cfg.B)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            outcomes = list(pool.map(one, range(cfg.B)))
    return summarize(cfg, outcomes)


def sweep(cfg: ExperimentConfig, Ks, opts: SolverOptions = SolverOptions(), progress=None) -> list:
    """One report per block count in ``Ks``; with several counts N stays fixed and n = N // K."""
    Ks = [int(K) for K in Ks]
    reports = []
    for K in Ks:
        sub = replace(cfg, K=K, n=cfg.n if len(Ks) == 1 else None)
        reports.append(monte_carlo(sub, opts, progress))
    return reports

"""Config-driven simulation studies: sweeps, summaries and the evaluation coverage study.

Configuration is an INI file read with :mod:`configparser`::

    [dgp]            DgpConfig fields except n and seed
    [experiment]     sweep, values, replicates, methods, train_n, test_n,
                     seed, clip_epsilon, treatment, evaluate, d_total,
                     record_timings
    [coverage]       train_n, test_n, truth_n, simulations, methods, seed
    [mu] [pi] [second] [tcr] [eta]
                     family, cv_folds, n_lambda, lambda_min_ratio,
                     lambda_grid, neighbors, standardize, feature_subset

``values``, ``methods`` and ``lambda_grid`` are comma separated lists;
``feature_subset`` is either a list of 0-based indices or a half-open range
``start:stop``.  Empty values mean "use the default".  Every key can be
overridden on the command line as ``--section.key value``.
"""
from __future__ import annotations

import configparser
import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import ConfigError, DataError, RcpredError, check_treatment, child_seed
from .eval import dr_mse_many, oracle_mse, oracle_prediction_error
from .methods import (LearnerSpecs, fit_and_evaluate_joint, fit_decision_model, fit_dr,
                      fit_dr_crossfit, fit_pl, fit_pl_crossfit, fit_tcr)
from .regress import RegressorSpec
from .synth import DgpConfig, generate

EXPERIMENT_METHODS = ("TCR", "PL", "PL_CF", "DR", "DR_CF", "JOINT", "DECISION")
SWEEP_KEYS = ("k_z", "d_v", "rho")
SPEC_SECTIONS = ("mu", "pi", "second", "tcr", "eta")
TEST_SEED_OFFSET = 1_000_003
RESULT_HEADER = ["sweep", "value", "replicate", "method", "oracle_mse",
                 "dr_point", "dr_ci_lo", "dr_ci_hi", "status"]
SUMMARY_HEADER = ["sweep", "value", "method", "replicates", "mean_mse", "ci_half_width",
                  "ci_lo", "ci_hi", "mean_dr_point"]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _split_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(text: str, kind, where: str):
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind.__name__}") from None


def parse_feature_subset(text: str) -> Optional[Tuple[int, ...]]:
    text = text.strip()
    if not text:
        return None
    if ":" in text:
        lo, hi = text.split(":", 1)
        return tuple(range(int(lo or 0), int(hi)))
    return tuple(int(t) for t in _split_list(text))


def spec_from_section(section) -> RegressorSpec:
    kw = {}
    for key, raw in section.items():
        raw = raw.strip()
        if not raw:
            continue
        where = f"[{section.name}] {key}"
        if key == "family":
            kw[key] = raw
        elif key in ("cv_folds", "n_lambda", "neighbors"):
            kw[key] = _convert(raw, int, where)
        elif key == "lambda_min_ratio":
            kw[key] = _convert(raw, float, where)
        elif key == "standardize":
            kw[key] = _convert(raw, bool, where)
        elif key == "lambda_grid":
            kw[key] = tuple(_convert(t, float, where) for t in _split_list(raw))
        elif key == "feature_subset":
            try:
                kw[key] = parse_feature_subset(raw)
            except ValueError:
                raise ConfigError(f"{where}: bad feature_subset {raw!r}") from None
        else:
            raise ConfigError(f"{where}: unknown key")
    return RegressorSpec(**kw)


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DgpConfig = field(default_factory=DgpConfig)
    sweep: Optional[str] = None
    values: Tuple[float, ...] = ()
    replicates: int = 50
    methods: Tuple[str, ...] = ("TCR", "PL", "DR")
    specs: LearnerSpecs = field(default_factory=LearnerSpecs)
    clip_epsilon: float = 0.01
    train_n: int = 1000
    test_n: int = 1000
    seed: int = 0
    evaluate: bool = False
    d_total: Optional[int] = None
    record_timings: bool = False
    # coverage study
    truth_n: int = 10_000
    coverage_test_n: int = 2000
    simulations: int = 100
    coverage_methods: Tuple[str, ...] = ("TCR", "PL", "DR")

    def __post_init__(self):
        if self.replicates < 1 or self.simulations < 1:
            raise ConfigError("replicates and simulations must be >= 1")
        bad = [m for m in self.methods + self.coverage_methods if m not in EXPERIMENT_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(EXPERIMENT_METHODS)}")
        if self.sweep is not None and self.sweep not in SWEEP_KEYS:
            raise ConfigError(f"sweep must be one of {SWEEP_KEYS}, got {self.sweep!r}")
        if self.sweep is not None and not self.values:
            raise ConfigError("a sweep needs at least one value")
        if min(self.train_n, self.test_n, self.truth_n, self.coverage_test_n) < 8:
            raise ConfigError("sample sizes must be at least 8")
        for v in self.sweep_values():
            self.dgp_for(v)

    @property
    def treatment(self) -> int:
        return self.dgp.treatment

    def sweep_values(self) -> Tuple[Optional[float], ...]:
        return tuple(self.values) if self.sweep else (None,)

    def dgp_for(self, value, n: Optional[int] = None, seed: int = 0) -> DgpConfig:
        """The DGP at one sweep value (validated through DgpConfig)."""
        changes = {"n": n or self.train_n, "seed": seed}
        if self.sweep is not None and value is not None:
            changes[self.sweep] = value if self.sweep == "rho" else int(value)
        d_v = changes.get("d_v", self.dgp.d_v)
        if self.d_total is not None:
            changes["d_z"] = self.d_total - d_v
        return self.dgp.replace(**changes)


_DGP_KEYS = {f.name: f.type for f in fields(DgpConfig)}
_EXPERIMENT_KEYS = {
    "sweep": str, "values": list, "replicates": int, "methods": list, "clip_epsilon": float,
    "train_n": int, "test_n": int, "seed": int, "evaluate": bool, "d_total": int,
    "record_timings": bool, "treatment": int,
}
_COVERAGE_KEYS = {"train_n": int, "test_n": int, "truth_n": int, "simulations": int,
                  "methods": list, "seed": int}
_TYPES = {"int": int, "float": float, "bool": bool, int: int, float: float, bool: bool}


def read_config_text(text: str = "", overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Build an ExperimentConfig from INI text plus ``section.key -> value`` overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, key, str(value))
    known = {"dgp", "experiment", "coverage", *SPEC_SECTIONS}
    unknown = [s for s in parser.sections() if s not in known]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")

    dgp_kw = {}
    if parser.has_section("dgp"):
        for key, raw in parser["dgp"].items():
            if key not in _DGP_KEYS or key in ("n", "seed"):
                raise ConfigError(f"[dgp] {key}: unknown key (n and seed come from [experiment])")
            if raw.strip():
                dgp_kw[key] = _convert(raw.strip(), _TYPES[_DGP_KEYS[key]], f"[dgp] {key}")
    kw = {}
    if parser.has_section("experiment"):
        for key, raw in parser["experiment"].items():
            raw = raw.strip()
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"[experiment] {key}: unknown key")
            if not raw:
                continue
            kind = _EXPERIMENT_KEYS[key]
            if key == "values":
                kw[key] = tuple(_convert(t, float, "[experiment] values") for t in _split_list(raw))
            elif key == "methods":
                kw[key] = tuple(m.upper() for m in _split_list(raw))
            elif key == "treatment":
                dgp_kw["treatment"] = _convert(raw, int, "[experiment] treatment")
            else:
                kw[key] = _convert(raw, kind, f"[experiment] {key}") if kind is not str else raw
    if parser.has_section("coverage"):
        for key, raw in parser["coverage"].items():
            raw = raw.strip()
            if key not in _COVERAGE_KEYS:
                raise ConfigError(f"[coverage] {key}: unknown key")
            if not raw:
                continue
            target = {"train_n": "train_n", "test_n": "coverage_test_n", "truth_n": "truth_n",
                      "simulations": "simulations", "methods": "coverage_methods",
                      "seed": "seed"}[key]
            if key == "methods":
                kw[target] = tuple(m.upper() for m in _split_list(raw))
            else:
                kw[target] = _convert(raw, int, f"[coverage] {key}")
    specs = {s: spec_from_section(parser[s]) for s in SPEC_SECTIONS if parser.has_section(s)}
    try:
        dgp = DgpConfig(**dgp_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    check_treatment(dgp.treatment)
    return ExperimentConfig(dgp=dgp, specs=LearnerSpecs(**specs), **kw)


def read_config(path, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text() if path is not None else ""
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return read_config_text(text, overrides)


# --------------------------------------------------------------------------
# experiment runner
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    sweep: str
    value: str
    replicate: int
    method: str
    oracle_mse: float = float("nan")
    dr_point: float = float("nan")
    dr_ci_lo: float = float("nan")
    dr_ci_hi: float = float("nan")
    status: str = "ok"
    wall_time: float = field(default=0.0, compare=False)

    def csv_row(self) -> list:
        f = lambda x: "NA" if math.isnan(x) else repr(float(x))
        return [self.sweep, self.value, str(self.replicate), self.method, f(self.oracle_mse),
                f(self.dr_point), f(self.dr_ci_lo), f(self.dr_ci_hi), self.status]


def _format_value(value) -> str:
    if value is None:
        return "NA"
    return repr(float(value)) if not float(value).is_integer() else str(int(value))


def replicate_seeds(base: int, replicate: int) -> Tuple[int, int, int]:
    """(train, test, learner) seeds; train data uses base + replicate."""
    train = base + replicate
    return train, train + TEST_SEED_OFFSET, child_seed(train, 7)


def fit_method(name: str, train, config: ExperimentConfig, seed: int):
    """Fit one named method; JOINT returns (DR model, DR estimate)."""
    a, specs, eps = config.treatment, config.specs, config.clip_epsilon
    if name == "TCR":
        return fit_tcr(train, a, specs.tcr_spec, seed)
    if name == "PL":
        return fit_pl(train, a, specs.mu, specs.second, seed)
    if name == "PL_CF":
        return fit_pl_crossfit(train, a, specs, seed)
    if name == "DR":
        return fit_dr(train, a, specs, eps, seed)
    if name == "DR_CF":
        return fit_dr_crossfit(train, a, specs, eps, seed)
    if name == "JOINT":
        models, estimates = fit_and_evaluate_joint(train, a, specs, eps, seed)
        return models["DR"], estimates["DR"]
    if name == "DECISION":
        return fit_decision_model(train, specs.second, seed)
    raise ConfigError(f"unknown method {name!r}")


def _predict_nu(model, table, ds_test) -> float:
    x = table.vz if getattr(model, "uses_z", False) else table.v
    return oracle_mse(model, x, ds_test.nu_true)


def run_cell(config: ExperimentConfig, value, replicate: int) -> List[ResultRow]:
    """All methods for one (sweep value, replicate); failures become error rows."""
    sweep = config.sweep or "none"
    vtext = _format_value(value)
    s_train, s_test, s_fit = replicate_seeds(config.seed, replicate)
    rows = []
    try:
        train = generate(config.dgp_for(value, config.train_n, s_train))
        test = generate(config.dgp_for(value, config.test_n, s_test))
    except (RcpredError, ArithmeticError) as exc:
        msg = f"error: {type(exc).__name__}: {exc}".replace(",", ";")
        return [ResultRow(sweep, vtext, replicate, m, status=msg) for m in config.methods]
    fitted, joint_est, times, errors = {}, {}, {}, {}
    for name in config.methods:
        t0 = time.perf_counter()
        try:
            out = fit_method(name, train.table, config, s_fit)
            if name == "JOINT":
                out, joint_est[name] = out
            fitted[name] = out
        except (RcpredError, ArithmeticError) as exc:
            errors[name] = f"error: {type(exc).__name__}: {exc}".replace(",", ";")
        times[name] = time.perf_counter() - t0
    estimates = {}
    if config.evaluate:
        to_eval = {k: m for k, m in fitted.items() if k != "JOINT"}
        if to_eval:
            try:
                est = dr_mse_many(test.table, to_eval, config.treatment, config.specs.pi,
                                  config.specs.eta_spec, config.clip_epsilon,
                                  child_seed(s_test, 11))
                estimates = {e.method: e for e in est}
            except (RcpredError, ArithmeticError) as exc:
                for k in to_eval:
                    errors.setdefault(k, f"error: dr_mse: {exc}".replace(",", ";"))
    estimates.update(joint_est)
    for name in config.methods:
        if name in errors:
            rows.append(ResultRow(sweep, vtext, replicate, name, status=errors[name],
                                  wall_time=times[name]))
            continue
        e = estimates.get(name)
        rows.append(ResultRow(
            sweep, vtext, replicate, name,
            oracle_mse=_predict_nu(fitted[name], test.table, test),
            dr_point=e.point if e else float("nan"),
            dr_ci_lo=e.ci_lo if e else float("nan"),
            dr_ci_hi=e.ci_hi if e else float("nan"),
            wall_time=times[name]))
    return rows


def _cell_job(args):
    config, value, replicate = args
    return run_cell(config, value, replicate)


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> List[ResultRow]:
    """Run every (sweep value, replicate) cell; rows come back in deterministic order.

    With ``out_dir`` the rows are written to ``results.csv`` together with
    ``summary.csv`` / ``summary.txt`` (and ``timings.csv`` when requested).
    """
    cells = [(config, v, r) for v in config.sweep_values() for r in range(config.replicates)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_cell_job, cells))
    else:
        chunks = [_cell_job(c) for c in cells]
    rows = [row for chunk in chunks for row in chunk]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(results_to_csv(rows))
        summary = summarize(rows)
        (out / "summary.csv").write_text(summary_to_csv(summary))
        (out / "summary.txt").write_text(summary_to_text(summary))
        if config.record_timings:
            (out / "timings.csv").write_text(timings_to_csv(rows))
    return rows


def results_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()


def timings_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep", "value", "replicate", "method", "wall_time"])
    for r in rows:
        w.writerow([r.sweep, r.value, r.replicate, r.method, f"{r.wall_time:.6f}"])
    return buf.getvalue()


def read_results(path) -> List[ResultRow]:
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty results file") from None
    if header != RESULT_HEADER:
        raise DataError(f"{path}: unexpected header {header}")
    num = lambda s: float("nan") if s == "NA" else float(s)
    rows = []
    for rec in reader:
        if len(rec) != len(RESULT_HEADER):
            raise DataError(f"{path}: malformed row {rec}")
        rows.append(ResultRow(rec[0], rec[1], int(rec[2]), rec[3], num(rec[4]), num(rec[5]),
                              num(rec[6]), num(rec[7]), rec[8]))
    if not rows:
        raise DataError(f"{path}: no result rows")
    return rows


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    sweep: str
    value: str
    method: str
    replicates: int
    mean_mse: float
    ci_half_width: float
    mean_dr_point: float

    @property
    def ci_lo(self) -> float:
        return self.mean_mse - self.ci_half_width

    @property
    def ci_hi(self) -> float:
        return self.mean_mse + self.ci_half_width


def mean_ci(values) -> Tuple[float, float]:
    """Mean and normal-approximation 95% half-width 1.96 sd / sqrt(R); NaN half-width when R = 1."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    if x.size == 1:
        return float(x[0]), float("nan")
    return float(x.mean()), 1.96 * float(x.std(ddof=1)) / math.sqrt(x.size)


def summarize(rows: Sequence[ResultRow]) -> List[SummaryRow]:
    """Aggregate successful rows per (sweep value, method), in first-seen order."""
    if not rows:
        raise DataError("no result rows to summarise")
    groups: Dict[Tuple[str, str, str], List[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.sweep, r.value, r.method), []).append(r)
    out = []
    for (sweep, value, method), members in groups.items():
        ok = [r for r in members if r.status == "ok"]
        mean, half = mean_ci([r.oracle_mse for r in ok])
        dr = [r.dr_point for r in ok if not math.isnan(r.dr_point)]
        out.append(SummaryRow(sweep, value, method, len(ok), mean, half,
                              float(np.mean(dr)) if dr else float("nan")))
    return out


def _fmt(x: float) -> str:
    return "NA" if math.isnan(x) else repr(float(x))


def summary_to_csv(summary: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for s in summary:
        w.writerow([s.sweep, s.value, s.method, s.replicates, _fmt(s.mean_mse),
                    _fmt(s.ci_half_width), _fmt(s.ci_lo), _fmt(s.ci_hi), _fmt(s.mean_dr_point)])
    return buf.getvalue()


def summary_to_text(summary: Sequence[SummaryRow]) -> str:
    def cell(s: SummaryRow) -> str:
        if math.isnan(s.mean_mse):
            return "NA"
        if math.isnan(s.ci_half_width):
            return f"{s.mean_mse:.2f} (NA)"
        return f"{s.mean_mse:.2f} ({s.ci_lo:.2f}, {s.ci_hi:.2f})"

    head = ["sweep", "value", "method", "R", "mean MSE (95% CI)"]
    body = [[s.sweep, s.value, s.method, str(s.replicates), cell(s)] for s in summary]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(r) for r in body]) + "\n"


# --------------------------------------------------------------------------
# coverage study
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CoverageReport:
    methods: Tuple[str, ...]
    true_error: Dict[str, float]
    covered: Dict[str, int]
    lowest: Dict[str, int]
    simulations: int
    estimates: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def fraction_lowest(self, method: str = "DR") -> float:
        return self.lowest.get(method, 0) / self.simulations

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "true_error", "covered", "simulations", "ranked_lowest",
                    "mean_estimate"])
        for m in self.methods:
            w.writerow([m, repr(self.true_error[m]), self.covered[m], self.simulations,
                        self.lowest[m], repr(float(np.mean(self.estimates[m])))])
        return buf.getvalue()


def coverage_study(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> CoverageReport:
    """Fix one trained model per method and test the DR error estimate on fresh test draws.

    Ground truth is the prediction error against Y^a on one large oracle
    test set.  Each simulation draws ``coverage_test_n`` rows, runs the
    two-fold DR MSE estimate and records which intervals cover the truth
    and which method has the lowest point estimate.
    """
    methods = tuple(m for m in config.coverage_methods if m != "JOINT")
    base = config.seed
    train = generate(config.dgp_for(None, config.train_n, base))
    truth_set = generate(config.dgp_for(None, config.truth_n, base + TEST_SEED_OFFSET))
    models = {m: fit_method(m, train.table, config, child_seed(base, 7)) for m in methods}
    true_err = {}
    for m, model in models.items():
        x = truth_set.table.vz if getattr(model, "uses_z", False) else truth_set.table.v
        true_err[m] = oracle_prediction_error(model, x, truth_set.y_potential)
    jobs_args = [(config, models, base, s) for s in range(config.simulations)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sims = list(pool.map(_coverage_job, jobs_args))
    else:
        sims = [_coverage_job(a) for a in jobs_args]
    est = {m: np.array([s[m] for s in sims]) for m in methods}
    bounds = {m: [s[m + "_ci"] for s in sims] for m in methods}
    covered = {m: int(sum(lo <= true_err[m] <= hi for lo, hi in bounds[m])) for m in methods}
    lowest = {m: 0 for m in methods}
    for s in sims:
        lowest[min(methods, key=lambda m: s[m])] += 1
    report = CoverageReport(methods, true_err, covered, lowest, config.simulations, est)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "coverage.csv").write_text(report.to_csv())
    return report


def _coverage_job(args):
    config, models, base, sim = args
    test = generate(config.dgp_for(None, config.coverage_test_n, child_seed(base, 21, sim)))
    est = dr_mse_many(test.table, models, config.treatment, config.specs.pi, config.specs.eta_spec,
                      config.clip_epsilon, child_seed(base, 22, sim))
    out = {}
    for e in est:
        out[e.method] = e.point
        out[e.method + "_ci"] = (e.ci_lo, e.ci_hi)
    return out

"""Monte Carlo harness: data generators, replicate runner and metric tables."""

from __future__ import annotations

import csv
import io
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit

from .causal import external_design, fit_integrated_iptw, fit_iptw
from .core import Dataset, ExternalSummary
from .estimating import sandwich_covariance
from .exceptions import ConfigInvalid, NumericalError, TooManyFailures
from .gim import fit_cml, fit_gim
from .glm import fit_logistic, full_design, logistic_score_spec, reduced_design
from .integrator import fit_integrated
from .parallel import map_ordered

__all__ = [
    "GLM_BETA",
    "PS_GAMMA",
    "BETA_A0",
    "BETA_A1",
    "TRUE_MSM_REFERENCE",
    "ScenarioConfig",
    "MetricRow",
    "MetricsTable",
    "replicate_stream",
    "gen_covariates",
    "gen_glm_scenario",
    "gen_causal_scenario",
    "true_msm_coefficients",
    "true_causal_beta",
    "external_summary_glm",
    "external_summary_causal",
    "run_monte_carlo",
    "format_table",
]

GLM_BETA = np.array([1.0, 1.0, 1.0, 1.0, 1.0])  # intercept, X1, X2, X3, Z
PS_GAMMA = np.array([0.5, 0.5, 0.5, 0.5, 0.5])  # intercept, Z, X1, X2, X3
BETA_A0 = np.array([-0.5, 0.5, -0.5, 0.5, -0.5])  # intercept, Z, X1, X2, X3
BETA_A1 = np.array([0.5, -0.5, 0.5, -0.5, 0.5])

# true_msm_coefficients(seed=20240515, n=200_000), frozen
TRUE_MSM_REFERENCE = np.array([-0.16934353481065129, 0.3429784681771754])

GLM_ESTIMATORS = ("MLE", "IB_New", "IB_GIM", "CML")
CAUSAL_ESTIMATORS = ("IPTW", "IB_IPTW")
BASELINE = {"glm": "MLE", "causal": "IPTW"}
PARAMETERS = {
    "glm": ("beta0", "beta1", "beta2", "beta3", "beta4"),
    "causal": ("beta0", "beta1"),
}
MAX_FAILURE_RATE = 0.10

STREAM_INTERNAL = 0
STREAM_EXTERNAL = 1
STREAM_TRUTH = 2


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str
    n1: int
    ratio: float
    replicates: int
    seed: int
    estimators: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in BASELINE:
            raise ConfigInvalid(f"kind must be 'glm' or 'causal', got {self.kind!r}")
        if int(self.n1) < 50:
            raise ConfigInvalid("n1 must be at least 50")
        if not self.ratio > 0:
            raise ConfigInvalid("ratio must be positive")
        if int(self.replicates) < 1:
            raise ConfigInvalid("replicates must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigInvalid("seed must be a 64-bit unsigned integer")
        allowed = GLM_ESTIMATORS if self.kind == "glm" else CAUSAL_ESTIMATORS
        ests = tuple(self.estimators) or (allowed[:3] if self.kind == "glm" else allowed)
        unknown = set(ests) - set(allowed)
        if unknown:
            raise ConfigInvalid(f"estimators {sorted(unknown)} not available for kind={self.kind}")
        base = BASELINE[self.kind]
        ordered = (base,) + tuple(e for e in allowed if e in ests and e != base)
        object.__setattr__(self, "estimators", ordered)
        object.__setattr__(self, "n1", int(self.n1))
        object.__setattr__(self, "replicates", int(self.replicates))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "ratio", float(self.ratio))

    @property
    def n2(self) -> int:
        return max(1, int(round(self.ratio * self.n1)))

    @property
    def label(self) -> str:
        return f"{self.kind}_n1={self.n1}_r={self.ratio:g}"


def replicate_stream(seed: int, replicate: int, purpose: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, replicate, purpose)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replicate), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


def gen_covariates(n: int, rng: np.random.Generator):
    """``Z ~ U(0,1)``, ``X1 ~ N(Z,1)``, ``X2 ~ Bern(expit(Z))``, ``X3 ~ N(0,1)``."""
    z = rng.uniform(0.0, 1.0, n)
    x1 = rng.normal(z, 1.0)
    x2 = (rng.uniform(size=n) < expit(z)).astype(float)
    x3 = rng.normal(0.0, 1.0, n)
    return z, x1, x2, x3


def gen_glm_scenario(n: int, rng: np.random.Generator, beta=GLM_BETA) -> Dataset:
    z, x1, x2, x3 = gen_covariates(n, rng)
    b = np.asarray(beta, dtype=float)
    eta = b[0] + b[1] * x1 + b[2] * x2 + b[3] * x3 + b[4] * z
    y = (rng.uniform(size=n) < expit(eta)).astype(float)
    return Dataset(y=y, x=np.column_stack([x1, x2, x3]), z=z[:, None],
                   x_names=("x1", "x2", "x3"), z_names=("z",))


def _potential_outcomes(rng, z, x1, x2, x3, beta_a0, beta_a1):
    cov = np.column_stack([np.ones_like(z), z, x1, x2, x3])
    y0 = (rng.uniform(size=z.shape[0]) < expit(cov @ np.asarray(beta_a0, float))).astype(float)
    y1 = (rng.uniform(size=z.shape[0]) < expit(cov @ np.asarray(beta_a1, float))).astype(float)
    return y0, y1


def gen_causal_scenario(n: int, rng: np.random.Generator, gamma=PS_GAMMA,
                        beta_a0=BETA_A0, beta_a1=BETA_A1):
    """Causal design; returns ``(data, potential_outcomes)`` with columns ``(Y(0), Y(1))``."""
    z, x1, x2, x3 = gen_covariates(n, rng)
    cov = np.column_stack([np.ones(n), z, x1, x2, x3])
    a = (rng.uniform(size=n) < expit(cov @ np.asarray(gamma, float))).astype(float)
    y0, y1 = _potential_outcomes(rng, z, x1, x2, x3, beta_a0, beta_a1)
    y = np.where(a == 1, y1, y0)
    data = Dataset(y=y, x=np.column_stack([x1, x2, x3]), z=z[:, None], a=a,
                   x_names=("x1", "x2", "x3"), z_names=("z",))
    return data, np.column_stack([y0, y1])


def true_msm_coefficients(seed: int, n: int = 200_000, beta_a0=BETA_A0, beta_a1=BETA_A1):
    """MSM intercept and log odds ratio from ``n`` simulated potential-outcome pairs."""
    rng = replicate_stream(seed, 0, STREAM_TRUTH)
    z, x1, x2, x3 = gen_covariates(n, rng)
    y0, y1 = _potential_outcomes(rng, z, x1, x2, x3, beta_a0, beta_a1)
    m0, m1 = y0.mean(), y1.mean()
    return np.array([logit(m0), logit(m1) - logit(m0)])


def true_causal_beta(seed: int, n: int = 200_000, beta_a0=BETA_A0, beta_a1=BETA_A1) -> float:
    """True marginal causal log odds ratio by potential-outcome simulation."""
    return float(true_msm_coefficients(seed, n, beta_a0, beta_a1)[1])


def _summary_from(data: Dataset, design) -> ExternalSummary:
    d = design(data)
    fit = fit_logistic(d, data.y)
    spec = logistic_score_spec(design, d.shape[1])
    cov = sandwich_covariance(spec, data, fit.beta)
    # v_hat is the covariance of sqrt(n2) * (theta_hat - theta0)
    return ExternalSummary(fit.beta, data.n * cov, data.n)


def external_summary_glm(data: Dataset) -> ExternalSummary:
    """Reduced logistic model ``Y ~ (1, X)`` fitted on external data."""
    return _summary_from(data, reduced_design)


def external_summary_causal(data: Dataset) -> ExternalSummary:
    """Conventional regression ``Y ~ (1, A, Z, X)`` fitted on external data."""
    return _summary_from(data, external_design)


def _timed(fn):
    t0 = time.perf_counter()
    try:
        out = fn()
    except NumericalError:
        return None, time.perf_counter() - t0
    return np.asarray(out, dtype=float), time.perf_counter() - t0


def _glm_replicate(cfg: ScenarioConfig, rep: int):
    internal = gen_glm_scenario(cfg.n1, replicate_stream(cfg.seed, rep, STREAM_INTERNAL))
    external = gen_glm_scenario(cfg.n2, replicate_stream(cfg.seed, rep, STREAM_EXTERNAL))
    out = {}
    mle, t_mle = _timed(lambda: fit_logistic(full_design(internal), internal.y).beta)
    out["MLE"] = (mle, t_mle)
    try:
        summary = external_summary_glm(external)
    except NumericalError:
        summary = None
    init = mle if mle is not None else np.zeros(internal.p_x + internal.p_z + 1)
    psi = logistic_score_spec(reduced_design, 1 + internal.p_x, name="reduced score")
    g = logistic_score_spec(full_design, 1 + internal.p_x + internal.p_z, name="full score")
    fits = {
        "IB_New": lambda: fit_integrated(internal, [summary], psi, g, init).beta,
        "IB_GIM": lambda: fit_gim(internal, summary, init).beta,
        "CML": lambda: fit_cml(internal, summary, init).beta,
    }
    for name in cfg.estimators[1:]:
        out[name] = (None, 0.0) if summary is None else _timed(fits[name])
    return out


def _causal_replicate(cfg: ScenarioConfig, rep: int):
    internal, _ = gen_causal_scenario(cfg.n1, replicate_stream(cfg.seed, rep, STREAM_INTERNAL))
    external, _ = gen_causal_scenario(cfg.n2, replicate_stream(cfg.seed, rep, STREAM_EXTERNAL))
    out = {}
    base = None
    t0 = time.perf_counter()
    try:
        base = fit_iptw(internal)
        out["IPTW"] = (base.beta_msm.copy(), time.perf_counter() - t0)
    except NumericalError:
        out["IPTW"] = (None, time.perf_counter() - t0)
    if "IB_IPTW" in cfg.estimators:
        try:
            summary = external_summary_causal(external)
        except NumericalError:
            out["IB_IPTW"] = (None, 0.0)
            return out
        init = None if base is None else np.concatenate([base.beta_msm, base.gamma])
        out["IB_IPTW"] = _timed(lambda: fit_integrated_iptw(internal, summary, init).beta_msm)
    return out


def _run_replicate(cfg: ScenarioConfig, rep: int):
    if cfg.kind == "glm":
        return _glm_replicate(cfg, rep)
    return _causal_replicate(cfg, rep)


@dataclass(frozen=True)
class MetricRow:
    scenario: str
    estimator: str
    parameter: str
    bias: float
    mcsd: float
    re: float
    failures: int
    mean_runtime_s: float


CSV_COLUMNS = ("scenario", "estimator", "parameter", "bias", "mcsd", "re", "failures", "mean_runtime_s")


@dataclass
class MetricsTable:
    config: ScenarioConfig
    rows: list[MetricRow]
    estimates: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    runtimes: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    truth: NDArray[np.float64] | None = None

    def row(self, estimator: str, parameter: str) -> MetricRow:
        for r in self.rows:
            if r.estimator == estimator and r.parameter == parameter:
                return r
        raise KeyError((estimator, parameter))

    def failures(self, estimator: str) -> int:
        return self.row(estimator, PARAMETERS[self.config.kind][0]).failures

    def to_csv(self, fh=None, header: bool = True, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = CSV_COLUMNS if timing else CSV_COLUMNS[:-1]
        if header:
            w.writerow(cols)
        for r in self.rows:
            vals = [r.scenario, r.estimator, r.parameter, f"{r.bias:.6f}", f"{r.mcsd:.6f}",
                    f"{r.re:.6f}", str(r.failures)]
            if timing:
                vals.append(f"{r.mean_runtime_s:.6f}")
            w.writerow(vals)
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _metrics(cfg: ScenarioConfig, results: list[dict], truth) -> MetricsTable:
    params = PARAMETERS[cfg.kind]
    dim = len(params)
    estimates, runtimes = {}, {}
    for est in cfg.estimators:
        arr = np.full((cfg.replicates, dim), np.nan)
        rt = np.zeros(cfg.replicates)
        for i, res in enumerate(results):
            val, secs = res[est]
            rt[i] = secs
            if val is not None and np.all(np.isfinite(val)):
                arr[i] = val[:dim]
        estimates[est], runtimes[est] = arr, rt
    base = BASELINE[cfg.kind]

    def mse(arr, j):
        ok = arr[~np.isnan(arr[:, j]), j]
        return float(np.mean((ok - truth[j]) ** 2)) if ok.size else np.nan

    rows = []
    for est in cfg.estimators:
        arr = estimates[est]
        ok_mask = ~np.isnan(arr[:, 0])
        fails = int(cfg.replicates - ok_mask.sum())
        if fails > MAX_FAILURE_RATE * cfg.replicates:
            raise TooManyFailures(f"{cfg.label}: {est} failed in {fails} of {cfg.replicates} replicates")
        ok = arr[ok_mask]
        mean_rt = float(runtimes[est][ok_mask].mean()) if ok_mask.any() else np.nan
        for j, name in enumerate(params):
            bias = float(ok[:, j].mean() - truth[j]) if ok.size else np.nan
            mcsd = float(ok[:, j].std(ddof=1)) if ok.shape[0] > 1 else 0.0
            denom = mse(arr, j)
            re = mse(estimates[base], j) / denom if denom > 0 else np.inf
            rows.append(MetricRow(cfg.label, est, name, bias, mcsd, re, fails, mean_rt))
    return MetricsTable(cfg, rows, estimates, runtimes, np.asarray(truth, dtype=float))


def run_monte_carlo(cfg: ScenarioConfig, threads: int | None = 1, truth=None) -> MetricsTable:
    """Run ``cfg.replicates`` replicates and aggregate bias, MCSD and RE.

    Each replicate's internal and external data come from streams keyed by
    ``(seed, replicate)``, so results do not depend on ``threads``.
    ``truth`` defaults to the generating coefficients (GLM) or the frozen
    potential-outcome reference (causal).
    """
    if truth is None:
        truth = GLM_BETA if cfg.kind == "glm" else TRUE_MSM_REFERENCE
    results = map_ordered(partial(_run_replicate, cfg), range(cfg.replicates), threads=threads)
    return _metrics(cfg, results, truth)


_DISPLAY = {"MLE": "GLM"}


def format_table(tables: Sequence[MetricsTable], parameters: Sequence[str] | None = None) -> str:
    """Plain-text layout with one block per ``n1`` and one column group per ratio."""
    if not tables:
        return ""
    kind = tables[0].config.kind
    if parameters is None:
        parameters = ("beta1", "beta2", "beta3") if kind == "glm" else ("beta1",)
    ratios = sorted({t.config.ratio for t in tables})
    n1s = sorted({t.config.n1 for t in tables})
    lookup = {(t.config.n1, t.config.ratio): t for t in tables}
    width = 9
    head = f"{'':<8}{'':<10}" + "".join(
        f"{('r=' + format(r, 'g')):^{width * len(parameters)}}" for r in ratios
    )
    sub = f"{'':<8}{'':<10}" + "".join(f"{p:>{width}}" for _ in ratios for p in parameters)
    lines = [head, sub]
    base = BASELINE[kind]
    for n1 in n1s:
        lines.append(f"n1={n1}")
        ests = next(lookup[(n1, r)] for r in ratios if (n1, r) in lookup).config.estimators
        for metric in ("bias", "mcsd", "re"):
            for est in ests:
                if metric == "re" and est == base:
                    continue
                label = _DISPLAY.get(est, est) + ("_RE" if metric == "re" else "")
                cells = []
                for r in ratios:
                    t = lookup.get((n1, r))
                    for p in parameters:
                        cells.append(f"{getattr(t.row(est, p), metric):>{width}.3f}" if t else " " * width)
                lines.append(f"{'' if metric == 're' else metric.upper():<8}{label:<10}" + "".join(cells))
        fails = {e: lookup[(n1, r)].failures(e) for r in ratios if (n1, r) in lookup for e in ests}
        lines.append("        failures: " + ", ".join(f"{_DISPLAY.get(e, e)}={v}" for e, v in fails.items()))
    lines.append("runtimes cover the estimator fit call only, not data generation")
    return "\n".join(lines) + "\n"

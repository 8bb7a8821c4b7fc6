"""End-to-end analyses: fit, split-fit, the two case studies and the null check."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import conflict as cf
from . import engine as en
from . import graph as gr
from . import hiv
from . import nma
from .mvn import DEFAULT_POINTS

MCSE_TOLERANCE = 0.01

# run lengths giving MCSE below tolerance on the transformed scale
NMA_PROFILE = dict(iterations=60000, burn_in=20000, thin=4)
HIV_PROFILE = dict(iterations=200000, burn_in=40000, thin=16)


@dataclass(frozen=True)
class ConflictOptions:
    n_points: int = DEFAULT_POINTS
    pinv_tol: float = cf.PINV_TOL
    pvalue_method: str = "tail"
    mvn_seed: int = 0

    def __post_init__(self):
        if self.pvalue_method not in cf.PVALUE_METHODS:
            raise ValueError(f"pvalue method must be one of {cf.PVALUE_METHODS}")
        if self.n_points < 2:
            raise ValueError("n_points must be at least 2")
        if not self.pinv_tol > 0:
            raise ValueError("pinv_tol must be positive")


@dataclass
class FitResult:
    name: str
    graph: gr.ModelGraph
    samples: en.PosteriorSamples
    deviance: en.DevianceSummary
    split: Optional[gr.SplitModel] = None
    contrasts: Optional[cf.ContrastSet] = None
    report: Optional[cf.ConflictReport] = None
    extra: dict = field(default_factory=dict)


def transformed(g: gr.ModelGraph, s: en.PosteriorSamples, node: str) -> np.ndarray:
    """Draws of ``node`` per chain on its unconstrained scale."""
    x = s.chains_of(node)
    sup = g[node].support if node in g else gr.REAL
    with np.errstate(all="ignore"):
        if sup == gr.UNIT:
            return np.log(x) - np.log1p(-x)
        if sup == gr.POSITIVE:
            return np.log(x)
    return x


def posterior_summary(g: gr.ModelGraph, s: en.PosteriorSamples,
                      names: Optional[Sequence[str]] = None) -> list:
    """Rows: node, mean, sd, 2.5%, 50%, 97.5%, MCSE and PSRF on the transformed scale."""
    names = [n for n in (names or s.names) if n in s]
    rows = []
    for n in names:
        x = s[n]
        q = np.quantile(x, [0.025, 0.5, 0.975])
        t = transformed(g, s, n)
        if not np.all(np.isfinite(t)):
            # draws on the boundary (indicators, for instance) stay on the natural scale
            t = s.chains_of(n)
        if np.ptp(t) == 0:
            rows.append(dict(node=n, mean=float(x.mean()), sd=0.0, q025=float(q[0]),
                             median=float(q[1]), q975=float(q[2]), mcse=0.0, psrf=1.0))
            continue
        per = np.array([en.batch_means_se(c) for c in t])
        mcse = float(math.sqrt(np.sum(per ** 2)) / len(per))
        t_s = en.PosteriorSamples({n: 0}, t[:, :, None], s.deviance_trace)
        rows.append(dict(node=n, mean=float(x.mean()), sd=float(x.std(ddof=1)),
                         q025=float(q[0]), median=float(q[1]), q975=float(q[2]),
                         mcse=mcse, psrf=en.psrf(t_s, n)))
    return rows


def mcse_warnings(rows: list, tol: float = MCSE_TOLERANCE) -> list:
    return [r["node"] for r in rows if not r["mcse"] <= tol]


def fit(g: gr.ModelGraph, cfg: en.SamplerConfig, name: str = "model") -> FitResult:
    s = en.sample(g, cfg)
    return FitResult(name, g, s, en.deviance_summary(g, s))


def split_fit(sm: gr.SplitModel, spec: gr.SplitSpec, cfg: en.SamplerConfig,
              opts: ConflictOptions = ConflictOptions(), name: str = "split",
              check_convergence: bool = True) -> FitResult:
    s = en.sample(sm.graph, cfg, check_convergence=check_convergence)
    cs = cf.build_contrasts(sm, s, spec)
    rep = cf.maxT_adjust(cs, n_points=opts.n_points, seed=opts.mvn_seed,
                         pvalue_method=opts.pvalue_method, pinv_tol=opts.pinv_tol)
    return FitResult(name, sm.graph, s, en.deviance_summary(sm.graph, s), sm, cs, rep)


# ---------------------------------------------------------------------------
# network meta-analysis


def smoking_consistency(effect_model: str, cfg: en.SamplerConfig) -> FitResult:
    g = nma.build_nma_graph(nma.smoking_arms(), nma.NmaSpec(effect_model=effect_model))
    return fit(g, cfg, f"smoking-{effect_model}")


def smoking_scheme(key: str, cfg: en.SamplerConfig,
                   opts: ConflictOptions = ConflictOptions(),
                   effect_model: str = nma.RANDOM) -> FitResult:
    schemes = nma.smoking_schemes()
    if key not in schemes:
        raise ValueError(f"unknown smoking scheme {key!r}; choose from {sorted(schemes)}")
    g = nma.build_nma_graph(nma.smoking_arms(), nma.NmaSpec(effect_model=effect_model))
    sm, spec = nma.split_nma(g, schemes[key])
    # weakly identified copies mix slowly by construction; convergence is
    # summarised in the posterior table instead of warned about here
    return split_fit(sm, spec, cfg, opts, f"smoking-scheme-{key}", check_convergence=False)


# ---------------------------------------------------------------------------
# HIV


def hiv_original(cfg: en.SamplerConfig, data: hiv.HivData = hiv.HivData()) -> FitResult:
    return fit(hiv.build_hiv_graph(data), cfg, "hiv-original")


def hiv_saturated(cfg: en.SamplerConfig, opts: ConflictOptions = ConflictOptions(),
                  data: hiv.HivData = hiv.HivData()) -> FitResult:
    sm, spec = hiv.saturated_split(hiv.build_hiv_graph(data))
    return split_fit(sm, spec, cfg, opts, "hiv-saturated")


@dataclass
class LeaveOutTable:
    fits: list            # FitResult per model, leave-1 then leave-2
    specs: list           # LeaveOutSpec per model
    p_within: list        # per model: max-T within the model
    p_family: list        # per model: pooled over its leave-n family
    p_all: list           # per model: pooled over both families

    def rows(self, family: Optional[int] = None) -> list:
        out = []
        for f, lo, pw, pl, pa in zip(self.fits, self.specs, self.p_within, self.p_family,
                                     self.p_all):
            if family is not None and len(lo.left_out) != family:
                continue
            r = f.report
            for k in range(r.p):
                out.append(dict(family=lo.family, model=lo.model,
                                partition1="+".join(lo.left_out),
                                label=r.labels[k], mean=float(r.delta_mean[k]),
                                sd=float(r.delta_sd[k]), p_U=float(r.p_conflict[k]),
                                p_AW=float(pw[k]), p_AL=float(pl[k]), p_AA=float(pa[k]),
                                flags=r.flags(k)))
        return out


def _fit_leave_out(args):
    n, i, data, cfg, opts = args
    lo, sm = hiv.leave_n_out_splits(hiv.build_hiv_graph(data), n)[i]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", en.NonConvergence)
        return split_fit(sm, lo.spec, cfg, opts, lo.name)


def hiv_leave_n_out(cfg: en.SamplerConfig, opts: ConflictOptions = ConflictOptions(),
                    data: hiv.HivData = hiv.HivData(), workers: int = 1) -> LeaveOutTable:
    """All leave-1-out and leave-2-out models with within, family and overall adjustment."""
    g = hiv.build_hiv_graph(data)
    specs = [lo for n in (1, 2) for lo, _ in hiv.leave_n_out_splits(g, n)]
    jobs = [(n, i, data, cfg, opts) for n in (1, 2) for i in range(len(hiv.LEAVE_OUT_ORDER[n]))]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            fits = list(ex.map(_fit_leave_out, jobs))
    else:
        fits = [_fit_leave_out(j) for j in jobs]
    reports = [f.report for f in fits]
    fam = [lo.family for lo in specs]
    kw = dict(n_points=opts.n_points, seed=opts.mvn_seed)
    # leave-1-out models hold one contrast each, so "within" is p_U-like;
    # Table-style p_AW is only reported for the leave-2-out family
    within = cf.adjust_across_models(reports, "within")
    family = cf.adjust_across_models(reports, "per_family", fam, **kw)
    pooled = cf.adjust_across_models(reports, "all", **kw)
    return LeaveOutTable(fits, specs, within, family, pooled)


# ---------------------------------------------------------------------------
# null uniformity of the conflict p-value


@dataclass(frozen=True)
class NullReport:
    pvalues: np.ndarray
    ks_statistic: float
    ks_pvalue: float
    fraction_below_05: float
    replicates: int
    shift: float
    method: str

    def as_dict(self) -> dict:
        return dict(replicates=self.replicates, shift_sd=self.shift, pvalue_method=self.method,
                    ks_statistic=self.ks_statistic, ks_pvalue=self.ks_pvalue,
                    fraction_below_0_05=self.fraction_below_05)


def _null_graph(y1: float, y2: float, s1: float, s2: float, prior_sd: float) -> gr.ModelGraph:
    prior = f"normal(0, {prior_sd!r})"
    return gr.ModelGraph([
        gr.founder("theta", prior),
        gr.observed("y1", f"normal(theta, {s1!r})", y1),
        gr.observed("y2", f"normal(theta, {s2!r})", y2),
    ])


def simulate_null(replicates: int, seed: int = 1, shift: float = 0.0,
                  method: str = "tail", cfg: Optional[en.SamplerConfig] = None,
                  s1: float = 1.0, s2: float = 1.0, prior_sd: float = 100.0) -> NullReport:
    """Distribution of the conflict p-value in a normal-normal two-partition model.

    Each replicate draws two data points with common mean (plus ``shift``
    times the sd of the contrast for the second), splits ``theta`` between
    them, fits the split model by MCMC and records the unadjusted p-value.
    """
    if replicates < 100:
        raise ValueError("simulate_null needs at least 100 replicates")
    if method not in cf.PVALUE_METHODS:
        raise ValueError(f"unknown pvalue method {method!r}")
    cfg = cfg or en.SamplerConfig(chains=2, iterations=6000, burn_in=1000, thin=5, seed=seed)
    sd_delta = math.sqrt(s1 * s1 + s2 * s2)
    spec = gr.SplitSpec(("theta",), (gr.Partition("1", ("y1",)), gr.Partition("2", ("y2",))),
                        {"theta": [gr.CopySpec("1"), gr.CopySpec("2")]})
    p = np.empty(replicates)
    for r in range(replicates):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r, 0x6E756C6C]))
        theta = rng.normal(0.0, 1.0)
        y1 = float(rng.normal(theta, s1))
        y2 = float(rng.normal(theta + shift * sd_delta, s2))
        sm = gr.split(_null_graph(y1, y2, s1, s2, prior_sd), spec)
        c = replace(cfg, seed=int(rng.integers(2 ** 31)))
        s = en.sample(sm.graph, c, check_convergence=False)
        cs = cf.build_contrasts(sm, s, spec)
        p[r] = cf.single_conflict_pvalue(cs.delta_draws[:, 0], method)
    ks = stats.kstest(p, "uniform")
    return NullReport(p, float(ks.statistic), float(ks.pvalue), float(np.mean(p < 0.05)),
                      replicates, float(shift), method)

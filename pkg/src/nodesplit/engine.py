"""Adaptive Metropolis-within-Gibbs sampler and deviance summaries.

Each stochastic node is updated by a Gaussian random walk on its sampling
scale (logit for unit-interval nodes, log for positive nodes, identity
otherwise). Declared blocks are updated jointly with a proposal shaped by
the empirical covariance collected during burn-in. Step sizes adapt only
during burn-in, so the kept draws come from a homogeneous Markov chain.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from numba import njit

from . import graph as gr
from .tape import (Tape, compile_graph, from_sampling,
                   full_logp, log_jacobian, run_instructions, sum_factors, to_sampling)


class SamplerError(RuntimeError):
    pass


class InitialisationFailure(SamplerError):
    pass


class NonConvergence(UserWarning):
    """Advisory: split-chain potential scale reduction above threshold."""


PSRF_THRESHOLD = 1.05


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 60000
    burn_in: int = 20000
    thin: int = 4
    seed: int = 1
    adapt_window: int = 50
    target_accept: float = 0.44
    block_target_accept: float = 0.234

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be at least 1")
        if not 0 < self.target_accept < 1 or not 0 < self.block_target_accept < 1:
            raise ValueError("target acceptance rates must lie in (0, 1)")

    @property
    def kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class PosteriorSamples:
    """Kept draws, shape ``(chains, kept, nodes)``, plus the deviance trace."""

    node_index: dict
    draws: np.ndarray
    deviance_trace: np.ndarray
    acceptance: dict = field(default_factory=dict)
    config: Optional[SamplerConfig] = None

    @property
    def names(self) -> list:
        return list(self.node_index)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    def __contains__(self, name):
        return name in self.node_index

    def chains_of(self, name: str) -> np.ndarray:
        """Draws of one node, shape ``(chains, kept)``."""
        return self.draws[:, :, self.node_index[name]]

    def __getitem__(self, name: str) -> np.ndarray:
        """Pooled draws of one node."""
        return self.chains_of(name).reshape(-1)

    def mean(self, name: str) -> float:
        return float(self[name].mean())

    def sd(self, name: str) -> float:
        return float(self[name].std(ddof=1))

    def to_csv(self, path, names=None) -> None:
        names = list(self.node_index) if names is None else list(names)
        cols = [self.node_index[n] for n in names]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain"] + names)
            for c in range(self.n_chains):
                block = self.draws[c][:, cols]
                for row in block:
                    w.writerow([c + 1] + [repr(float(v)) for v in row])


def read_samples_csv(path) -> PosteriorSamples:
    """Inverse of :meth:`PosteriorSamples.to_csv` (deviance trace not stored)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    names = header[1:]
    chain = np.array([int(r[0]) for r in body])
    vals = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(names))
    ids = np.unique(chain)
    draws = np.stack([vals[chain == c] for c in ids])
    return PosteriorSamples({n: i for i, n in enumerate(names)}, draws,
                            np.full(draws.shape[:2], np.nan))


# ---------------------------------------------------------------------------
# numba chain kernel


@njit(cache=True, nogil=True)
def _cholesky(a, out):
    """Lower Cholesky factor of a small SPD matrix; returns False if not PD."""
    d = a.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = 0.0
    for j in range(d):
        s = a[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not s > 0.0:
            return False
        out[j, j] = np.sqrt(s)
        for i in range(j + 1, d):
            s = a[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / out[j, j]
    return True


@njit(cache=True, error_model="numpy", nogil=True)
def _run_chain(val, ins, fac, unit_ptr, unit_slots, unit_tr, ins_ptr, ins_idx,
               det_ptr, det_slots, fac_ptr, fac_idx, keep_slots,
               iterations, burn_in, thin, window, target1, targetb, rng_seed, log_scale, chol):
    np.random.seed(rng_seed)
    n_units = unit_ptr.shape[0] - 1
    dmax = chol.shape[1]
    n_kept = (iterations - burn_in) // thin
    out = np.empty((n_kept, keep_slots.shape[0]))
    accepted = np.zeros(n_units)
    tried = np.zeros(n_units)
    acc_window = np.zeros(n_units)
    batch = 0
    # running moments for block proposals
    s1 = np.zeros((n_units, dmax))
    s2 = np.zeros((n_units, dmax, dmax))
    ns = np.zeros(n_units)
    shaped = np.zeros(n_units, dtype=np.bool_)
    z_old = np.empty(dmax)
    z_new = np.empty(dmax)
    eps = np.empty(dmax)
    x_old = np.empty(dmax)
    saved_det = np.empty(max(det_slots.shape[0], 1))
    cov = np.empty((dmax, dmax))
    lnew = np.empty((dmax, dmax))
    kept = 0
    for it in range(iterations):
        for u in range(n_units):
            a, b = unit_ptr[u], unit_ptr[u + 1]
            d = b - a
            ia, ib = ins_ptr[u], ins_ptr[u + 1]
            da, db = det_ptr[u], det_ptr[u + 1]
            fidx = fac_idx[fac_ptr[u]:fac_ptr[u + 1]]
            lp_old = sum_factors(val, fac, fidx)
            step = np.exp(log_scale[u])
            for k in range(d):
                x_old[k] = val[unit_slots[a + k]]
                z_old[k] = to_sampling(x_old[k], unit_tr[a + k])
                lp_old += log_jacobian(z_old[k], unit_tr[a + k])
                eps[k] = np.random.standard_normal()
            for k in range(d):
                s = 0.0
                for l in range(k + 1):
                    s += chol[u, k, l] * eps[l]
                z_new[k] = z_old[k] + step * s
            for t in range(da, db):
                saved_det[t - da] = val[det_slots[t]]
            lp_new = 0.0
            for k in range(d):
                val[unit_slots[a + k]] = from_sampling(z_new[k], unit_tr[a + k])
                lp_new += log_jacobian(z_new[k], unit_tr[a + k])
            run_instructions(val, ins, ins_idx[ia:ib])
            lp_new += sum_factors(val, fac, fidx)
            tried[u] += 1.0
            ok = lp_new == lp_new and lp_new > -np.inf and \
                np.log(np.random.random_sample()) < lp_new - lp_old
            if ok:
                accepted[u] += 1.0
                acc_window[u] += 1.0
            else:
                for k in range(d):
                    val[unit_slots[a + k]] = x_old[k]
                for t in range(da, db):
                    val[det_slots[t]] = saved_det[t - da]
            if d > 1 and it < burn_in and it >= window:
                for k in range(d):
                    zk = to_sampling(val[unit_slots[a + k]], unit_tr[a + k])
                    z_new[k] = zk
                    s1[u, k] += zk
                for k in range(d):
                    for l in range(d):
                        s2[u, k, l] += z_new[k] * z_new[l]
                ns[u] += 1.0
        if it < burn_in and (it + 1) % window == 0:
            gain = 3.0 / np.sqrt(batch + 1.0)
            for u in range(n_units):
                d = unit_ptr[u + 1] - unit_ptr[u]
                target = target1 if d == 1 else targetb
                log_scale[u] += (acc_window[u] / window - target) * gain
                acc_window[u] = 0.0
                if d > 1 and ns[u] >= 20.0 * d:
                    n = ns[u]
                    for k in range(d):
                        for l in range(d):
                            cov[k, l] = s2[u, k, l] / n - s1[u, k] * s1[u, l] / (n * n)
                        cov[k, k] += 1e-10
                    sub = cov[:d, :d].copy()
                    lsub = lnew[:d, :d].copy()
                    if _cholesky(sub, lsub):
                        for k in range(d):
                            for l in range(d):
                                chol[u, k, l] = lsub[k, l]
                        if not shaped[u]:
                            log_scale[u] = np.log(2.38 / np.sqrt(d))
                            shaped[u] = True
            batch += 1
        if it >= burn_in and (it - burn_in) % thin == thin - 1:
            for k in range(keep_slots.shape[0]):
                out[kept, k] = val[keep_slots[k]]
            kept += 1
    return out, accepted, tried


@njit(cache=True, error_model="numpy", nogil=True)
def _valid_start(val, ins, all_ins, fac, all_fac):
    lp = full_logp(val, ins, all_ins, fac, all_fac)
    return lp == lp and lp > -np.inf


# ---------------------------------------------------------------------------
# initialisation


def _draw_from_prior(nd: gr.NodeDef, env: Mapping[str, float], rng: np.random.Generator) -> float:
    a = [p[1] if p[0] == "const" else env[p[1]] for p in nd.dist.params]
    k = nd.dist.kind
    if k == "normal":
        return rng.normal(a[0], a[1])
    if k == "uniform":
        return rng.uniform(a[0], a[1])
    if k == "beta":
        return rng.beta(a[0], a[1])
    if k == "lognormal":
        return math.exp(rng.normal(a[0], a[1]))
    if k == "jeffreys_proportion":
        return rng.beta(0.5, 0.5)
    # improper: standard normal on the sampling scale
    z = rng.standard_normal()
    if nd.support == gr.POSITIVE:
        return math.exp(z)
    if nd.support == gr.UNIT:
        return 1.0 / (1.0 + math.exp(-z))
    return z


def initial_values(g: gr.ModelGraph, tape: Tape, rng: np.random.Generator,
                   attempts: int = 1000) -> np.ndarray:
    """Draw a starting point from the priors, rejecting invalid points."""
    for _ in range(attempts):
        val = tape.init_values.copy()
        env = dict(g.constants)
        with np.errstate(all="ignore"):
            for n in tape.names:
                nd = g[n]
                if nd.role == gr.DETERMINISTIC:
                    from .expr import evaluate
                    env[n] = evaluate(nd.expr, env)
                elif nd.role == gr.OBSERVED:
                    env[n] = nd.value
                else:
                    try:
                        env[n] = float(_draw_from_prior(nd, env, rng))
                    except (ValueError, OverflowError):
                        env[n] = math.nan
                    val[tape.slot[n]] = env[n]
        if _valid_start(val, tape.ins, tape.all_ins, tape.fac, tape.all_fac):
            return val
    raise InitialisationFailure(f"no valid initial point found in {attempts} attempts")


def chain_seeds(seed: int, chains: int) -> list:
    return [int(np.random.SeedSequence([seed, c]).generate_state(1, dtype=np.uint32)[0])
            for c in range(chains)]


def _init_rng(seed: int, chain: int) -> np.random.Generator:
    # distinct stream from the sampler's, keyed by a fixed tag
    return np.random.default_rng([seed, chain, 0x696E6974])


# ---------------------------------------------------------------------------
# public API


def sample(g: gr.ModelGraph, cfg: SamplerConfig = SamplerConfig(),
           check_convergence: bool = True) -> PosteriorSamples:
    """Fit ``g`` by adaptive Metropolis-within-Gibbs.

    Results are reproducible bit for bit given the graph and ``cfg``.
    """
    tape = compile_graph(g)
    n_units = len(tape.units)
    dmax = max([len(u) for u in tape.units] + [1])
    if n_units == 0:
        raise SamplerError("graph has no stochastic nodes to sample")
    draws, acc = [], np.zeros(n_units)
    tried = np.zeros(n_units)
    for c, s in enumerate(chain_seeds(cfg.seed, cfg.chains)):
        val = initial_values(g, tape, _init_rng(cfg.seed, c))
        log_scale = np.full(n_units, math.log(0.5))
        chol = np.zeros((n_units, dmax, dmax))
        for u in range(n_units):
            for k in range(dmax):
                chol[u, k, k] = 1.0
        out, a, t = _run_chain(val, tape.ins, tape.fac, tape.unit_ptr, tape.unit_slots,
                               tape.unit_tr, tape.ins_ptr, tape.ins_idx, tape.det_ptr,
                               tape.det_slots, tape.fac_ptr, tape.fac_idx, tape.keep_slots,
                               cfg.iterations, cfg.burn_in, cfg.thin, cfg.adapt_window,
                               cfg.target_accept, cfg.block_target_accept, s, log_scale, chol)
        draws.append(out)
        acc += a
        tried += t
    arr = np.stack(draws)
    index = {n: i for i, n in enumerate(tape.keep_names)}
    acceptance = {"+".join(u): float(acc[i] / tried[i]) for i, u in enumerate(tape.units)}
    samples = PosteriorSamples(index, arr, np.zeros(arr.shape[:2]), acceptance, cfg)
    samples.deviance_trace = deviance_trace(g, samples)
    if check_convergence and cfg.chains * cfg.kept >= 4:
        bad = {n: r for n in g.stochastic_names for r in [psrf(samples, n)]
               if r > PSRF_THRESHOLD}
        if bad:
            worst = max(bad, key=bad.get)
            warnings.warn(f"potential scale reduction above {PSRF_THRESHOLD} for {len(bad)} "
                          f"node(s); worst {worst} = {bad[worst]:.3f}", NonConvergence,
                          stacklevel=2)
    return samples


# ---------------------------------------------------------------------------
# deviance


def _param_arrays(nd: gr.NodeDef, g: gr.ModelGraph, s: PosteriorSamples) -> list:
    out = []
    for p in nd.dist.params:
        if p[0] == "const":
            out.append(np.float64(p[1]))
        elif p[1] in g.constants:
            out.append(np.float64(g.constants[p[1]]))
        else:
            out.append(s.chains_of(p[1]))
    return out


def _xlogy_ratio(y, m):
    # y * log(y / m) with 0 log 0 = 0
    with np.errstate(all="ignore"):
        r = np.where(y > 0, y * (np.log(y) - np.log(m)), 0.0)
    return r


def datum_deviance(kind: str, y: float, params) -> np.ndarray:
    """Saturated deviance of one observation for (arrays of) parameter values."""
    with np.errstate(all="ignore"):
        if kind == "binomial":
            n, p = params
            yhat = n * p
            return 2.0 * (_xlogy_ratio(y, yhat) + _xlogy_ratio(n - y, n - yhat))
        if kind == "poisson":
            (m,) = params
            return 2.0 * (m - y + _xlogy_ratio(y, m))
        if kind == "normal":
            mu, sd = params
            return ((y - mu) / sd) ** 2
        if kind == "bernoulli":
            (p,) = params
            return -2.0 * np.log(np.where(y == 1, p, 1.0 - p))
    raise gr.GraphError(f"no deviance for likelihood {kind!r}")


def deviance_trace(g: gr.ModelGraph, s: PosteriorSamples) -> np.ndarray:
    total = np.zeros((s.n_chains, s.n_kept))
    for n in g.observed_names:
        nd = g[n]
        total = total + datum_deviance(nd.dist.kind, nd.value, _param_arrays(nd, g, s))
    return total


@dataclass(frozen=True)
class DevianceSummary:
    mean_deviance: float
    plugin_deviance: float
    p_D: float
    dic: float
    per_datum: dict

    def as_rows(self) -> list:
        rows = [("total", self.mean_deviance, self.plugin_deviance, self.p_D, self.dic)]
        rows += [(k,) + tuple(v) for k, v in self.per_datum.items()]
        return rows


def deviance_summary(g: gr.ModelGraph, s: PosteriorSamples) -> DevianceSummary:
    """Posterior mean deviance, plug-in deviance at posterior means, p_D and DIC."""
    per = {}
    tot_mean = tot_plug = 0.0
    for n in g.observed_names:
        nd = g[n]
        params = _param_arrays(nd, g, s)
        dbar = float(np.mean(datum_deviance(nd.dist.kind, nd.value, params)))
        means = [float(np.mean(p)) for p in params]
        dhat = float(datum_deviance(nd.dist.kind, nd.value, means))
        pd = dbar - dhat
        per[n] = (dbar, dhat, pd, dbar + pd)
        tot_mean += dbar
        tot_plug += dhat
    p_D = tot_mean - tot_plug
    return DevianceSummary(tot_mean, tot_plug, p_D, tot_mean + p_D, per)


# ---------------------------------------------------------------------------
# diagnostics


def batch_means_se(x: np.ndarray) -> float:
    """Batch-means standard error of the mean of one chain."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.all(x == x[0]):
        return 0.0
    b = max(1, int(math.floor(math.sqrt(n))))
    a = n // b
    means = x[: a * b].reshape(a, b).mean(axis=1)
    return float(math.sqrt(b * means.var(ddof=1) / n))


def mc_standard_error(s: PosteriorSamples, node: str) -> float:
    """Batch-means MCSE of the pooled posterior mean of ``node``."""
    per = np.array([batch_means_se(c) for c in s.chains_of(node)])
    return float(math.sqrt(np.sum(per ** 2)) / len(per))


def psrf(s: PosteriorSamples, node: str) -> float:
    """Split-chain potential scale reduction factor."""
    x = s.chains_of(node)
    h = x.shape[1] // 2
    if h < 2:
        return math.nan
    halves = np.concatenate([x[:, :h], x[:, h:2 * h]])
    w = halves.var(axis=1, ddof=1).mean()
    b = h * halves.mean(axis=1).var(ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else math.inf
    var = (h - 1) / h * w + b / h
    return float(math.sqrt(var / w))

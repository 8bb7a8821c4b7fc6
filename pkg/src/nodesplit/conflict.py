"""Contrasts between separator copies and conflict p-values.

Given draws from a split model, each separator copy is mapped to its
comparison scale (identity, logit or log) and pairwise differences between
partitions form the contrast vector Delta. Conflict is assessed per
contrast (tail-area, density-ordering or normal-theory p-values), with max-T
multiplicity adjustment, and globally with a rank-aware chi-square test.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

from . import graph as gr
from .mvn import DEFAULT_POINTS, mvn_rectangle

PINV_TOL = 1e-8
DIFFUSE_THRESHOLD = 5.0
SKEW_LIMIT = 0.5
KURT_LIMIT = 1.0
MIN_DRAWS = 1000


class ConflictError(ValueError):
    pass


class TransformDomainError(ConflictError):
    pass


class DegenerateDistribution(ConflictError):
    pass


class DimensionMismatch(ConflictError):
    pass


def apply_transform(x: np.ndarray, transform: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise TransformDomainError("non-finite draw")
    if transform == "identity":
        return x.copy()
    if transform == "log":
        if np.any(x <= 0):
            raise TransformDomainError("log of a non-positive draw")
        return np.log(x)
    if transform == "logit":
        if np.any((x <= 0) | (x >= 1)):
            raise TransformDomainError("logit of a draw outside (0, 1)")
        return np.log(x) - np.log1p(-x)
    raise TransformDomainError(f"unknown transform {transform!r}")


@dataclass
class ContrastSet:
    phi_H: list            # (separator, partition, transform) per stacked copy
    C: np.ndarray          # p x m, one +1 and one -1 per row
    delta_draws: np.ndarray
    labels: list
    pairs: list            # (separator, partition A, partition B) per contrast
    copy_sd: np.ndarray    # posterior sd of each stacked copy on its comparison scale
    flat_copies: tuple = ()
    delta_mean: np.ndarray = field(init=False)
    S_Delta: np.ndarray = field(init=False)

    def __post_init__(self):
        self.delta_draws = np.atleast_2d(np.asarray(self.delta_draws, dtype=float))
        self.delta_mean = self.delta_draws.mean(axis=0)
        S = np.cov(self.delta_draws, rowvar=False, ddof=1)
        self.S_Delta = np.atleast_2d(S)

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[1]


def contrast_pairs(split: gr.SplitModel, spec: Optional[gr.SplitSpec] = None) -> list:
    """(separator, qA, qB) triples ordered by separator, then partition pair."""
    spec = split.spec if spec is None else spec
    order = spec.partition_names
    out = []
    for sep in spec.separators:
        holders = [q for q in order if (sep, q) in split.separator_copies]
        pairs = itertools.combinations(holders, 2)
        if spec.pairs is not None:
            allowed = set(spec.pairs)
            pairs = [p for p in pairs if p in allowed]
        out.extend((sep, a, b) for a, b in pairs)
    return out


def build_contrasts(split: gr.SplitModel, samples, spec: Optional[gr.SplitSpec] = None) -> ContrastSet:
    """Stack transformed separator copies and form pairwise contrasts."""
    spec = split.spec if spec is None else spec
    keys = list(split.separator_copies)
    phi_H = [(sep, q, spec.transform(sep)) for sep, q in keys]
    for sep, q in keys:
        if split.separator_copies[(sep, q)] not in samples:
            raise ConflictError(f"no draws for separator copy {split.separator_copies[(sep, q)]!r}")
    H = np.column_stack([apply_transform(samples[split.separator_copies[k]], spec.transform(k[0]))
                         for k in keys])
    col = {k: i for i, k in enumerate(keys)}
    pairs = contrast_pairs(split, spec)
    if not pairs:
        raise ConflictError("split has no separator held by two partitions")
    C = np.zeros((len(pairs), len(keys)))
    for r, (sep, a, b) in enumerate(pairs):
        C[r, col[(sep, a)]] = 1.0
        C[r, col[(sep, b)]] = -1.0
    labels = [f"{spec.label(sep)} {a}-{b}" for sep, a, b in pairs]
    return ContrastSet(phi_H, C, H @ C.T, labels, pairs, H.std(axis=0, ddof=1),
                       tuple(split.flat_copies))


def analytic_contrast_moments(split: gr.SplitModel, samples, spec: Optional[gr.SplitSpec] = None):
    """Contrast mean and covariance from per-partition moments only.

    Cross-partition covariances of the stacked copies are set to zero, which
    is exact when partitions share no nodes.
    """
    spec = split.spec if spec is None else spec
    cs = build_contrasts(split, samples, spec)
    keys = list(split.separator_copies)
    H = np.column_stack([apply_transform(samples[split.separator_copies[k]], spec.transform(k[0]))
                         for k in keys])
    V = np.atleast_2d(np.cov(H, rowvar=False))
    part = np.array([q for _, q in keys])
    V = np.where(part[:, None] == part[None, :], V, 0.0)
    return cs.C @ H.mean(axis=0), cs.C @ V @ cs.C.T


# ---------------------------------------------------------------------------
# single-contrast p-values


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** -0.2


def binned_kde(x: np.ndarray, h: float, grid_size: int = 2 ** 14, pad: float = 5.0):
    """Gaussian KDE on a regular grid by linear binning and FFT convolution."""
    lo, hi = x.min() - pad * h, x.max() + pad * h
    grid = np.linspace(lo, hi, grid_size)
    dx = grid[1] - grid[0]
    pos = (x - lo) / dx
    i = np.clip(np.floor(pos).astype(np.int64), 0, grid_size - 2)
    frac = pos - i
    counts = np.bincount(i, 1.0 - frac, grid_size) + np.bincount(i + 1, frac, grid_size)
    half = min(grid_size - 1, int(math.ceil(pad * h / dx)))
    offs = np.arange(-half, half + 1) * dx
    kern = np.exp(-0.5 * (offs / h) ** 2) / (h * math.sqrt(2 * math.pi))
    nfft = 1 << int(math.ceil(math.log2(grid_size + kern.size)))
    dens = np.fft.irfft(np.fft.rfft(counts, nfft) * np.fft.rfft(kern, nfft), nfft)
    dens = dens[half:half + grid_size] / x.size
    return grid, np.clip(dens, 0.0, None)


def kde_at(x: np.ndarray, h: float, points) -> np.ndarray:
    """Exact Gaussian KDE at a few points."""
    points = np.atleast_1d(np.asarray(points, dtype=float))
    return np.array([np.mean(np.exp(-0.5 * ((p - x) / h) ** 2)) / (h * math.sqrt(2 * math.pi))
                     for p in points])


PVALUE_METHODS = ("tail", "kde", "normal")


def single_conflict_pvalue(delta_draws, method: str = "tail") -> float:
    """Two-sided conflict p-value for the difference between two copies.

    ``tail``: 2 * min(Pr(delta < 0), Pr(delta > 0)) from the draws.
    ``kde``: the posterior probability that the density of delta is below
    its density at zero, with densities from a Gaussian KDE (Silverman
    bandwidth). ``normal``: 2 * (1 - Phi(|mean| / sd)).
    """
    x = np.asarray(delta_draws, dtype=float).ravel()
    if x.size < MIN_DRAWS:
        raise ValueError(f"need at least {MIN_DRAWS} draws, got {x.size}")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DegenerateDistribution("posterior of the contrast has zero variance")
    if method == "normal":
        return float(2.0 * special.ndtr(-abs(x.mean()) / sd))
    if method == "tail":
        return float(min(1.0, 2.0 * min(np.mean(x < 0), np.mean(x > 0))))
    if method != "kde":
        raise ValueError(f"unknown method {method!r}")
    h = silverman_bandwidth(x)
    if not h > 0:
        h = 0.9 * sd * x.size ** -0.2
    grid, dens = binned_kde(x, h)
    f_draws = np.interp(x, grid, dens)
    f0 = kde_at(x, h, 0.0)[0]
    return float(np.clip(np.mean(f_draws < f0), 0.0, 1.0))


def density_curve(delta_draws, n: int = 512):
    """(x, density) pairs of the contrast posterior, for plotting."""
    x = np.asarray(delta_draws, dtype=float).ravel()
    h = silverman_bandwidth(x)
    grid, dens = binned_kde(x, h)
    lo = min(np.quantile(x, 0.0005) - 3 * h, 0.0)
    hi = max(np.quantile(x, 0.9995) + 3 * h, 0.0)
    xs = np.linspace(lo, hi, n)
    return xs, np.interp(xs, grid, dens, left=0.0, right=0.0)


# ---------------------------------------------------------------------------
# multiple contrasts


def pseudo_inverse(A, tol: float = PINV_TOL):
    """Moore-Penrose inverse of a symmetric matrix and its numerical rank."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    A = (A + A.T) / 2.0
    lam, V = np.linalg.eigh(A)
    top = np.abs(lam).max() if lam.size else 0.0
    keep = np.abs(lam) > tol * top if top > 0 else np.zeros(lam.shape, dtype=bool)
    inv = (V[:, keep] / lam[keep]) @ V[:, keep].T
    return inv, int(keep.sum())


def standardise(delta_mean, S):
    """z-scores and correlation matrix; zero variances are an error."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    d = np.diag(S)
    if np.any(~(d > 0)):
        raise DegenerateDistribution("a contrast has zero posterior variance")
    sd = np.sqrt(d)
    z = np.asarray(delta_mean, dtype=float) / sd
    R = S / np.outer(sd, sd)
    np.fill_diagonal(R, 1.0)
    return z, R


def global_chi2(contrasts, tol: float = PINV_TOL):
    """(X2, df, p) with X2 = T' R+ T and df = rank(R)."""
    if isinstance(contrasts, ContrastSet):
        mean, S = contrasts.delta_mean, contrasts.S_Delta
    else:
        mean, S = contrasts
    z, R = standardise(mean, S)
    Rp, rank = pseudo_inverse(R, tol)
    x2 = float(z @ Rp @ z)
    return x2, rank, float(stats.chi2.sf(x2, rank)) if rank > 0 else 1.0


def _skew_kurt(x):
    x = x - x.mean()
    m2 = np.mean(x ** 2)
    return float(np.mean(x ** 3) / m2 ** 1.5), float(np.mean(x ** 4) / m2 ** 2 - 3.0)


@dataclass
class ConflictReport:
    labels: list
    delta_mean: np.ndarray
    delta_sd: np.ndarray
    z: np.ndarray
    p_normal: np.ndarray       # 2(1 - Phi(|z|))
    p_conflict: np.ndarray     # per the chosen single-contrast method (the reported p_U)
    p_adjusted: np.ndarray     # max-T
    chi2: float
    chi2_df: int
    chi2_pvalue: float
    maxT_pvalue: float
    R: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray
    diffuse: list              # partitions whose copy sd exceeds the threshold
    flat: list                 # contrasts involving a flat-prior copy
    method: str = "tail"
    repaired: bool = False
    mvn_error: float = 0.0
    pairs: list = field(default_factory=list)

    @property
    def p(self) -> int:
        return len(self.labels)

    @property
    def p_unadjusted(self) -> np.ndarray:
        return self.p_normal

    @property
    def normality_flags(self) -> list:
        return [bool(abs(s) > SKEW_LIMIT or abs(k) > KURT_LIMIT)
                for s, k in zip(self.skewness, self.kurtosis)]

    def flags(self, k: int) -> str:
        out = []
        if self.normality_flags[k]:
            out.append("nonnormal")
        if self.diffuse[k]:
            out.append("diffuse:" + "+".join(self.diffuse[k]))
        if self.flat[k]:
            out.append("flat-prior")
        return ";".join(out)

    def rows(self) -> list:
        return [dict(label=self.labels[k], mean=float(self.delta_mean[k]),
                     sd=float(self.delta_sd[k]), z=float(self.z[k]),
                     p_U=float(self.p_conflict[k]), p_normal=float(self.p_normal[k]),
                     p_A=float(self.p_adjusted[k]), skew=float(self.skewness[k]),
                     kurtosis=float(self.kurtosis[k]), flags=self.flags(k))
                for k in range(self.p)]

    def global_summary(self) -> dict:
        return dict(contrasts=self.p, chi2=self.chi2, chi2_df=self.chi2_df,
                    chi2_pvalue=self.chi2_pvalue, maxT_pvalue=self.maxT_pvalue,
                    pvalue_method=self.method, correlation_repaired=self.repaired,
                    mvn_error=self.mvn_error)


def maxT_adjust(contrasts: ContrastSet, n_points: int = DEFAULT_POINTS, seed: int = 0,
                pvalue_method: str = "tail", pinv_tol: float = PINV_TOL,
                diffuse_threshold: float = DIFFUSE_THRESHOLD) -> ConflictReport:
    """Unadjusted, max-T adjusted and global conflict p-values."""
    z, R = standardise(contrasts.delta_mean, contrasts.S_Delta)
    if np.any(np.isnan(z)):
        raise DegenerateDistribution("NaN z-score")
    p_norm = 2.0 * special.ndtr(-np.abs(z))
    p_adj = np.empty_like(z)
    err, repaired = 0.0, False
    for k, zk in enumerate(np.abs(z)):
        r = mvn_rectangle(R, zk, n_points=n_points, seed=seed)
        p_adj[k] = 1.0 - r.value
        err, repaired = max(err, r.error), repaired or r.repaired
    # the max-T tail dominates the marginal tail; clip integration noise
    p_adj = np.clip(np.maximum(p_adj, p_norm), 0.0, 1.0)
    g = mvn_rectangle(R, float(np.max(np.abs(z))), n_points=n_points, seed=seed)
    x2, df, p_chi2 = global_chi2((contrasts.delta_mean, contrasts.S_Delta), pinv_tol)
    draws = contrasts.delta_draws
    if pvalue_method == "normal":
        p_conf = p_norm.copy()
    else:
        p_conf = np.array([single_conflict_pvalue(draws[:, k], pvalue_method)
                           for k in range(draws.shape[1])])
    sk = np.array([_skew_kurt(draws[:, k]) for k in range(draws.shape[1])])
    col = {(s, q): i for i, (s, q, _) in enumerate(contrasts.phi_H)}
    flat_set = set(contrasts.flat_copies)
    diffuse, flat = [], []
    for sep, a, b in contrasts.pairs:
        diffuse.append([q for q in (a, b) if contrasts.copy_sd[col[(sep, q)]] > diffuse_threshold])
        flat.append(any(gr.copy_name(sep, q) in flat_set for q in (a, b)))
    return ConflictReport(
        labels=list(contrasts.labels), delta_mean=contrasts.delta_mean.copy(),
        delta_sd=np.sqrt(np.diag(contrasts.S_Delta)), z=z, p_normal=p_norm, p_conflict=p_conf,
        p_adjusted=p_adj, chi2=x2, chi2_df=df, chi2_pvalue=p_chi2,
        maxT_pvalue=float(np.clip(max(1.0 - g.value, float(p_norm.min())), 0.0, 1.0)),
        R=R, skewness=sk[:, 0], kurtosis=sk[:, 1], diffuse=diffuse, flat=flat,
        method=pvalue_method, repaired=repaired or g.repaired, mvn_error=max(err, g.error),
        pairs=list(contrasts.pairs))


# ---------------------------------------------------------------------------
# adjustment across several fitted models


def pooled_maxT(z_blocks: Sequence[np.ndarray], R_blocks: Sequence[np.ndarray],
                n_points: int = DEFAULT_POINTS, seed: int = 0) -> list:
    """max-T p-values over independent blocks of contrasts.

    The joint correlation matrix is block diagonal, so the probability that
    every |Z| stays below t is the product of the per-block probabilities.
    """
    z_blocks = [np.atleast_1d(np.asarray(z, dtype=float)) for z in z_blocks]
    R_blocks = [np.atleast_2d(np.asarray(R, dtype=float)) for R in R_blocks]
    for z, R in zip(z_blocks, R_blocks):
        if R.shape != (z.size, z.size):
            raise DimensionMismatch(f"correlation block {R.shape} does not match {z.size} z-scores")
    if len(z_blocks) != len(R_blocks):
        raise DimensionMismatch("need one correlation block per z block")
    out = []
    for z in z_blocks:
        p = np.empty(z.size)
        for k, t in enumerate(np.abs(z)):
            prob = 1.0
            for R in R_blocks:
                prob *= mvn_rectangle(R, t, n_points=n_points, seed=seed).value
            p[k] = max(1.0 - prob, 2.0 * special.ndtr(-t))
        out.append(np.clip(p, 0.0, 1.0))
    return out


def adjust_across_models(reports: Sequence[ConflictReport], scope: str = "all",
                         families: Optional[Sequence] = None,
                         n_points: int = DEFAULT_POINTS, seed: int = 0) -> list:
    """Adjusted p-values for each report's contrasts.

    ``within`` returns each report's own max-T p-values; ``per_family`` pools
    the reports sharing a family label; ``all`` pools everything. Models are
    treated as independent of one another.
    """
    if scope == "within":
        return [r.p_adjusted.copy() for r in reports]
    if scope == "all":
        keys = [0] * len(reports)
    elif scope == "per_family":
        if families is None or len(families) != len(reports):
            raise DimensionMismatch("per_family needs one family label per report")
        keys = list(families)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    out = [None] * len(reports)
    for key in dict.fromkeys(keys):
        idx = [i for i, k in enumerate(keys) if k == key]
        pooled = pooled_maxT([reports[i].z for i in idx], [reports[i].R for i in idx],
                             n_points=n_points, seed=seed)
        for i, p in zip(idx, pooled):
            out[i] = p
    return out

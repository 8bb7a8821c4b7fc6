"""Multivariate normal probabilities over symmetric rectangles.

``mvn_rectangle(R, z)`` returns P(|Z_k| <= z for all k) for Z ~ N(0, R)
using Genz's separation of variables, a randomly shifted rank-1 lattice
rule with a baker's transform, and Genz-Bretz variable prioritisation.
The lattice generating vector is built by fast component-by-component
construction (circulant matrix-vector products via FFT).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

DEFAULT_POINTS = 2 ** 15
DEFAULT_SHIFTS = 12
_PIVOT_TOL = 1e-10


class NotPSD(ValueError):
    pass


@dataclass(frozen=True)
class MvnResult:
    value: float
    error: float        # standard error across random shifts
    repaired: bool = False

    def __float__(self):
        return self.value


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


def _prime_factors(n: int) -> list:
    out, f = [], 2
    while f * f <= n:
        if n % f == 0:
            out.append(f)
            while n % f == 0:
                n //= f
        f += 1
    if n > 1:
        out.append(n)
    return out


def primitive_root(n: int) -> int:
    phi = n - 1
    factors = _prime_factors(phi)
    for g in range(2, n):
        if all(pow(g, phi // f, n) != 1 for f in factors):
            return g
    raise ValueError(f"no primitive root for {n}")


def largest_prime_at_most(n: int) -> int:
    while not _is_prime(n):
        n -= 1
    return n


@lru_cache(maxsize=16)
def lattice_vector(n: int, dim: int) -> np.ndarray:
    """Fast CBC generating vector for a rank-1 lattice with prime ``n`` points.

    Minimises the worst-case error in the unanchored Sobolev space with
    product weights 0.9**j, kernel 2*pi^2*B2({x}).
    """
    if dim == 0:
        return np.zeros(0, dtype=np.int64)
    if n == 2:
        return np.ones(dim, dtype=np.int64)
    g = primitive_root(n)
    m = n - 1
    perm = np.empty(m, dtype=np.int64)
    perm[0] = 1
    for k in range(1, m):
        perm[k] = perm[k - 1] * g % n
    x = perm / n
    omega = 2.0 * np.pi ** 2 * (x * x - x + 1.0 / 6.0)
    fft_omega = np.fft.fft(omega)
    inv_perm = perm[(-np.arange(m)) % m]   # g^{-i} mod n
    prod = np.ones(n)                      # product term indexed by k = 0..n-1
    z = np.empty(dim, dtype=np.int64)
    for s in range(dim):
        gamma = 0.9 ** (s + 1)
        q = prod[inv_perm]
        err = np.real(np.fft.ifft(fft_omega * np.fft.fft(q)))
        j = int(np.argmin(np.round(err, 10)))
        z[s] = perm[j]
        k = np.arange(n)
        frac = (k * z[s] % n) / n
        prod *= 1.0 + gamma * 2.0 * np.pi ** 2 * (frac * frac - frac + 1.0 / 6.0)
    return z


def _repair(R: np.ndarray) -> tuple:
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or not np.all(np.isfinite(R)):
        raise NotPSD("correlation matrix must be a finite square matrix")
    if not np.allclose(R, R.T, atol=1e-10):
        raise NotPSD("correlation matrix is not symmetric")
    R = (R + R.T) / 2.0
    lam, V = np.linalg.eigh(R)
    if lam.min() >= -1e-10 * max(1.0, abs(lam.max())):
        d = np.sqrt(np.clip(np.diag(R), 0.0, None))
        if np.any(d <= 0):
            raise NotPSD("correlation matrix has a non-positive diagonal")
        return R / np.outer(d, d), False
    lam = np.clip(lam, 0.0, None)
    A = (V * lam) @ V.T
    d = np.sqrt(np.diag(A))
    if np.any(d <= 1e-12):
        raise NotPSD("eigenvalue repair left a zero variance")
    return A / np.outer(d, d), True


def _ordered_cholesky(R: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Cholesky factor with Genz-Bretz prioritisation and semidefinite pivots."""
    m = R.shape[0]
    C = R.copy()
    a, b = a.copy(), b.copy()
    L = np.zeros((m, m))
    y = np.zeros(m)
    for i in range(m):
        best, best_p = i, np.inf
        for j in range(i, m):
            v = C[j, j] - L[j, :i] @ L[j, :i]
            if v <= _PIVOT_TOL:
                p = 2.0
            else:
                s = np.sqrt(v)
                mu = L[j, :i] @ y[:i]
                p = special.ndtr((b[j] - mu) / s) - special.ndtr((a[j] - mu) / s)
            if p < best_p:
                best, best_p = j, p
        if best != i:
            C[[i, best]] = C[[best, i]]
            C[:, [i, best]] = C[:, [best, i]]
            L[[i, best]] = L[[best, i]]
            a[[i, best]] = a[[best, i]]
            b[[i, best]] = b[[best, i]]
        v = C[i, i] - L[i, :i] @ L[i, :i]
        if v <= _PIVOT_TOL:
            L[i, i] = 0.0
            y[i] = 0.0
            continue
        L[i, i] = np.sqrt(v)
        for j in range(i + 1, m):
            L[j, i] = (C[j, i] - L[j, :i] @ L[i, :i]) / L[i, i]
        mu = L[i, :i] @ y[:i]
        lo, hi = (a[i] - mu) / L[i, i], (b[i] - mu) / L[i, i]
        den = special.ndtr(hi) - special.ndtr(lo)
        if den > 1e-300:
            y[i] = (np.exp(-0.5 * lo * lo) - np.exp(-0.5 * hi * hi)) / np.sqrt(2 * np.pi) / den
        else:
            y[i] = (lo + hi) / 2.0 if np.isfinite(lo + hi) else 0.0
    return L, a, b


def _sov(L: np.ndarray, a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Genz integrand at points ``w`` of shape (npts, m - 1)."""
    m = L.shape[0]
    npts = w.shape[0]
    f = np.ones(npts)
    y = np.zeros((npts, m))
    for i in range(m):
        s = y[:, :i] @ L[i, :i] if i else np.zeros(npts)
        if L[i, i] > 0.0:
            d = special.ndtr((a[i] - s) / L[i, i])
            e = special.ndtr((b[i] - s) / L[i, i]) - d
            f *= e
            if i < m - 1:
                u = np.clip(d + w[:, i] * e, 1e-300, 1.0 - 1e-16)
                y[:, i] = special.ndtri(u)
        else:
            f *= (s >= a[i]) & (s <= b[i])
    return f


def mvn_rectangle(R, z: float, n_points: int = DEFAULT_POINTS, seed: int = 0,
                  shifts: int = DEFAULT_SHIFTS) -> MvnResult:
    """P(|Z_k| <= z for all k), Z ~ N(0, R), with a standard-error estimate.

    ``R`` is repaired (negative eigenvalues clipped, diagonal renormalised)
    when it is not positive semi-definite; the result records this.
    """
    R, repaired = _repair(np.atleast_2d(R))
    m = R.shape[0]
    z = float(z)
    if z < 0 or np.isnan(z):
        raise ValueError("z must be non-negative")
    if z == 0.0:
        return MvnResult(0.0, 0.0, repaired)
    if np.isinf(z):
        return MvnResult(1.0, 0.0, repaired)
    if m == 1:
        return MvnResult(float(1.0 - 2.0 * special.ndtr(-z)), 0.0, repaired)
    a, b = np.full(m, -z), np.full(m, z)
    L, a, b = _ordered_cholesky(R, a, b)
    n = largest_prime_at_most(max(int(n_points), 2))
    gen = lattice_vector(n, m - 1)
    base = (np.arange(n)[:, None] * gen[None, :] % n) / n
    rng = np.random.default_rng(seed)
    est = np.empty(shifts)
    for r in range(shifts):
        x = (base + rng.random(m - 1)) % 1.0
        w = 1.0 - np.abs(2.0 * x - 1.0)
        est[r] = _sov(L, a, b, w).mean()
    value = float(np.clip(est.mean(), 0.0, 1.0))
    err = float(est.std(ddof=1) / np.sqrt(shifts)) if shifts > 1 else float("nan")
    return MvnResult(value, err, repaired)


def maxabs_tail(R, t: float, **kw) -> MvnResult:
    """P(max |Z_k| >= t): one minus the rectangle probability."""
    r = mvn_rectangle(R, t, **kw)
    return MvnResult(1.0 - r.value, r.error, r.repaired)

"""Shared probability and structured linear-algebra kernels.

Everything downstream (the hierarchical model, the emulator, the samplers)
funnels its dense and Kronecker-structured Gaussian algebra through this
module so that factorizations are computed once and jitter policy lives in a
single place.

Conventions
-----------
* vec() stacks columns.  For an (n, K) matrix ``Y`` the flat index of entry
  (i, k) is ``k * n + i``, and ``cov(vec Y) = C (x) R`` pairs the *column*
  covariance C (K x K) with the *row* covariance R (n x n).  A
  ``KroneckerSpd([C, R])`` therefore acts on flat vectors laid out that way.
* Random draws always consume a ``numpy.random.Generator``.  Use
  :func:`make_rng` / :func:`substream` to derive them; streams are
  counter-based (Philox) so spawning is collision-free and deterministic.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln, multigammaln, ndtr, ndtri

__all__ = [
    "FactorizationError",
    "SpdMatrix",
    "KroneckerSpd",
    "jittered_cholesky",
    "gauss_kernel",
    "gauss_kernel_matrix",
    "mvn_sample",
    "mvn_logpdf",
    "matnorm_logpdf",
    "inv_wishart_sample",
    "inv_wishart_logpdf",
    "trunc_norm_upper",
    "trunc_mvn_gibbs",
    "make_rng",
    "substream",
    "vec",
    "unvec",
]

# Jitter escalation: start at 1e-10 * mean diagonal, multiply by 10 up to
# 1e-6 * mean diagonal, then give up.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-6

_LOG2PI = math.log(2.0 * math.pi)


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after the full jitter ladder."""


def jittered_cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a``, escalating diagonal jitter on failure.

    Returns ``(L, jitter)`` where ``jitter`` is the absolute value that was
    added to the diagonal (0.0 when none was needed).
    """
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    if scale <= 0.0 or not np.isfinite(scale):
        scale = max(float(np.max(np.abs(a))), 1.0)
    eye = np.eye(a.shape[0])
    jitter = _JITTER_START * scale
    while jitter <= _JITTER_MAX * scale:
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationError(
        f"matrix of dim {a.shape[0]} not positive definite within jitter "
        f"budget {_JITTER_MAX * scale:.3e}"
    )


class SpdMatrix:
    """Symmetric positive-definite matrix with a cached Cholesky factor."""

    __slots__ = ("mat", "_chol", "_jitter")

    def __init__(self, mat: np.ndarray):
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        if mat.shape[0] != mat.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {mat.shape}")
        asym = float(np.max(np.abs(mat - mat.T))) if mat.size else 0.0
        tol = 1e-12 * max(1.0, float(np.max(np.abs(mat)))) if mat.size else 0.0
        if asym > tol:
            raise ValueError(f"matrix is not symmetric: max|A - A^T| = {asym:.3e}")
        self.mat = 0.5 * (mat + mat.T)
        self._chol: np.ndarray | None = None
        self._jitter = 0.0

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol, self._jitter = jittered_cholesky(self.mat)
        return self._chol

    @property
    def jitter(self) -> float:
        _ = self.chol
        return self._jitter

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self.chol, True), np.asarray(b, dtype=float))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.mat @ x

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def inverse(self) -> "SpdMatrix":
        inv = self.solve(np.eye(self.dim))
        return SpdMatrix(0.5 * (inv + inv.T))

    def dense(self) -> np.ndarray:
        return self.mat


def _apply_along_axis(op, factor: SpdMatrix, tensor: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(tensor, axis, 0)
    flat = moved.reshape(factor.dim, -1)
    out = op(factor, flat)
    return np.moveaxis(out.reshape(moved.shape), 0, axis)


class KroneckerSpd:
    """Kronecker product of SPD factors, ``A_1 (x) A_2 (x) ... (x) A_M``.

    Never forms the dense product; solves, matvecs, log-determinants and
    sampling factor applications all run factor-by-factor on a reshaped
    tensor view of the operand.
    """

    __slots__ = ("factors",)

    def __init__(self, factors):
        self.factors = [f if isinstance(f, SpdMatrix) else SpdMatrix(f) for f in factors]
        if not self.factors:
            raise ValueError("need at least one factor")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.dim for f in self.factors)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def _tensorize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"operand has shape {x.shape}, expected ({self.dim},)")
        return x.reshape(self.dims)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        t = self._tensorize(x)
        for axis, f in enumerate(self.factors):
            t = _apply_along_axis(lambda fac, m: fac.matvec(m), f, t, axis)
        return t.reshape(-1)

    def solve(self, x: np.ndarray) -> np.ndarray:
        t = self._tensorize(x)
        for axis, f in enumerate(self.factors):
            t = _apply_along_axis(lambda fac, m: fac.solve(m), f, t, axis)
        return t.reshape(-1)

    def chol_matvec(self, z: np.ndarray) -> np.ndarray:
        """Apply the Kronecker Cholesky factor ``(x)_i L_i`` to ``z``."""
        t = self._tensorize(z)
        for axis, f in enumerate(self.factors):
            t = _apply_along_axis(lambda fac, m: fac.chol @ m, f, t, axis)
        return t.reshape(-1)

    def logdet(self) -> float:
        n = self.dim
        return sum((n / f.dim) * f.logdet() for f in self.factors)

    def inverse(self) -> "KroneckerSpd":
        return KroneckerSpd([f.inverse() for f in self.factors])

    def dense(self) -> np.ndarray:
        out = self.factors[0].dense()
        for f in self.factors[1:]:
            out = np.kron(out, f.dense())
        return out


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization of a 2-d array."""
    return np.asarray(m, dtype=float).T.reshape(-1)


def unvec(v: np.ndarray, n_rows: int, n_cols: int) -> np.ndarray:
    """Inverse of :func:`vec` for an (n_rows, n_cols) matrix."""
    return np.asarray(v, dtype=float).reshape(n_cols, n_rows).T


def gauss_kernel(u, v, weights) -> float:
    """Anisotropic squared-exponential kernel exp(-sum_d w_d (u_d - v_d)^2)."""
    u = np.asarray(u, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if not (u.shape == v.shape == w.shape):
        raise ValueError(
            f"length mismatch: u {u.shape}, v {v.shape}, weights {w.shape}"
        )
    return float(np.exp(-np.sum(w * (u - v) ** 2)))


def gauss_kernel_matrix(a: np.ndarray, b: np.ndarray, weights) -> np.ndarray:
    """Kernel cross-matrix between row sets ``a`` (n, d) and ``b`` (m, d)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    w = np.asarray(weights, dtype=float).reshape(-1)
    if a.shape[1] != b.shape[1] or a.shape[1] != w.size:
        raise ValueError(
            f"dimension mismatch: a {a.shape}, b {b.shape}, weights {w.shape}"
        )
    diff = a[:, None, :] - b[None, :, :]
    return np.exp(-np.einsum("ijd,d->ij", diff * diff, w))


def mvn_sample(mean: np.ndarray, cov, rng: Generator) -> np.ndarray:
    """One draw from N(mean, cov); cov is SpdMatrix or KroneckerSpd."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    z = rng.standard_normal(mean.size)
    if isinstance(cov, KroneckerSpd):
        return mean + cov.chol_matvec(z)
    if not isinstance(cov, SpdMatrix):
        cov = SpdMatrix(cov)
    return mean + cov.chol @ z


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    mean = np.asarray(mean, dtype=float).reshape(-1)
    if isinstance(cov, KroneckerSpd):
        r = x - mean
        quad = float(r @ cov.solve(r))
        ld = cov.logdet()
    else:
        if not isinstance(cov, SpdMatrix):
            cov = SpdMatrix(cov)
        r = x - mean
        quad = float(r @ cov.solve(r))
        ld = cov.logdet()
    return -0.5 * (x.size * _LOG2PI + ld + quad)


def matnorm_logpdf(x: np.ndarray, mean: np.ndarray, col_cov: SpdMatrix, row_cov: SpdMatrix) -> float:
    """Log density of the matrix normal with vec(X) ~ N(vec(M), C (x) R).

    ``x`` and ``mean`` are (n, K); ``row_cov`` is (n, n), ``col_cov`` (K, K).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = x - np.atleast_2d(np.asarray(mean, dtype=float))
    n, k = r.shape
    if not isinstance(row_cov, SpdMatrix):
        row_cov = SpdMatrix(row_cov)
    if not isinstance(col_cov, SpdMatrix):
        col_cov = SpdMatrix(col_cov)
    if row_cov.dim != n or col_cov.dim != k:
        raise ValueError(
            f"shape mismatch: X {r.shape}, row_cov {row_cov.dim}, col_cov {col_cov.dim}"
        )
    quad = float(np.sum(row_cov.solve(r) * col_cov.solve(r.T).T))
    return -0.5 * (n * k * _LOG2PI + k * row_cov.logdet() + n * col_cov.logdet() + quad)


def inv_wishart_sample(dof: float, scale: SpdMatrix, rng: Generator) -> np.ndarray:
    """Bartlett draw from the inverse Wishart IW(dof, scale).

    Parameterized so that E[X] = scale / (dof - K - 1) for dof > K + 1.
    """
    if not isinstance(scale, SpdMatrix):
        scale = SpdMatrix(scale)
    k = scale.dim
    if dof <= k - 1:
        raise ValueError(f"inverse Wishart needs dof > K - 1, got dof={dof}, K={k}")
    a = np.zeros((k, k))
    for i in range(k):
        a[i, i] = math.sqrt(rng.chisquare(dof - i))
    if k > 1:
        idx = np.tril_indices(k, -1)
        a[idx] = rng.standard_normal(len(idx[0]))
    # X = B B^T with B = L_scale A^{-T}: then X^{-1} ~ Wishart(dof, scale^{-1}).
    b = solve_triangular(a, scale.chol.T, lower=True).T
    x = b @ b.T
    return 0.5 * (x + x.T)


def inv_wishart_logpdf(x: np.ndarray, dof: float, scale: SpdMatrix) -> float:
    if not isinstance(scale, SpdMatrix):
        scale = SpdMatrix(scale)
    k = scale.dim
    xs = SpdMatrix(x)
    quad = float(np.trace(xs.solve(scale.dense())))
    return (
        0.5 * dof * scale.logdet()
        - 0.5 * dof * k * math.log(2.0)
        - multigammaln(0.5 * dof, k)
        - 0.5 * (dof + k + 1) * xs.logdet()
        - 0.5 * quad
    )


def trunc_norm_upper(mean: float, sd: float, upper: float, rng: Generator) -> float:
    """Draw X ~ N(mean, sd^2) conditioned on X <= upper.

    Inverse-CDF in the body of the distribution; Robert's exponential
    rejection once the admissible region is more than ~8 sd into the tail.
    """
    if not np.isfinite(upper):
        return mean + sd * rng.standard_normal()
    beta = (upper - mean) / sd
    if beta > -8.0:
        p = ndtr(beta)
        u = rng.uniform(0.0, 1.0)
        # guard the open interval: u * p can round to 0 for tiny p
        z = ndtri(max(u * p, 5e-324))
        return mean + sd * min(z, beta)
    # deep tail: sample -Z | -Z >= -beta with a shifted exponential proposal
    a = -beta
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + rng.exponential(1.0 / alpha)
        if rng.uniform() <= math.exp(-0.5 * (z - alpha) ** 2):
            return mean - sd * z


def trunc_mvn_gibbs(
    mean: np.ndarray,
    cov,
    upper: np.ndarray,
    sweeps: int,
    rng: Generator,
    init: np.ndarray | None = None,
) -> np.ndarray:
    """Gibbs sweeps over coordinates of N(mean, cov) truncated to x <= upper.

    ``upper`` entries may be +inf (unconstrained coordinate).  ``init`` must
    satisfy the constraint strictly; defaults to min(mean, upper - sd).
    """
    mean = np.asarray(mean, dtype=float).reshape(-1)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), mean.shape).astype(float)
    if isinstance(cov, KroneckerSpd):
        cov = SpdMatrix(cov.dense())
    elif not isinstance(cov, SpdMatrix):
        cov = SpdMatrix(cov)
    d = mean.size
    if cov.dim != d:
        raise ValueError(f"cov dim {cov.dim} != mean dim {d}")
    prec = cov.solve(np.eye(d))
    cond_sd = 1.0 / np.sqrt(np.diag(prec))
    if init is None:
        x = np.where(mean <= upper, mean, upper - cond_sd)
    else:
        x = np.array(init, dtype=float).reshape(-1).copy()
        if np.any(x > upper):
            raise ValueError("init violates the truncation bound")
    if d == 1:
        # conditional == marginal; sweeps collapse to a single exact draw
        return np.array([trunc_norm_upper(mean[0], math.sqrt(cov.mat[0, 0]), upper[0], rng)])
    for _ in range(max(1, int(sweeps))):
        for i in range(d):
            r = prec[i] @ (x - mean) - prec[i, i] * (x[i] - mean[i])
            mu_i = mean[i] - r / prec[i, i]
            x[i] = trunc_norm_upper(mu_i, cond_sd[i], upper[i], rng)
    return x


def make_rng(seed: int) -> Generator:
    """Root counter-based generator for a 64-bit seed."""
    return Generator(Philox(SeedSequence(int(seed))))


def _path_index(p) -> int:
    if isinstance(p, str):
        # stable across processes, unlike hash()
        return int.from_bytes(hashlib.blake2s(p.encode(), digest_size=4).digest(), "big")
    return int(p)


def substream(seed: int, *path) -> Generator:
    """Deterministic child stream addressed by a tuple of indices or labels.

    ``substream(s, 3, 7)`` never collides with ``substream(s, 3, 8)`` or with
    ``make_rng(s)``; used to hand independent streams to chains, grid cells
    and replications.  String path elements are hashed to stable indices.
    """
    return Generator(Philox(SeedSequence(int(seed), spawn_key=tuple(_path_index(p) for p in path))))

"""Kronecker-structured multivariate Gaussian process emulator.

The ODE response surface mu(theta; x, t) is evaluated over a product design
zeta1 x zeta2 x zeta3 (theta points, factor points, times).  Separability
makes every fit and prediction quantity computable from the three factor
correlation matrices P1, P2, P3; the dense N x N matrix is never formed.

Inputs enter the correlation kernel raw (unscaled); the per-dimension
weights alpha absorb the scales.  alpha partition: 0..4 theta, 5..9 factor
point, 10 time.
"""

from __future__ import annotations

import math
import warnings
import zipfile
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .kinetics import FactorPoint, log_amounts
from .stats import (
    FactorizationError,
    SpdMatrix,
    gauss_kernel_matrix,
    jittered_cholesky,
    mvn_sample,
)

__all__ = [
    "EmulatorError",
    "MetaDesign",
    "MGPModel",
    "PredictiveDistribution",
    "evaluate_design",
    "fit_alpha",
    "fit_mgp",
    "predict",
    "sample_predictive",
    "dmean_dtheta",
    "d2mean_dtheta2",
    "DesignPredictor",
    "write_npz",
]

N_INPUTS = 11  # 5 theta + 5 factor + 1 time
N_OUTPUTS = 3

FORMAT_VERSION = 1


class EmulatorError(RuntimeError):
    pass


def write_npz(path, arrays: dict) -> None:
    """np.load-compatible .npz with byte-identical output for equal inputs.

    np.savez stamps the archive with the wall clock, so reruns differ; here
    every member gets a fixed timestamp and no compression.
    """
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, value in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.asarray(value))


def _dedup(rows: np.ndarray, label: str) -> np.ndarray:
    keep = []
    for i in range(rows.shape[0]):
        if any(np.allclose(rows[i], rows[j], rtol=0, atol=1e-12) for j in keep):
            warnings.warn(f"dropping duplicate point in {label}", stacklevel=3)
            continue
        keep.append(i)
    return rows[keep]


@dataclass
class MetaDesign:
    """Product design zeta1 x zeta2 x zeta3 for the emulator."""

    zeta1: np.ndarray  # (N1, 5) theta points
    zeta2: list  # N2 FactorPoints
    zeta3: np.ndarray  # (N3,) times

    def __post_init__(self):
        self.zeta1 = _dedup(np.atleast_2d(np.asarray(self.zeta1, dtype=float)), "zeta1")
        x = _dedup(np.array([p.as_array() for p in self.zeta2]), "zeta2")
        self.zeta2 = [FactorPoint.from_array(row) for row in x]
        t = np.asarray(self.zeta3, dtype=float).reshape(-1, 1)
        self.zeta3 = _dedup(t, "zeta3")[:, 0]
        if self.zeta1.shape[1] != 5:
            raise ValueError("zeta1 points must have 5 components")
        if min(self.sizes) < 1:
            raise ValueError("all design axes need at least one point")

    @property
    def sizes(self) -> tuple:
        return (self.zeta1.shape[0], len(self.zeta2), self.zeta3.size)

    @property
    def n(self) -> int:
        n1, n2, n3 = self.sizes
        return n1 * n2 * n3

    def factor_coords(self) -> np.ndarray:
        return np.array([p.as_array() for p in self.zeta2])

    def row_inputs(self) -> np.ndarray:
        """(N, 11) input rows in lexicographic order, zeta3 fastest."""
        n1, n2, n3 = self.sizes
        x = self.factor_coords()
        rows = np.empty((self.n, N_INPUTS))
        r = 0
        for i in range(n1):
            for j in range(n2):
                for s in range(n3):
                    rows[r, :5] = self.zeta1[i]
                    rows[r, 5:10] = x[j]
                    rows[r, 10] = self.zeta3[s]
                    r += 1
        return rows


def evaluate_design(design: MetaDesign, kinetics=log_amounts, **solve_kwargs):
    """Run the simulator over the product design.

    One ODE solve per (theta, factor point) pair covers every time in zeta3.
    A failed solve invalidates its theta point: the whole zeta1 slice is
    dropped so the response stays a full product grid.  Returns the possibly
    reduced design and the (N, K) response matrix.
    """
    n1, n2, n3 = design.sizes
    blocks = {}
    bad = set()
    for i in range(n1):
        for j, x in enumerate(design.zeta2):
            try:
                blocks[i, j] = kinetics(design.zeta1[i], x, design.zeta3, **solve_kwargs)
            except Exception as exc:  # noqa: BLE001 - any solve failure drops the point
                warnings.warn(
                    f"simulator failed at theta index {i}, factor index {j}: {exc}",
                    stacklevel=2,
                )
                bad.add(i)
                break
    if bad:
        keep = [i for i in range(n1) if i not in bad]
        if not keep:
            raise EmulatorError("every theta point failed to evaluate")
        design = MetaDesign(design.zeta1[keep], design.zeta2, design.zeta3)
        z = np.vstack([blocks[i, j] for i in keep for j in range(n2)])
    else:
        z = np.vstack([blocks[i, j] for i in range(n1) for j in range(n2)])
    return design, z


# ---------------------------------------------------------------------------
# fitting


def _p_factors(design: MetaDesign, alpha: np.ndarray) -> list[SpdMatrix]:
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if alpha.size != N_INPUTS or np.any(alpha <= 0.0):
        raise ValueError(f"alpha must be {N_INPUTS} positive weights")
    x = design.factor_coords()
    t = design.zeta3.reshape(-1, 1)
    return [
        SpdMatrix(gauss_kernel_matrix(design.zeta1, design.zeta1, alpha[:5])),
        SpdMatrix(gauss_kernel_matrix(x, x, alpha[5:10])),
        SpdMatrix(gauss_kernel_matrix(t, t, alpha[10:])),
    ]


def _fit_given_factors(design, z, factors):
    n1, n2, n3 = design.sizes
    k = z.shape[1]
    zt = z.reshape(n1, n2, n3, k)
    u = [f.solve(np.ones(f.dim)) for f in factors]
    s = [float(np.sum(ui)) for ui in u]
    beta = np.einsum("i,j,l,ijlk->k", u[0], u[1], u[2], zt) / np.prod(s)
    zc = z - beta[None, :]
    # P^{-1} Zc columnwise through the factor solves
    zct = zc.reshape(n1, n2, n3, k)
    w = np.einsum("ai,ijlk->ajlk", factors[0].inverse().dense(), zct)
    w = np.einsum("bj,ajlk->ablk", factors[1].inverse().dense(), w)
    w = np.einsum("cl,ablk->abck", factors[2].inverse().dense(), w)
    psi_raw = np.einsum("ijlk,ijlq->kq", zct, w)
    return beta, 0.5 * (psi_raw + psi_raw.T), s


def _sq_diff_matrices(design: MetaDesign) -> list[list[np.ndarray]]:
    """Per-factor, per-dimension squared coordinate difference matrices."""
    out = []
    for coords in (design.zeta1, design.factor_coords(), design.zeta3.reshape(-1, 1)):
        diffs = [
            (coords[:, [u]] - coords[:, [u]].T) ** 2 for u in range(coords.shape[1])
        ]
        out.append(diffs)
    return out


def _profile_value_and_grad(design, z, alpha, sq_diffs):
    """Profiled marginal log posterior of alpha and its gradient.

    The column covariance and mean are concentrated out; since the GLS mean
    zeroes 1' P^{-1} Zc, the residual cross-product's derivative reduces to
    -W' dP W with W = P^{-1} Zc (envelope argument).
    """
    n = design.n
    k = z.shape[1]
    alpha = np.asarray(alpha, dtype=float)
    try:
        factors = _p_factors(design, alpha)
    except (FactorizationError, ValueError):
        return -np.inf, np.zeros(N_INPUTS)
    try:
        beta, psi_raw, _ = _fit_given_factors(design, z, factors)
        sign, logdet_psi = np.linalg.slogdet(psi_raw)
        if sign <= 0:
            return -np.inf, np.zeros(N_INPUTS)
        logdet_p = sum((n / f.dim) * f.logdet() for f in factors)
        value = float(
            -0.5 * k * logdet_p
            - 0.5 * n * (logdet_psi - k * math.log(n))
            - np.sum(alpha)
        )

        n1, n2, n3 = design.sizes
        zc = z - beta[None, :]
        zct = zc.reshape(n1, n2, n3, k)
        invs = [f.inverse().dense() for f in factors]
        w = np.einsum("ai,ijlk->ajlk", invs[0], zct)
        w = np.einsum("bj,ajlk->ablk", invs[1], w)
        w = np.einsum("cl,ablk->abck", invs[2], w)
        psi_inv = np.linalg.inv(psi_raw)
        # W with every axis but one absorbed by its P factor, reused per dim
        v = [
            np.einsum("bj,cl,ajlk->abck", factors[1].dense(), factors[2].dense(), w),
            np.einsum("ai,cl,ijlk->ajck", factors[0].dense(), factors[2].dense(), w),
            np.einsum("ai,bj,ijlk->ablk", factors[0].dense(), factors[1].dense(), w),
        ]
        contract = ["xjlk,xy,yjlq->kq", "axlk,xy,aylq->kq", "abxk,xy,abyq->kq"]
        grad = np.empty(N_INPUTS)
        u0 = 0
        for i, f in enumerate(factors):
            p_inv = invs[i]
            p_dense = f.dense()
            for d2 in sq_diffs[i]:
                dp = -d2 * p_dense
                tr_logdet = float(np.sum(p_inv * dp))
                g = np.einsum(contract[i], w, dp, v[i])
                tr_psi = float(np.sum(psi_inv * g))
                grad[u0] = -0.5 * k * (n / f.dim) * tr_logdet + 0.5 * n * tr_psi - 1.0
                u0 += 1
        return value, grad
    except (FactorizationError, np.linalg.LinAlgError):
        return -np.inf, np.zeros(N_INPUTS)


def profile_log_posterior(design: MetaDesign, z: np.ndarray, alpha) -> float:
    """Marginal log likelihood profiled over the mean and column covariance,
    plus unit-rate exponential log priors on each alpha component."""
    value, _ = _profile_value_and_grad(
        design, np.asarray(z, dtype=float), alpha, _sq_diff_matrices(design)
    )
    return value


def fit_alpha(
    design: MetaDesign,
    z: np.ndarray,
    rng,
    n_starts: int = 20,
    extra_starts: np.ndarray | None = None,
) -> np.ndarray:
    """Posterior mode of the correlation weights, searched on the log scale.

    Multi-start quasi-Newton over log-alpha with Latin-hypercube initial
    points in [-8, 4]^11; ``extra_starts`` (log scale) join the start list,
    which warm refits use to seed from the current fit.
    """
    z = np.asarray(z, dtype=float)
    if design.n < N_INPUTS + 2:
        raise EmulatorError(f"need at least {N_INPUTS + 2} design points, got {design.n}")
    if np.allclose(z.std(axis=0), 0.0, atol=1e-14):
        raise EmulatorError("constant response: correlation weights are unidentifiable")

    from .design import latin_hypercube  # local import to avoid a cycle

    bounds = np.repeat([[-8.0, 4.0]], N_INPUTS, axis=0)
    starts = latin_hypercube(n_starts, bounds, rng)
    if extra_starts is not None:
        starts = np.vstack([np.atleast_2d(extra_starts), starts])

    sq_diffs = _sq_diff_matrices(design)

    def neg_obj(b):
        # clip keeps exp() away from under/overflow during line searches
        a = np.exp(np.clip(b, -60.0, 60.0))
        value, grad = _profile_value_and_grad(design, z, a, sq_diffs)
        if not np.isfinite(value):
            return np.inf, np.zeros(N_INPUTS)
        return -value, -grad * a  # chain rule onto the log scale

    best = None
    failures = []
    for b0 in starts:
        if not np.isfinite(neg_obj(b0)[0]):
            failures.append((b0, "objective not finite at start"))
            continue
        res = minimize(neg_obj, b0, method="L-BFGS-B", jac=True)
        if not np.isfinite(res.fun):
            failures.append((b0, res.message))
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise EmulatorError(
            f"every optimizer start failed; first diagnostics: {failures[:3]}"
        )
    return np.exp(best.x)


def fit_mgp(design: MetaDesign, z: np.ndarray, alpha) -> "MGPModel":
    """Closed-form mean and column covariance given correlation weights.

    The column covariance plug-in is the maximum-likelihood one (generalized
    residual cross-product over N); the predictive covariance scales it by
    the usual kriging factor.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[0] != design.n:
        raise ValueError(f"Z has {z.shape[0]} rows, design expects {design.n}")
    factors = _p_factors(design, alpha)
    beta, psi_raw, _ = _fit_given_factors(design, z, factors)
    psi = psi_raw / design.n
    return MGPModel(
        design=design,
        z=z,
        alpha=np.asarray(alpha, dtype=float),
        p_factors=factors,
        beta_hat=beta,
        psi_hat=psi,
    )


@dataclass
class MGPModel:
    design: MetaDesign
    z: np.ndarray
    alpha: np.ndarray
    p_factors: list
    beta_hat: np.ndarray
    psi_hat: np.ndarray

    @property
    def centered(self) -> np.ndarray:
        return self.z - self.beta_hat[None, :]

    def save(self, path):
        write_npz(path, {
            "format_version": FORMAT_VERSION,
            "zeta1": self.design.zeta1,
            "zeta2": self.design.factor_coords(),
            "zeta3": self.design.zeta3,
            "z": self.z,
            "alpha": self.alpha,
            "beta_hat": self.beta_hat,
            "psi_hat": self.psi_hat,
        })

    @classmethod
    def load(cls, path) -> "MGPModel":
        with np.load(path) as bundle:
            version = int(bundle["format_version"])
            if version != FORMAT_VERSION:
                raise EmulatorError(f"unsupported model bundle version {version}")
            design = MetaDesign(
                zeta1=bundle["zeta1"],
                zeta2=[FactorPoint.from_array(r) for r in bundle["zeta2"]],
                zeta3=bundle["zeta3"],
            )
            model = fit_mgp(design, bundle["z"], bundle["alpha"])
            if not (
                np.allclose(model.beta_hat, bundle["beta_hat"], atol=1e-8)
                and np.allclose(model.psi_hat, bundle["psi_hat"], atol=1e-8)
            ):
                raise EmulatorError("model bundle is inconsistent with a refit")
        return model


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray  # (K,)
    cov: np.ndarray  # (K, K)


def _kernel_vectors(model: MGPModel, theta, x: FactorPoint, t: float):
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    a = model.alpha
    d = model.design
    p1 = gauss_kernel_matrix(d.zeta1, theta, a[:5])[:, 0]
    p2 = gauss_kernel_matrix(d.factor_coords(), x.as_array().reshape(1, -1), a[5:10])[:, 0]
    p3 = gauss_kernel_matrix(d.zeta3.reshape(-1, 1), np.array([[t]]), a[10:])[:, 0]
    return p1, p2, p3


def _mean_and_factor(model: MGPModel, q1, q2, q3, p1, p2, p3):
    n1, n2, n3 = model.design.sizes
    zt = model.centered.reshape(n1, n2, n3, -1)
    mean = model.beta_hat + np.einsum("i,j,l,ijlk->k", q1, q2, q3, zt)
    factor = 1.0 - float(p1 @ q1) * float(p2 @ q2) * float(p3 @ q3)
    return mean, factor


def predict(model: MGPModel, theta, x: FactorPoint, t: float) -> PredictiveDistribution:
    p1, p2, p3 = _kernel_vectors(model, theta, x, t)
    q1 = model.p_factors[0].solve(p1)
    q2 = model.p_factors[1].solve(p2)
    q3 = model.p_factors[2].solve(p3)
    mean, factor = _mean_and_factor(model, q1, q2, q3, p1, p2, p3)
    return PredictiveDistribution(mean=mean, cov=max(factor, 0.0) * model.psi_hat)


def sample_predictive(model: MGPModel, theta, x: FactorPoint, t: float, rng) -> np.ndarray:
    q = predict(model, theta, x, t)
    if np.all(q.cov == 0.0):
        return q.mean.copy()
    return mvn_sample(q.mean, SpdMatrix(0.5 * (q.cov + q.cov.T)), rng)


def _dp1(model: MGPModel, theta, p1) -> np.ndarray:
    """(N1, p) matrix of kernel-vector first derivatives in theta."""
    diff = theta[None, :] - model.design.zeta1
    return -2.0 * model.alpha[:5][None, :] * diff * p1[:, None]


def dmean_dtheta(model: MGPModel, theta, x: FactorPoint, t: float) -> np.ndarray:
    """(K, p) Jacobian of the predictive mean."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    p1, p2, p3 = _kernel_vectors(model, theta, x, t)
    q2 = model.p_factors[1].solve(p2)
    q3 = model.p_factors[2].solve(p3)
    n1, n2, n3 = model.design.sizes
    zt = model.centered.reshape(n1, n2, n3, -1)
    a = np.einsum("j,l,ijlk->ik", q2, q3, zt)  # (N1, K)
    dq1 = model.p_factors[0].solve(_dp1(model, theta, p1))  # (N1, p)
    return a.T @ dq1


def d2mean_dtheta2(model: MGPModel, theta, x: FactorPoint, t: float, k: int) -> np.ndarray:
    """(K, p) matrix of second derivatives d^2 mean / d theta d theta_k."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    p = theta.size
    if not 0 <= k < p:
        raise ValueError(f"component index {k} outside 0..{p - 1}")
    p1, p2, p3 = _kernel_vectors(model, theta, x, t)
    q2 = model.p_factors[1].solve(p2)
    q3 = model.p_factors[2].solve(p3)
    n1, n2, n3 = model.design.sizes
    zt = model.centered.reshape(n1, n2, n3, -1)
    a = np.einsum("j,l,ijlk->ik", q2, q3, zt)
    diff = theta[None, :] - model.design.zeta1  # (N1, p)
    al = model.alpha[:5]
    d2p1 = 4.0 * al[None, :] * al[k] * diff * diff[:, [k]] * p1[:, None]
    d2p1[:, k] -= 2.0 * al[k] * p1
    return a.T @ model.p_factors[0].solve(d2p1)


class DesignPredictor:
    """Emulator view over a fixed (x, t) design, for use as a mu provider.

    For each design row the factor/time kernel contractions are precomputed,
    so a call costs one theta kernel vector plus one (N1, m, K) contraction.
    Derivative methods mirror the mean's dependence on theta alone.
    """

    def __init__(self, model: MGPModel, design_rows):
        self.model = model
        self.rows = list(design_rows)  # [(FactorPoint, time)]
        d = model.design
        a = model.alpha
        xs = d.factor_coords()
        q2s, q3s = [], []
        for x, t in self.rows:
            p2 = gauss_kernel_matrix(xs, x.as_array().reshape(1, -1), a[5:10])[:, 0]
            p3 = gauss_kernel_matrix(d.zeta3.reshape(-1, 1), np.array([[float(t)]]), a[10:])[:, 0]
            q2 = model.p_factors[1].solve(p2)
            q3 = model.p_factors[2].solve(p3)
            q2s.append((p2, q2))
            q3s.append((p3, q3))
        n1, n2, n3 = d.sizes
        zt = model.centered.reshape(n1, n2, n3, -1)
        # per-row (N1, K) contraction over the x/t axes
        self._a = np.stack(
            [np.einsum("j,l,ijlk->ik", q2, q3, zt) for (_, q2), (_, q3) in zip(q2s, q3s)]
        )  # (m, N1, K)
        self._xt_factor = np.array(
            [float(p2 @ q2) * float(p3 @ q3) for (p2, q2), (p3, q3) in zip(q2s, q3s)]
        )
        self.eval_count = 0

    def _theta_kernel(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        p1 = gauss_kernel_matrix(
            self.model.design.zeta1, theta.reshape(1, -1), self.model.alpha[:5]
        )[:, 0]
        return theta, p1, self.model.p_factors[0].solve(p1)

    def __call__(self, theta) -> np.ndarray:
        """(m, K) predictive mean over the design rows."""
        self.eval_count += 1
        _, _, q1 = self._theta_kernel(theta)
        return self.model.beta_hat[None, :] + np.einsum("i,mik->mk", q1, self._a)

    def cov_factors(self, theta) -> np.ndarray:
        """(m,) kriging variance factors; cov at row j is factor_j * Psi hat."""
        _, p1, q1 = self._theta_kernel(theta)
        return np.maximum(1.0 - float(p1 @ q1) * self._xt_factor, 0.0)

    def dmean(self, theta) -> np.ndarray:
        """(m, K, p) first derivatives of the mean in theta."""
        theta, p1, _ = self._theta_kernel(theta)
        dq1 = self.model.p_factors[0].solve(_dp1(self.model, theta, p1))
        return np.einsum("mik,ip->mkp", self._a, dq1)

    def d2mean(self, theta, k: int) -> np.ndarray:
        """(m, K, p) second derivatives d^2 mean / d theta d theta_k."""
        theta, p1, _ = self._theta_kernel(theta)
        diff = theta[None, :] - self.model.design.zeta1
        al = self.model.alpha[:5]
        d2p1 = 4.0 * al[None, :] * al[k] * diff * diff[:, [k]] * p1[:, None]
        d2p1[:, k] -= 2.0 * al[k] * p1
        return np.einsum("mik,ip->mkp", self._a, self.model.p_factors[0].solve(d2p1))

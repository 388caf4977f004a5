"""Posterior sampling engine.

Blocked Gibbs sweep over (d*, Omega, Sigma, y_C) with conjugate draws,
Riemann-manifold Langevin Metropolis-Hastings moves for theta, a = log rho
and b = log psi, and parallel tempering across a ladder whose two coldest
chains both sit at temperature one: chain 0 evaluates the mean function
through the ODE solver, every other chain through the emulator mean. All
derivative information comes from the emulator on every chain.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .integrate import IntegrationError
from .model import (
    ExperimentData,
    ParameterState,
    Priors,
    build_S,
    build_t_blocks,
    scaled_design_coords,
    tempered_log_posterior,
)
from .stats import (
    FactorizationError,
    SpdMatrix,
    inv_wishart_sample,
    mvn_logpdf,
    mvn_sample,
    substream,
    trunc_mvn_gibbs,
)

SWAP_TARGET = 0.234
STEP_TARGET = 0.574
RMLMH_BLOCKS = ("theta", "a", "b")
ALL_BLOCKS = ("d_star", "omega", "sigma", "y_cens") + RMLMH_BLOCKS


class SamplerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# mean-function providers


class MuBundle:
    """Per-chain access to the mean function and its emulator derivatives.

    ``value`` maps theta to the (m, K) mean over the data's unique design;
    ``deriv`` supplies dmean/d2mean (the emulator predictor, or an exact
    provider in reduced models). Values are memoised on the theta bytes so
    that a sweep costs exactly one fresh evaluation (the proposed point) and
    swap-step cross evaluations are reused by the following sweep.
    """

    def __init__(self, value: Callable[[np.ndarray], np.ndarray], deriv=None, max_cache: int = 16):
        self.value = value
        self.deriv = deriv if deriv is not None else value
        self.max_cache = int(max_cache)
        self._cache: OrderedDict[bytes, np.ndarray] = OrderedDict()

    def mean(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            hit = np.asarray(self.value(theta), dtype=float)
            self._cache[key] = hit
            while len(self._cache) > self.max_cache:
                self._cache.popitem(last=False)
        else:
            # true LRU: the retained state is touched every sweep and must
            # never age out, or the one-eval-per-sweep accounting breaks
            self._cache.move_to_end(key)
        return hit

    def dmean(self, theta) -> np.ndarray:
        return np.asarray(self.deriv.dmean(theta), dtype=float)

    def d2mean(self, theta, k: int) -> np.ndarray:
        return np.asarray(self.deriv.d2mean(theta, k), dtype=float)


def _mean_of(mu_provider, theta) -> np.ndarray:
    if isinstance(mu_provider, MuBundle):
        return mu_provider.mean(theta)
    if callable(mu_provider):
        return np.asarray(mu_provider(np.asarray(theta, dtype=float)), dtype=float)
    return np.asarray(mu_provider, dtype=float)


# ---------------------------------------------------------------------------
# conjugate full conditionals


def gibbs_dstar(state: ParameterState, data: ExperimentData, temperature: float,
                mu_provider, rng) -> np.ndarray:
    """Draw d* from its Gaussian full conditional at temperature tau.

    Precision P = Omega^-1 kron (G' T^-1 G) + Sigma^-1 kron S^-1 and right
    side r = vec(G' T^-1 Y Omega^-1) + vec(S^-1 M Sigma^-1); the draw is
    mean P^-1 r plus sqrt(tau) L^-T z for P = L L'. Only the (mK, mK)
    precision is ever formed densely; everything enters through Cholesky
    solves of the small factors.
    """
    tau = float(temperature)
    m, k = state.d_star.shape
    y = data.assemble_y(state.y_cens)
    mu = _mean_of(mu_provider, state.theta)

    omega_inv = SpdMatrix(state.omega).inverse().dense()
    sigma_inv = SpdMatrix(state.sigma).inverse().dense()
    s = build_S(state.psi, data.unique_design())
    s_inv = s.inverse().dense()

    # blockwise T^-1 applied to Y and to the incidence columns
    t_solve_y = np.empty_like(y)
    gt_tinv_g = np.zeros((m, m))
    for block, sl in zip(build_t_blocks(state.rho, data), data.run_slices()):
        t_blk = SpdMatrix(block)
        t_solve_y[sl] = t_blk.solve(y[sl])
        cols = data.obs_to_unique[sl]
        g_blk = np.zeros((block.shape[0], m))
        g_blk[np.arange(block.shape[0]), cols] = 1.0
        gt_tinv_g += g_blk.T @ t_blk.solve(g_blk)

    g = data.incidence_matrix()
    rhs = (g.T @ t_solve_y @ omega_inv).flatten(order="F")
    rhs += (s.solve(mu) @ sigma_inv).flatten(order="F")

    prec = np.kron(omega_inv, gt_tinv_g) + np.kron(sigma_inv, s_inv)
    prec_spd = SpdMatrix(prec)
    mean = prec_spd.solve(rhs)
    z = rng.standard_normal(m * k)
    draw = mean + math.sqrt(tau) * solve_triangular(prec_spd.chol.T, z, lower=False)
    return draw.reshape(k, m).T


def _tempered_iw(residual_quad: np.ndarray, n_like: int, priors: Priors,
                 temperature: float, rng) -> np.ndarray:
    k = residual_quad.shape[0]
    tau = float(temperature)
    dof = (priors.iw_dof + n_like + k + 1) / tau - k - 1
    if dof <= k - 1:
        raise SamplerError(
            f"tempered inverse-Wishart dof {dof:.4g} <= K-1 = {k - 1}; "
            f"temperature {tau:.4g} is too high for {n_like} observations"
        )
    scale = (priors.scale_matrix(k) + residual_quad) / tau
    return inv_wishart_sample(dof, SpdMatrix(scale), rng)


def gibbs_omega(state: ParameterState, data: ExperimentData, priors: Priors,
                temperature: float, rng) -> np.ndarray:
    """Observation-covariance draw: IW with tempered dof and scale."""
    y = data.assemble_y(state.y_cens)
    resid = y - state.d_star[data.obs_to_unique]
    quad = np.zeros((state.omega.shape[0],) * 2)
    for block, sl in zip(build_t_blocks(state.rho, data), data.run_slices()):
        quad += resid[sl].T @ SpdMatrix(block).solve(resid[sl])
    return _tempered_iw(quad, data.n, priors, temperature, rng)


def gibbs_sigma(state: ParameterState, data: ExperimentData, priors: Priors,
                temperature: float, mu_provider, rng) -> np.ndarray:
    """Discrepancy-covariance draw: IW against the centred d* residual."""
    resid = state.d_star - _mean_of(mu_provider, state.theta)
    s = build_S(state.psi, data.unique_design())
    quad = resid.T @ s.solve(resid)
    return _tempered_iw(quad, data.m, priors, temperature, rng)


def _vec_partition(data: ExperimentData) -> tuple[np.ndarray, np.ndarray]:
    # built once per dataset: vec positions (k*n + i) of censored cells
    cached = data.__dict__.get("_vec_partition")
    if cached is None:
        n = data.n
        cens = np.array([k * n + i for i, k in data.censored_cells()], dtype=int)
        mask = np.ones(n * data.n_outputs, dtype=bool)
        mask[cens] = False
        cached = (cens, np.nonzero(mask)[0])
        data.__dict__["_vec_partition"] = cached
    return cached


def gibbs_censored(state: ParameterState, data: ExperimentData, temperature: float,
                   rng, sweeps: int = 5) -> np.ndarray:
    """Redraw the latent censored log amounts below log chi.

    Conditional of the censored block given the observed block of
    N(vec(G d*), tau Omega kron T), computed through the joint precision:
    cov = tau (P_CC)^-1 and mean = b_C - (P_CC)^-1 P_CS (y_S - b_S).
    """
    cens_idx, obs_idx = _vec_partition(data)
    if cens_idx.size == 0:
        return state.y_cens.copy()
    tau = float(temperature)

    omega_inv = SpdMatrix(state.omega).inverse().dense()
    t_inv = np.zeros((data.n, data.n))
    for block, sl in zip(build_t_blocks(state.rho, data), data.run_slices()):
        t_inv[sl, sl] = SpdMatrix(block).inverse().dense()
    prec = np.kron(omega_inv, t_inv)

    b = state.d_star[data.obs_to_unique].flatten(order="F")
    y = data.assemble_y(state.y_cens).flatten(order="F")

    p_cc = SpdMatrix(prec[np.ix_(cens_idx, cens_idx)])
    p_cs = prec[np.ix_(cens_idx, obs_idx)]
    mean = b[cens_idx] - p_cc.solve(p_cs @ (y[obs_idx] - b[obs_idx]))
    cov = tau * p_cc.inverse().dense()

    upper = math.log(data.chi)
    init = np.minimum(state.y_cens, upper)
    return trunc_mvn_gibbs(mean, cov, np.full(cens_idx.size, upper), sweeps, rng, init=init)


# ---------------------------------------------------------------------------
# manifold MH components


@dataclass
class RmlmhComponents:
    """Callable bundle h, grad h, G and dG/ddelta_j for one block."""

    log_target: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    tensor: Callable[[np.ndarray], np.ndarray]
    tensor_derivs: Callable[[np.ndarray], list[np.ndarray]]
    fallback_cov: np.ndarray


def theta_components(state: ParameterState, data: ExperimentData, mu_bundle: MuBundle,
                     priors: Priors) -> RmlmhComponents:
    """Gradient, tensor and tensor derivatives for the theta block.

    h(theta) = -0.5 vec(r)' (Sigma^-1 kron S^-1) vec(r) + log prior with
    r = d* - m(theta). The tensor is J' W J + Delta^-1; its derivative in
    theta_k is the symmetric H_k' W J + J' W H_k (the Gauss-Newton form is
    symmetric by construction, so the one-sided product alone cannot be).
    """
    s = build_S(state.psi, data.unique_design())
    sigma_inv = SpdMatrix(state.sigma).inverse().dense()
    d_star = state.d_star
    p = priors.p
    prior_prec = 1.0 / priors.theta_var

    def w_apply(block: np.ndarray) -> np.ndarray:
        # (Sigma^-1 kron S^-1) on an (m, K) matrix, or stacked (m, K, p)
        if block.ndim == 2:
            return s.solve(block) @ sigma_inv
        m, k, q = block.shape
        flat = s.solve(block.reshape(m, k * q))
        return np.einsum("ikp,kl->ilp", flat.reshape(m, k, q), sigma_inv)

    def log_target(theta: np.ndarray) -> float:
        r = d_star - mu_bundle.mean(theta)
        quad = float(np.sum(r * w_apply(r)))
        z = theta - priors.theta_mean
        return -0.5 * quad - 0.5 * float(np.sum(z * z * prior_prec))

    def grad(theta: np.ndarray) -> np.ndarray:
        r = d_star - mu_bundle.mean(theta)
        wr = w_apply(r)
        j = mu_bundle.dmean(theta)
        g = np.einsum("ikp,ik->p", j, wr)
        return g - prior_prec * (theta - priors.theta_mean)

    def tensor(theta: np.ndarray) -> np.ndarray:
        j = mu_bundle.dmean(theta)
        wj = w_apply(j)
        return np.einsum("iku,ikv->uv", j, wj) + np.diag(prior_prec)

    def tensor_derivs(theta: np.ndarray) -> list[np.ndarray]:
        j = mu_bundle.dmean(theta)
        wj = w_apply(j)
        out = []
        for k in range(p):
            h_k = mu_bundle.d2mean(theta, k)
            half = np.einsum("iku,ikv->uv", h_k, wj)
            out.append(half + half.T)
        return out

    return RmlmhComponents(log_target, grad, tensor, tensor_derivs,
                           fallback_cov=np.diag(priors.theta_var))


def a_components(state: ParameterState, data: ExperimentData,
                 priors: Priors) -> RmlmhComponents:
    """Components for a = log rho.

    Each run contributes -K/2 log|T_i| and a quadratic in the residual
    E = Y - G d*; dT_i/da = -e^a (t_j - t_l)^2 T_i elementwise. The tensor
    sums the per-run expected information and keeps the prior curvature
    term -rate * e^a exactly as stated, so it can lose positivity for
    small rho; rmlmh_update then falls back to a random walk.
    """
    y = data.assemble_y(state.y_cens)
    resid = y - state.d_star[data.obs_to_unique]
    omega_inv = SpdMatrix(state.omega).inverse().dense()
    k_out = data.n_outputs
    rate = priors.corr_rate
    slices = data.run_slices()
    sq_gaps = [np.subtract.outer(t, t) ** 2 for _, t in data.runs]

    def blocks_at(a: float):
        rho = math.exp(a)
        for d2, sl in zip(sq_gaps, slices):
            t_i = np.exp(-rho * d2)
            yield SpdMatrix(t_i), -rho * d2 * t_i, rho * d2 * (rho * d2 - 1.0) * t_i, sl

    def log_target(a_arr: np.ndarray) -> float:
        a = float(a_arr[0])
        total = a - rate * math.exp(a)
        for t_i, _, _, sl in blocks_at(a):
            f = t_i.solve(resid[sl])
            total -= 0.5 * k_out * t_i.logdet()
            total -= 0.5 * float(np.trace(omega_inv @ resid[sl].T @ f))
        return total

    def grad(a_arr: np.ndarray) -> np.ndarray:
        a = float(a_arr[0])
        total = 1.0 - rate * math.exp(a)
        for t_i, t_a, _, sl in blocks_at(a):
            f = t_i.solve(resid[sl])
            total -= 0.5 * k_out * float(np.trace(t_i.solve(t_a)))
            total += 0.5 * float(np.trace(omega_inv @ f.T @ t_a @ f))
        return np.array([total])

    def tensor(a_arr: np.ndarray) -> np.ndarray:
        a = float(a_arr[0])
        total = -rate * math.exp(a)
        for t_i, t_a, _, _ in blocks_at(a):
            m_i = t_i.solve(t_a)
            total += 0.5 * k_out * float(np.sum(m_i * m_i.T))
        return np.array([[total]])

    def tensor_derivs(a_arr: np.ndarray) -> list[np.ndarray]:
        a = float(a_arr[0])
        total = -rate * math.exp(a)
        for t_i, t_a, t_aa, _ in blocks_at(a):
            m_i = t_i.solve(t_a)
            total += k_out * float(np.trace(m_i @ t_i.solve(t_aa - t_a @ m_i)))
        return [np.array([[total]])]

    return RmlmhComponents(log_target, grad, tensor, tensor_derivs,
                           fallback_cov=np.eye(1))


def b_components(state: ParameterState, data: ExperimentData, mu_bundle,
                 priors: Priors) -> RmlmhComponents:
    """Components for b = log psi over the discrepancy correlation S."""
    coords = scaled_design_coords(data.unique_design())
    df = np.zeros((data.m, data.m))
    for f in range(5):
        df += np.subtract.outer(coords[:, f], coords[:, f]) ** 2
    dt = np.subtract.outer(coords[:, 5], coords[:, 5]) ** 2
    gaps = (df, dt)

    resid = state.d_star - _mean_of(mu_bundle, state.theta)
    sigma_inv = SpdMatrix(state.sigma).inverse().dense()
    k_out = data.n_outputs
    rate = priors.corr_rate

    def s_parts(b: np.ndarray):
        psi = np.exp(b)
        s = SpdMatrix(np.exp(-psi[0] * df - psi[1] * dt))
        s_i = [-psi[i] * gaps[i] * s.mat for i in range(2)]
        return psi, s, s_i

    def second(psi, s_mat, i: int, k: int) -> np.ndarray:
        if i == k:
            return psi[i] * gaps[i] * (psi[i] * gaps[i] - 1.0) * s_mat
        return psi[0] * psi[1] * df * dt * s_mat

    def log_target(b: np.ndarray) -> float:
        psi, s, _ = s_parts(b)
        quad = float(np.trace(sigma_inv @ resid.T @ s.solve(resid)))
        return (-0.5 * k_out * s.logdet() - 0.5 * quad
                + float(np.sum(b - rate * psi)))

    def grad(b: np.ndarray) -> np.ndarray:
        psi, s, s_i = s_parts(b)
        f = s.solve(resid)
        out = np.empty(2)
        for i in range(2):
            out[i] = (-0.5 * k_out * float(np.trace(s.solve(s_i[i])))
                      + 0.5 * float(np.trace(sigma_inv @ f.T @ s_i[i] @ f))
                      + 1.0 - rate * psi[i])
        return out

    def tensor(b: np.ndarray) -> np.ndarray:
        psi, s, s_i = s_parts(b)
        x = [s.solve(s_i[i]) for i in range(2)]
        g = np.empty((2, 2))
        for i in range(2):
            for j in range(i, 2):
                g[i, j] = g[j, i] = 0.5 * k_out * float(np.sum(x[i] * x[j].T))
        g[np.diag_indices(2)] -= rate * psi
        return g

    def tensor_derivs(b: np.ndarray) -> list[np.ndarray]:
        psi, s, s_i = s_parts(b)
        x = [s.solve(s_i[i]) for i in range(2)]
        out = []
        for k in range(2):
            dg = np.empty((2, 2))
            for i in range(2):
                for j in range(i, 2):
                    t1 = float(np.trace(x[i] @ s.solve(second(psi, s.mat, j, k))))
                    t2 = float(np.trace(x[i] @ x[k] @ x[j]))
                    t3 = float(np.trace(x[j] @ s.solve(second(psi, s.mat, i, k))))
                    t4 = float(np.trace(x[i] @ x[j] @ x[k]))
                    dg[i, j] = dg[j, i] = 0.5 * k_out * (t1 - t2 + t3 - t4)
            dg[k, k] -= rate * psi[k]
            out.append(dg)
        return out

    return RmlmhComponents(log_target, grad, tensor, tensor_derivs,
                           fallback_cov=np.eye(2))


# ---------------------------------------------------------------------------
# manifold Langevin MH


def _proposal_params(delta: np.ndarray, comps: RmlmhComponents, epsilon: float,
                     temperature: float):
    """Proposal mean and covariance at delta; falls back to a random walk
    when the tensor is not positive definite even after jitter."""
    eps2 = float(epsilon) ** 2
    tau = float(temperature)
    g = comps.tensor(delta)
    g = 0.5 * (g + g.T)
    try:
        # factorization is lazy; force it here so the fallback triggers
        g_inv = SpdMatrix(g).inverse().dense()
    except FactorizationError:
        return delta.copy(), SpdMatrix(tau * eps2 * comps.fallback_cov), True
    grad = comps.grad(delta)
    d_gs = comps.tensor_derivs(delta)

    n1 = np.zeros(delta.size)
    traces = np.empty(len(d_gs))
    for j, dg in enumerate(d_gs):
        m_j = g_inv @ dg @ g_inv
        n1 += m_j[:, j]
        traces[j] = np.trace(g_inv @ dg)
    n2 = g_inv @ traces

    mean = delta + 0.5 * eps2 * (g_inv @ grad) - eps2 * n1 + 0.5 * eps2 * n2
    return mean, SpdMatrix(tau * eps2 * g_inv), False


def rmlmh_update(block: str, state: ParameterState, comps: RmlmhComponents,
                 epsilon: float, temperature: float, rng) -> tuple[np.ndarray, bool, bool]:
    """One manifold MH move; returns (new value, accepted, used fallback).

    The acceptance ratio uses the tempered target and the proposal density
    in both directions, each built from the tensor at its own end point.
    """
    if block == "theta":
        current = state.theta.copy()
    elif block == "a":
        current = np.array([math.log(state.rho)])
    elif block == "b":
        current = np.log(state.psi)
    else:
        raise ValueError(f"unknown RMLMH block {block!r}")
    tau = float(temperature)

    mean_c, cov_c, fb_c = _proposal_params(current, comps, epsilon, tau)
    proposal = mvn_sample(mean_c, cov_c, rng)
    try:
        h_prop = comps.log_target(proposal)
        if not math.isfinite(h_prop):
            return current, False, fb_c
        h_curr = comps.log_target(current)
        mean_p, cov_p, fb_p = _proposal_params(proposal, comps, epsilon, tau)
        log_alpha = ((h_prop - h_curr) / tau
                     + mvn_logpdf(current, mean_p, cov_p)
                     - mvn_logpdf(proposal, mean_c, cov_c))
    except (FactorizationError, IntegrationError, FloatingPointError, ValueError):
        return current, False, fb_c
    if math.log(rng.random()) < log_alpha:
        return proposal, True, fb_c or fb_p
    return current, False, fb_c or fb_p


# ---------------------------------------------------------------------------
# chain bookkeeping


@dataclass
class ChainSet:
    """States, temperatures and per-chain tuning for parallel tempering."""

    chains: list[ParameterState]
    temperatures: np.ndarray
    epsilons: np.ndarray  # (n_chains, 3) step sizes for theta, a, b
    omega_prob: float = 0.9
    blocks: tuple = ALL_BLOCKS
    seed: int = 0
    attempts: np.ndarray = field(init=False)
    accepts: np.ndarray = field(init=False)
    fallbacks: np.ndarray = field(init=False)
    swap_attempts: np.ndarray = field(init=False)
    swap_accepts: np.ndarray = field(init=False)
    sweep_count: int = 0
    adapt_round: int = 0

    def __post_init__(self):
        self.temperatures = np.asarray(self.temperatures, dtype=float)
        self.epsilons = np.asarray(self.epsilons, dtype=float)
        r = len(self.chains)
        if self.temperatures.shape != (r,):
            raise ValueError("one temperature per chain required")
        if self.temperatures[0] != 1.0:
            raise ValueError("the coldest chain must run at temperature 1")
        gaps = np.diff(self.temperatures)
        if np.any(gaps < 0.0) or np.any(gaps[1:] <= 0.0):
            # only the leading pair may share a temperature (the twin
            # unit-temperature chains); the rest must strictly increase
            raise ValueError("temperatures must increase strictly beyond the first pair")
        if self.epsilons.shape != (r, 3) or np.any(self.epsilons <= 0.0):
            raise ValueError(f"epsilons must be positive with shape ({r}, 3)")
        if not 0.0 < self.omega_prob <= 1.0:
            raise ValueError("omega_prob must lie in (0, 1]")
        self.attempts = np.zeros((r, 3), dtype=int)
        self.accepts = np.zeros((r, 3), dtype=int)
        self.fallbacks = np.zeros((r, 3), dtype=int)
        self.swap_attempts = np.zeros(max(r - 1, 0), dtype=int)
        self.swap_accepts = np.zeros(max(r - 1, 0), dtype=int)
        self.chain_rngs = [substream(self.seed, "chain", r_i) for r_i in range(r)]

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    def acceptance_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.attempts > 0, self.accepts / np.maximum(self.attempts, 1), np.nan)

    def swap_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.swap_attempts > 0,
                            self.swap_accepts / np.maximum(self.swap_attempts, 1), np.nan)

    def reset_windows(self):
        self.attempts[:] = 0
        self.accepts[:] = 0
        self.swap_attempts[:] = 0
        self.swap_accepts[:] = 0


def make_chain_set(states: Sequence[ParameterState], seed: int,
                   temperatures=None, omega_prob: float = 0.9,
                   epsilon0: float = 0.5, blocks: tuple = ALL_BLOCKS,
                   duplicate_cold: bool = True) -> ChainSet:
    """Ladder construction; default temperatures 1, 1, 2, 4, ... 2^(r-1).

    ``duplicate_cold`` keeps the twin unit-temperature pair used by the
    sampling phase; exploration ladders (all emulator) pass False to get
    the plain geometric ladder 1, 2, 4, ...
    """
    states = [s.copy() for s in states]
    r = len(states)
    if temperatures is None:
        if duplicate_cold:
            temperatures = [1.0, 1.0] + [2.0 ** i for i in range(1, r - 1)]
            temperatures = temperatures[:r]
        else:
            temperatures = [2.0 ** i for i in range(r)]
    eps = np.full((r, 3), float(epsilon0))
    return ChainSet(chains=states, temperatures=np.asarray(temperatures, dtype=float),
                    epsilons=eps, omega_prob=omega_prob, blocks=blocks, seed=int(seed))


# ---------------------------------------------------------------------------
# sweep, swap, tempering step


def gibbs_sweep(chain_set: ChainSet, r: int, data: ExperimentData, priors: Priors,
                mu_bundle: MuBundle, rng=None) -> None:
    """One full update of chain r in place: d*, Omega, Sigma, y_C, then
    the three manifold blocks."""
    state = chain_set.chains[r]
    tau = float(chain_set.temperatures[r])
    rng = chain_set.chain_rngs[r] if rng is None else rng
    blocks = chain_set.blocks

    if "d_star" in blocks:
        state.d_star = gibbs_dstar(state, data, tau, mu_bundle, rng)
    if "omega" in blocks:
        state.omega = gibbs_omega(state, data, priors, tau, rng)
    if "sigma" in blocks:
        state.sigma = gibbs_sigma(state, data, priors, tau, mu_bundle, rng)
    if "y_cens" in blocks:
        state.y_cens = gibbs_censored(state, data, tau, rng)

    for b_idx, block in enumerate(RMLMH_BLOCKS):
        if block not in blocks:
            continue
        if block == "theta":
            comps = theta_components(state, data, mu_bundle, priors)
        elif block == "a":
            comps = a_components(state, data, priors)
        else:
            comps = b_components(state, data, mu_bundle, priors)
        eps = float(chain_set.epsilons[r, b_idx])
        value, accepted, fallback = rmlmh_update(block, state, comps, eps, tau, rng)
        chain_set.attempts[r, b_idx] += 1
        chain_set.accepts[r, b_idx] += int(accepted)
        chain_set.fallbacks[r, b_idx] += int(fallback)
        if block == "theta":
            state.theta = value
        elif block == "a":
            state.rho = math.exp(float(value[0]))
        else:
            state.psi = np.exp(value)


def _log_u(chain_set: ChainSet, r: int, state: ParameterState, data: ExperimentData,
           priors: Priors, mu_bundles: Sequence[MuBundle]) -> float:
    # log U_r(delta) evaluated with chain r's own mean provider
    mu = mu_bundles[r].mean(state.theta)
    return tempered_log_posterior(state, data, priors, float(chain_set.temperatures[r]),
                                  mu_provider=None, mu_value=mu)


def _swap_attempt(chain_set: ChainSet, pair: int, data: ExperimentData, priors: Priors,
                  mu_bundles: Sequence[MuBundle], rng) -> bool:
    lo, hi = pair, pair + 1
    s_lo, s_hi = chain_set.chains[lo], chain_set.chains[hi]
    log_ratio = (_log_u(chain_set, lo, s_hi, data, priors, mu_bundles)
                 + _log_u(chain_set, hi, s_lo, data, priors, mu_bundles)
                 - _log_u(chain_set, lo, s_lo, data, priors, mu_bundles)
                 - _log_u(chain_set, hi, s_hi, data, priors, mu_bundles))
    chain_set.swap_attempts[pair] += 1
    if math.log(rng.random()) < log_ratio:
        chain_set.chains[lo], chain_set.chains[hi] = s_hi, s_lo
        chain_set.swap_accepts[pair] += 1
        return True
    return False


def pt_step(chain_set: ChainSet, data: ExperimentData, priors: Priors,
            mu_providers: Sequence[MuBundle], rng) -> str:
    """One tempering iteration: Gibbs sweep of every chain with probability
    omega, otherwise a single random neighbour-pair swap attempt."""
    if len(mu_providers) != chain_set.n_chains:
        raise ValueError("one mean provider per chain required")
    if chain_set.n_chains > 1 and rng.random() >= chain_set.omega_prob:
        pair = int(rng.integers(chain_set.n_chains - 1))
        _swap_attempt(chain_set, pair, data, priors, mu_providers, rng)
        return "swap"
    for r in range(chain_set.n_chains):
        gibbs_sweep(chain_set, r, data, priors, mu_providers[r])
    chain_set.sweep_count += 1
    return "sweep"


def adapt_temperatures(chain_set: ChainSet, swap_stats=None) -> ChainSet:
    """Stochastic-approximation update of the log temperature gaps toward
    a per-pair swap acceptance of 0.234. The unit-temperature pair (and
    any zero gap) is pinned; call only during burn-in."""
    if swap_stats is None:
        attempts, accepts = chain_set.swap_attempts, chain_set.swap_accepts
    else:
        attempts, accepts = (np.asarray(v, dtype=float) for v in swap_stats)
    gaps = np.diff(chain_set.temperatures)
    step = 1.0 / (1.0 + chain_set.adapt_round) ** 0.6
    for j in range(gaps.size):
        if gaps[j] <= 0.0 or attempts[j] <= 0:
            continue
        rate = accepts[j] / attempts[j]
        gaps[j] = math.exp(math.log(gaps[j]) + step * (rate - SWAP_TARGET))
    base = chain_set.temperatures[0]
    chain_set.temperatures = np.concatenate([[base], base + np.cumsum(gaps)])
    chain_set.adapt_round += 1
    return chain_set


def adapt_epsilons(chain_set: ChainSet) -> None:
    """Robbins-Monro tuning of the per-block step sizes toward acceptance
    0.574, using the counter window since the last reset."""
    step = 1.0 / (1.0 + chain_set.adapt_round) ** 0.6
    rates = chain_set.acceptance_rates()
    mask = chain_set.attempts > 0
    log_eps = np.log(chain_set.epsilons)
    log_eps[mask] += step * (rates[mask] - STEP_TARGET)
    chain_set.epsilons = np.exp(np.clip(log_eps, -12.0, 4.0))


# ---------------------------------------------------------------------------
# prior draws and phase drivers


def draw_prior_state(data: ExperimentData, priors: Priors, mu_provider, rng,
                     n_outputs: int | None = None) -> ParameterState:
    """A full parameter state drawn from the prior (d* from its model
    conditional); censored latents start at the bound log chi."""
    k = data.n_outputs if n_outputs is None else int(n_outputs)
    theta = priors.theta_mean + np.sqrt(priors.theta_var) * rng.standard_normal(priors.p)
    scale = SpdMatrix(priors.scale_matrix(k))
    omega = inv_wishart_sample(priors.iw_dof, scale, rng)
    sigma = inv_wishart_sample(priors.iw_dof, scale, rng)
    rho = float(rng.exponential(1.0 / priors.corr_rate))
    psi = rng.exponential(1.0 / priors.corr_rate, size=2)
    mu = _mean_of(mu_provider, theta)
    s = build_S(psi, data.unique_design())
    # matrix-normal draw through the two Cholesky factors
    z = rng.standard_normal((data.m, k))
    d_star = mu + s.chol @ z @ np.linalg.cholesky(sigma).T
    n_cens = data.n_censored
    y_cens = np.full(n_cens, math.log(data.chi) if data.chi > 0 else 0.0)
    return ParameterState(theta=theta, d_star=d_star, omega=omega, sigma=sigma,
                          rho=rho, psi=psi, y_cens=y_cens)


@dataclass
class PhaseConfig:
    """Knobs shared by the exploration and sampling drivers."""

    n_chains: int = 6  # sampling phase: twin cold chains plus the ladder
    omega_prob: float = 0.9
    epsilon0: float = 0.5
    burn_frac: float = 0.2
    adapt_interval: int = 25
    thin: int = 1
    trunc_sweeps: int = 5
    # exploration
    n1_initial: int = 50
    n1_final: int = 100
    points_per_iter: int = 5
    steps_per_iter: int = 50
    alpha_starts: int = 20
    alpha_refit_starts: int = 4
    blocks: tuple = ALL_BLOCKS


@dataclass
class PosteriorSample:
    """Retained chain-0 draws plus run diagnostics."""

    theta: np.ndarray  # (B, p)
    rho: np.ndarray  # (B,)
    psi: np.ndarray  # (B, 2)
    omega: np.ndarray  # (B, K, K)
    sigma: np.ndarray  # (B, K, K)
    d_star: np.ndarray  # (B, m, K)
    y_cens: np.ndarray  # (B, n_censored)
    diagnostics: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.theta.shape[0]


def collect_states(states: list[ParameterState], diagnostics=None) -> PosteriorSample:
    if not states:
        z = np.zeros
        return PosteriorSample(z((0, 5)), z(0), z((0, 2)), z((0, 3, 3)), z((0, 3, 3)),
                               z((0, 0, 0)), z((0, 0)), diagnostics or {})
    return PosteriorSample(
        theta=np.array([s.theta for s in states]),
        rho=np.array([s.rho for s in states]),
        psi=np.array([s.psi for s in states]),
        omega=np.array([s.omega for s in states]),
        sigma=np.array([s.sigma for s in states]),
        d_star=np.array([s.d_star for s in states]),
        y_cens=np.array([s.y_cens for s in states]),
        diagnostics=diagnostics or {},
    )


def sample_to_csv(sample: PosteriorSample, path, include_latent: bool = False,
                  thin: int = 1, header_lines=()) -> None:
    """One row per retained draw: theta, log rho, log psi, lower triangles
    of Omega and Sigma, optionally the latent d* and censored values."""
    import csv as _csv

    thin = max(1, int(thin))
    k = sample.omega.shape[1] if sample.size else 0
    m = sample.d_star.shape[1] if sample.size else 0
    cols = [f"theta_{i + 1}" for i in range(sample.theta.shape[1])]
    cols += ["log_rho", "log_psi_1", "log_psi_2"]
    tril = [(i, j) for i in range(k) for j in range(i + 1)]
    cols += [f"omega_{i + 1}{j + 1}" for i, j in tril]
    cols += [f"sigma_{i + 1}{j + 1}" for i, j in tril]
    if include_latent:
        cols += [f"d_star_{j + 1}_{kk + 1}" for kk in range(k) for j in range(m)]
        cols += [f"y_cens_{i + 1}" for i in range(sample.y_cens.shape[1])]
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = _csv.writer(fh)
        writer.writerow(cols)
        for b in range(0, sample.size, thin):
            row = list(sample.theta[b]) + [math.log(sample.rho[b])] + list(np.log(sample.psi[b]))
            row += [sample.omega[b, i, j] for i, j in tril]
            row += [sample.sigma[b, i, j] for i, j in tril]
            if include_latent:
                row += [sample.d_star[b, j, kk] for kk in range(k) for j in range(m)]
                row += list(sample.y_cens[b])
            writer.writerow([f"{v:.17g}" for v in row])


def sample_from_csv(path, data: ExperimentData) -> list[ParameterState]:
    """Rebuild full parameter states from a samples CSV written with
    include_latent=True; the latent d* columns are required."""
    import csv as _csv

    with open(path) as fh:
        reader = _csv.reader(r for r in fh if not r.startswith("#"))
        cols = next(reader)
        rows = [[float(v) for v in rec] for rec in reader if rec]

    k, m = data.n_outputs, data.m
    p = sum(1 for c in cols if c.startswith("theta_"))
    n_cens = len(data.censored_cells())
    tril = [(i, j) for i in range(k) for j in range(i + 1)]
    expected = ([f"theta_{i + 1}" for i in range(p)]
                + ["log_rho", "log_psi_1", "log_psi_2"]
                + [f"omega_{i + 1}{j + 1}" for i, j in tril]
                + [f"sigma_{i + 1}{j + 1}" for i, j in tril]
                + [f"d_star_{j + 1}_{kk + 1}" for kk in range(k) for j in range(m)]
                + [f"y_cens_{i + 1}" for i in range(n_cens)])
    if cols != expected:
        raise ValueError(
            "samples CSV does not match this data set; latent columns are "
            f"required (got {len(cols)} columns, expected {len(expected)})"
        )

    states = []
    for row in rows:
        row = np.asarray(row, dtype=float)
        pos = p + 3
        omega = np.empty((k, k))
        for (i, j), v in zip(tril, row[pos:pos + len(tril)]):
            omega[i, j] = omega[j, i] = v
        pos += len(tril)
        sigma = np.empty((k, k))
        for (i, j), v in zip(tril, row[pos:pos + len(tril)]):
            sigma[i, j] = sigma[j, i] = v
        pos += len(tril)
        d_star = row[pos:pos + m * k].reshape(k, m).T
        pos += m * k
        states.append(ParameterState(
            theta=row[:p], d_star=d_star, omega=omega, sigma=sigma,
            rho=math.exp(row[p]), psi=np.exp(row[p + 1:p + 3]),
            y_cens=row[pos:pos + n_cens],
        ))
    return states


@dataclass
class ExplorationResult:
    model: object  # fitted MGPModel
    design: object  # MetaDesign
    z: np.ndarray
    alpha: np.ndarray
    chain_states: list[ParameterState]
    temperatures: np.ndarray
    epsilons: np.ndarray
    theta_added: list[np.ndarray]


def run_exploration_phase(data: ExperimentData, priors: Priors, kinetics,
                          config: PhaseConfig, rng, seed: int = 0) -> ExplorationResult:
    """Adaptive meta-design growth for the sampling-phase emulator.

    Starts from prior draws of theta over the fixed treatment-by-time grid,
    then alternates short tempered runs (all chains on the emulator) with
    augmenting the design at each chain's current theta and refitting.
    """
    from .emulator import DesignPredictor, MetaDesign, evaluate_design, fit_alpha, fit_mgp
    from .design import augment_design, prior_theta_design

    zeta1 = prior_theta_design(config.n1_initial, priors, rng)
    zeta2 = list(data.treatments)
    zeta3 = np.array(sorted({float(t) for times in data.treatment_times for t in times}))
    design = MetaDesign(np.asarray(zeta1), zeta2, zeta3)
    design, z = evaluate_design(design, kinetics=kinetics)
    alpha = fit_alpha(design, z, rng, n_starts=config.alpha_starts)
    model = fit_mgp(design, z, alpha)

    n_chains = config.n_chains - 1 if config.n_chains > 1 else 1
    init = [draw_prior_state(data, priors,
                             DesignPredictor(model, data.unique_design()), rng)
            for _ in range(n_chains)]
    chain_set = make_chain_set(init, seed=seed, omega_prob=config.omega_prob,
                               epsilon0=config.epsilon0, blocks=config.blocks,
                               duplicate_cold=False)

    added: list[np.ndarray] = []
    n_iters = max(0, (config.n1_final - config.n1_initial) // max(1, config.points_per_iter))
    for _ in range(n_iters):
        predictor = DesignPredictor(model, data.unique_design())
        bundles = [MuBundle(predictor, predictor) for _ in range(n_chains)]
        chain_set.reset_windows()
        for _ in range(config.steps_per_iter):
            pt_step(chain_set, data, priors, bundles, rng)
        adapt_temperatures(chain_set)
        adapt_epsilons(chain_set)
        chain_set.reset_windows()

        new_thetas = [chain_set.chains[r].theta.copy()
                      for r in range(min(config.points_per_iter, n_chains))]
        added.extend(new_thetas)
        design, z = augment_design(design, z, new_thetas, kinetics)
        alpha = fit_alpha(design, z, rng, n_starts=config.alpha_refit_starts,
                          extra_starts=[alpha])
        model = fit_mgp(design, z, alpha)

    return ExplorationResult(model=model, design=design, z=z, alpha=alpha,
                             chain_states=[s.copy() for s in chain_set.chains],
                             temperatures=chain_set.temperatures.copy(),
                             epsilons=chain_set.epsilons.copy(),
                             theta_added=added)


def run_sampling_phase(data: ExperimentData, priors: Priors, emulator, kinetics,
                       config: PhaseConfig, rng, n_draws: int = 1000, seed: int = 0,
                       warm=None) -> PosteriorSample:
    """B retained draws of chain 0, whose target uses the true mean
    function; every other chain and all derivatives use the emulator.

    Draws are recorded once per post-burn-in sweep iteration, so chain 0
    performs exactly one fresh ODE evaluation per retained draw (plus one
    per swap attempt against the emulator twin, which the next sweep then
    reuses). Step sizes and temperatures adapt during burn-in only.
    """
    from .emulator import DesignPredictor, MGPModel

    if isinstance(emulator, MGPModel):
        predictor = DesignPredictor(emulator, data.unique_design())
    else:
        predictor = emulator
    true_bundle = MuBundle(kinetics, predictor)
    emu_bundles = [MuBundle(predictor, predictor) for _ in range(config.n_chains - 1)]
    bundles = [true_bundle] + emu_bundles

    if warm is not None and getattr(warm, "chain_states", None):
        base = [s.copy() for s in warm.chain_states]
        states = [base[0].copy()] + base
        while len(states) < config.n_chains:
            states.append(base[-1].copy())
        states = states[: config.n_chains]
        temps = [1.0, 1.0] + list(np.asarray(warm.temperatures[1:], dtype=float))
        temps = np.asarray(temps[: config.n_chains])
        eps = np.vstack([warm.epsilons[:1], warm.epsilons])[: config.n_chains]
    else:
        states = [draw_prior_state(data, priors, bundles[min(r, 1)], rng)
                  for r in range(config.n_chains)]
        temps, eps = None, None

    chain_set = make_chain_set(states, seed=seed, temperatures=temps,
                               omega_prob=config.omega_prob,
                               epsilon0=config.epsilon0, blocks=config.blocks)
    if eps is not None:
        chain_set.epsilons = np.asarray(eps, dtype=float)

    thin = max(1, int(config.thin))
    n_draws = int(n_draws)
    burn_sweeps = int(math.ceil(config.burn_frac * n_draws * thin))
    draws: list[ParameterState] = []
    sweeps_done = 0
    since_adapt = 0
    in_burn = True
    evals_at_steady_start = None

    while len(draws) < n_draws:
        if in_burn and sweeps_done >= burn_sweeps:
            # freeze adaptation; steady-state bookkeeping starts here
            in_burn = False
            chain_set.reset_windows()
            evals_at_steady_start = getattr(kinetics, "eval_count", None)
        kind = pt_step(chain_set, data, priors, bundles, rng)
        if kind == "sweep":
            sweeps_done += 1
            since_adapt += 1
            if in_burn and since_adapt >= config.adapt_interval:
                adapt_epsilons(chain_set)
                adapt_temperatures(chain_set)
                chain_set.reset_windows()
                since_adapt = 0
            elif not in_burn and (sweeps_done - burn_sweeps) % thin == 0:
                draws.append(chain_set.chains[0].copy())

    ode_evals_steady = None
    if evals_at_steady_start is not None:
        ode_evals_steady = getattr(kinetics, "eval_count", 0) - evals_at_steady_start
    # swap counters are only reset during burn-in, so post-burn-in windows
    # accumulate the steady-state swap attempts of the cold pair
    swap01_steady = int(chain_set.swap_attempts[0]) if chain_set.n_chains > 1 else 0

    diag = {
        "acceptance_rates": chain_set.acceptance_rates(),
        "swap_rates": chain_set.swap_rates(),
        "fallbacks": chain_set.fallbacks.copy(),
        "temperatures": chain_set.temperatures.copy(),
        "epsilons": chain_set.epsilons.copy(),
        "ode_evals_steady": ode_evals_steady,
        "swap01_attempts_steady": swap01_steady,
        "burn_sweeps": burn_sweeps,
        "steady_sweeps": max(0, sweeps_done - burn_sweeps),
    }
    return collect_states(draws, diag)

"""Statistical model of the experiment.

Observations are log amounts of (E, F, H) at run/time combinations, modeled
as y = H d* + noise where d* is the hierarchically centred sum of the ODE
response m(theta) and a correlated model discrepancy.  The noise covariance
is Omega (x) T(rho) with T block-diagonal over runs; the discrepancy
covariance is Sigma (x) S(psi) over the m unique (factor point, time)
combinations.  Amounts below the detection threshold chi are left-censored
and carried as latent values.

This module owns the data container, covariance builders, priors, the
tempered log posterior, and synthetic-data generation including the built-in
replica of the six-run experiment.
"""

from __future__ import annotations

import csv as _csv
import math
from dataclasses import dataclass, field

import numpy as np

from .kinetics import (
    DEFAULT_CONSTANTS,
    FACTOR_BOUNDS,
    FactorPoint,
    PhysicalConstants,
    batch_log_amounts,
)
from .stats import (
    KroneckerSpd,
    SpdMatrix,
    gauss_kernel_matrix,
    inv_wishart_logpdf,
    matnorm_logpdf,
    mvn_sample,
)

__all__ = [
    "CSV_COLUMNS",
    "ExperimentData",
    "Priors",
    "ParameterState",
    "KineticsMu",
    "build_T",
    "build_t_blocks",
    "build_S",
    "scaled_design_coords",
    "tempered_log_posterior",
    "simulate_experiment",
    "replica_runs",
    "REPLICA_THETA_TRUE",
    "REPLICA_NOISE",
    "REPLICA_DISCREPANCY",
]

CSV_COLUMNS = ["run", "time_s", "E_mols", "F_mols", "H_mols", "cens_E", "cens_F", "cens_H"]

N_OUTPUTS = 3


# ---------------------------------------------------------------------------
# replica of the six-run experiment


def replica_treatments() -> list[FactorPoint]:
    return [
        FactorPoint(22.50, 91.59, 26.47, 25.00, 31.31),
        FactorPoint(45.00, 91.59, 26.47, 25.00, 32.56),
        FactorPoint(22.50, 91.50, 26.45, 40.00, 31.28),
        FactorPoint(45.00, 91.50, 26.45, 40.00, 32.53),
        FactorPoint(33.75, 91.40, 26.42, 32.50, 31.88),
        FactorPoint(33.75, 91.40, 26.42, 32.50, 31.88),
    ]


_SHARED_56 = [
    4.0, 50.0, 100.0, 180.0, 270.0, 340.0, 400.0, 580.0, 930.0, 1000.0,
    1200.0, 1500.0, 1800.0, 2200.0, 2550.0, 2902.0,
]

_REPLICA_TIMES = [
    # run 1: 17 points
    [0.5, 4.0, 30.0, 75.0, 140.0, 230.0, 330.0, 470.0, 680.0, 890.0, 1130.0,
     1400.0, 1700.0, 2030.0, 2390.0, 2660.0, 2902.0],
    # run 2: 18 points
    [0.5, 2.5, 35.0, 80.0, 150.0, 250.0, 365.0, 520.0, 700.0, 910.0, 1150.0,
     1420.0, 1720.0, 2050.0, 2410.0, 2680.0, 2870.0, 2902.0],
    # run 3: 18 points
    [0.5, 1.3, 40.0, 85.0, 160.0, 250.0, 380.0, 540.0, 715.0, 1035.0, 1180.0,
     1460.0, 1760.0, 2090.0, 2440.0, 2700.0, 2830.0, 2902.0],
    # run 4: 20 points
    [0.5, 3.5, 45.0, 95.0, 170.0, 240.0, 310.0, 385.0, 555.0, 820.0, 1060.0,
     1300.0, 1540.0, 1790.0, 2120.0, 2300.0, 2460.0, 2620.0, 2800.0, 2902.0],
    # runs 5 and 6: 16 shared points, then two run-specific tails
    _SHARED_56 + [1620.0, 1825.0],
    _SHARED_56 + [1624.0, 1829.0],
]


def replica_runs() -> list[tuple[FactorPoint, np.ndarray]]:
    """The six (treatment, time grid) runs of the built-in experiment replica."""
    return [
        (x, np.array(t)) for x, t in zip(replica_treatments(), _REPLICA_TIMES)
    ]


# ground truth used by the synthetic replica (and its tests)
REPLICA_THETA_TRUE = np.array([-9.90, -13.00, -11.78, 10.00, 10.00])
REPLICA_NOISE = {"omega": np.diag([0.03**2, 0.05**2, 0.05**2]), "rho": 1e-3}
REPLICA_DISCREPANCY = {"sigma": 0.02**2 * np.eye(3), "psi": np.array([1.0, 1e-4])}


# ---------------------------------------------------------------------------
# data container


def _same_point(a: FactorPoint, b: FactorPoint) -> bool:
    return bool(np.allclose(a.as_array(), b.as_array(), rtol=0, atol=1e-9))


@dataclass
class ExperimentData:
    """Immutable-after-load container for one experiment.

    ``y`` holds log amounts with censored entries pinned at log(chi); the
    latent censored values live in the sampler state, not here.
    """

    runs: list  # [(FactorPoint, times array)]
    y: np.ndarray  # (n, K) log amounts
    censor_mask: np.ndarray  # (n, K) bool
    chi: float
    treatments: list = field(init=False)
    run_treatment: np.ndarray = field(init=False)
    treatment_times: list = field(init=False)
    obs_to_unique: np.ndarray = field(init=False)

    def __post_init__(self):
        self.runs = [(x, np.atleast_1d(np.asarray(t, dtype=float))) for x, t in self.runs]
        self.y = np.asarray(self.y, dtype=float)
        self.censor_mask = np.asarray(self.censor_mask, dtype=bool)
        n = sum(t.size for _, t in self.runs)
        if self.y.ndim != 2 or self.y.shape[0] != n or self.y.shape[1] < 1:
            raise ValueError(f"y must be ({n}, K); got {self.y.shape}")
        if self.censor_mask.shape != self.y.shape:
            raise ValueError(
                f"censor_mask must match y {self.y.shape}; got {self.censor_mask.shape}"
            )
        if self.chi < 0.0:
            raise ValueError("chi must be non-negative")
        # unique treatments in first-appearance order
        self.treatments = []
        self.run_treatment = np.empty(len(self.runs), dtype=int)
        for i, (x, _) in enumerate(self.runs):
            for j, seen in enumerate(self.treatments):
                if _same_point(x, seen):
                    self.run_treatment[i] = j
                    break
            else:
                self.treatments.append(x)
                self.run_treatment[i] = len(self.treatments) - 1
        # merged time list per treatment, first-appearance order
        time_lists: list[list[float]] = [[] for _ in self.treatments]
        local_idx = []  # (treatment id, position within its list) per observation
        for i, (_, times) in enumerate(self.runs):
            tid = int(self.run_treatment[i])
            tl = time_lists[tid]
            for t in times:
                for j, seen in enumerate(tl):
                    if abs(seen - t) <= 1e-9:
                        local = j
                        break
                else:
                    tl.append(float(t))
                    local = len(tl) - 1
                local_idx.append((tid, local))
        starts = np.concatenate([[0], np.cumsum([len(tl) for tl in time_lists])])
        self.obs_to_unique = np.array([starts[tid] + j for tid, j in local_idx], dtype=int)
        self.treatment_times = [np.array(tl) for tl in time_lists]
        if self.chi > 0.0:
            self.y = self.y.copy()
            self.y[self.censor_mask] = math.log(self.chi)

    # sizes -----------------------------------------------------------------
    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.y.shape[1]

    @property
    def m(self) -> int:
        return int(sum(t.size for t in self.treatment_times))

    @property
    def n_censored(self) -> int:
        return int(self.censor_mask.sum())

    # layout helpers ----------------------------------------------------------
    def run_slices(self) -> list[slice]:
        sizes = [t.size for _, t in self.runs]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        return [slice(int(offs[i]), int(offs[i + 1])) for i in range(len(sizes))]

    def design_entries(self) -> list[tuple[FactorPoint, np.ndarray]]:
        """Unique design grouped by treatment. m rows in total, in layout order."""
        return [(x, times) for x, times in zip(self.treatments, self.treatment_times)]

    def unique_design(self) -> list[tuple[FactorPoint, float]]:
        out = []
        for x, times in self.design_entries():
            out.extend((x, float(t)) for t in times)
        return out

    def incidence_matrix(self) -> np.ndarray:
        g = np.zeros((self.n, self.m))
        g[np.arange(self.n), self.obs_to_unique] = 1.0
        return g

    def censored_cells(self) -> list[tuple[int, int]]:
        """(row, output) pairs of censored entries in vec (column-major) order."""
        cells = []
        for k in range(self.n_outputs):
            for i in np.nonzero(self.censor_mask[:, k])[0]:
                cells.append((int(i), k))
        return cells

    def assemble_y(self, y_cens: np.ndarray) -> np.ndarray:
        """Observed log-amount matrix with latent values at censored cells."""
        y = self.y.copy()
        cells = self.censored_cells()
        y_cens = np.asarray(y_cens, dtype=float).reshape(-1)
        if y_cens.size != len(cells):
            raise ValueError(f"expected {len(cells)} censored values, got {y_cens.size}")
        for v, (i, k) in zip(y_cens, cells):
            y[i, k] = v
        return y

    # persistence -------------------------------------------------------------
    def to_csv(self, path, header_lines=()):
        if self.n_outputs != N_OUTPUTS:
            raise ValueError("CSV schema is fixed to the three tracked species")
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            writer = _csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            row = 0
            for i, (_, times) in enumerate(self.runs):
                for t in times:
                    amounts = np.exp(self.y[row])
                    cens = self.censor_mask[row].astype(int)
                    amounts = np.where(cens, self.chi, amounts)
                    writer.writerow(
                        [i + 1, f"{t:.17g}"]
                        + [f"{a:.17g}" for a in amounts]
                        + [int(c) for c in cens]
                    )
                    row += 1

    @classmethod
    def from_csv(cls, path, treatments=None, chi: float = 0.01) -> "ExperimentData":
        """Load the observation CSV; treatments default to the replica table by run id."""
        rows = []
        with open(path) as fh:
            reader = _csv.reader(r for r in fh if not r.startswith("#"))
            header = next(reader)
            if [h.strip() for h in header] != CSV_COLUMNS:
                raise ValueError(f"unexpected CSV header {header!r}")
            for rec in reader:
                if not rec:
                    continue
                rows.append(rec)
        if treatments is None:
            treatments = replica_treatments()
        run_ids: list[int] = []
        times_by_run: dict[int, list[float]] = {}
        values: list[list[float]] = []
        mask: list[list[bool]] = []
        for rec in rows:
            rid = int(rec[0])
            if rid not in times_by_run:
                if not 1 <= rid <= len(treatments):
                    raise ValueError(f"run id {rid} has no treatment definition")
                run_ids.append(rid)
                times_by_run[rid] = []
            times_by_run[rid].append(float(rec[1]))
            amounts = [float(v) for v in rec[2:5]]
            cens = [bool(int(v)) for v in rec[5:8]]
            if any(a <= 0.0 for a in amounts):
                raise ValueError("amounts must be strictly positive")
            values.append([math.log(a) for a in amounts])
            mask.append(cens)
        runs = [(treatments[rid - 1], np.array(times_by_run[rid])) for rid in run_ids]
        return cls(runs=runs, y=np.array(values), censor_mask=np.array(mask), chi=chi)


# ---------------------------------------------------------------------------
# priors and state


@dataclass(frozen=True)
class Priors:
    theta_mean: np.ndarray
    theta_var: np.ndarray  # diagonal of the prior covariance
    iw_dof: float = 4.0
    iw_scale: np.ndarray | None = None  # defaults to I_K at use
    corr_rate: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "theta_mean", np.asarray(self.theta_mean, dtype=float))
        object.__setattr__(self, "theta_var", np.asarray(self.theta_var, dtype=float))
        if self.theta_mean.shape != self.theta_var.shape:
            raise ValueError("theta_mean and theta_var must have equal shape")
        if np.any(self.theta_var <= 0.0):
            raise ValueError("theta_var must be positive")

    @classmethod
    def default(cls) -> "Priors":
        return cls(
            theta_mean=np.array([-13.0, -13.0, -13.0, 10.0, 10.0]),
            theta_var=np.array([2.0, 2.0, 2.0, 3.0, 3.0]),
        )

    @property
    def p(self) -> int:
        return self.theta_mean.size

    def scale_matrix(self, k: int) -> np.ndarray:
        return np.eye(k) if self.iw_scale is None else np.asarray(self.iw_scale, float)

    def log_theta_density(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        z2 = (theta - self.theta_mean) ** 2 / self.theta_var
        return float(-0.5 * np.sum(z2 + np.log(2.0 * math.pi * self.theta_var)))

    def log_density(self, state: "ParameterState") -> float:
        k = state.omega.shape[0]
        scale = SpdMatrix(self.scale_matrix(k))
        lp = self.log_theta_density(state.theta)
        lp += inv_wishart_logpdf(state.omega, self.iw_dof, scale)
        lp += inv_wishart_logpdf(state.sigma, self.iw_dof, scale)
        for v in (state.rho, state.psi[0], state.psi[1]):
            if v <= 0.0:
                return -math.inf
            lp += math.log(self.corr_rate) - self.corr_rate * v
        return lp


@dataclass
class ParameterState:
    """One chain's full parameter vector delta."""

    theta: np.ndarray  # (p,)
    d_star: np.ndarray  # (m, K)
    omega: np.ndarray  # (K, K)
    sigma: np.ndarray  # (K, K)
    rho: float
    psi: np.ndarray  # (2,)
    y_cens: np.ndarray  # (n_censored,) latent log amounts, <= log chi

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.d_star = np.atleast_2d(np.asarray(self.d_star, dtype=float))
        self.omega = np.asarray(self.omega, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float).reshape(-1)
        self.y_cens = np.asarray(self.y_cens, dtype=float).reshape(-1)

    def copy(self) -> "ParameterState":
        return ParameterState(
            theta=self.theta.copy(),
            d_star=self.d_star.copy(),
            omega=self.omega.copy(),
            sigma=self.sigma.copy(),
            rho=float(self.rho),
            psi=self.psi.copy(),
            y_cens=self.y_cens.copy(),
        )


class KineticsMu:
    """m(theta) through the ODE solver over a data set's unique design."""

    def __init__(self, data: ExperimentData, constants: PhysicalConstants = DEFAULT_CONSTANTS,
                 rtol: float = 1e-8, atol: float = 1e-10):
        self._design = data.design_entries()
        self._constants = constants
        self._rtol = rtol
        self._atol = atol
        self.eval_count = 0

    def __call__(self, theta) -> np.ndarray:
        self.eval_count += 1
        return batch_log_amounts(
            theta, self._design, constants=self._constants, rtol=self._rtol, atol=self._atol
        )


# ---------------------------------------------------------------------------
# covariance builders


def build_t_blocks(rho: float, runs) -> list[np.ndarray]:
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    runs = runs.runs if isinstance(runs, ExperimentData) else runs
    blocks = []
    for _, times in runs:
        t = np.asarray(times, dtype=float).reshape(-1, 1)
        blocks.append(gauss_kernel_matrix(t, t, [rho]))
    return blocks


def build_T(rho: float, runs) -> SpdMatrix:
    """Block-diagonal noise correlation over runs; entry exp(-rho dt^2)."""
    blocks = build_t_blocks(rho, runs)
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    at = 0
    for b in blocks:
        s = b.shape[0]
        out[at : at + s, at : at + s] = b
        at += s
    return SpdMatrix(out)


def scaled_design_coords(unique_design, bounds: np.ndarray = FACTOR_BOUNDS) -> np.ndarray:
    """(m, 6) coordinates: range-scaled factors plus raw time in seconds."""
    lo, hi = bounds[:, 0], bounds[:, 1]
    rows = []
    for x, t in unique_design:
        rows.append(np.concatenate([(x.as_array() - lo) / (hi - lo), [float(t)]]))
    return np.array(rows)


def build_S(psi, unique_design, bounds: np.ndarray = FACTOR_BOUNDS) -> SpdMatrix:
    """Discrepancy correlation over the unique design.

    S_jl = exp(-psi1 sum_f (d_jf - d_lf)^2 - psi2 (t_j - t_l)^2), d range-scaled
    by the design-region bounds regardless of where the data lie.
    """
    psi = np.asarray(psi, dtype=float).reshape(-1)
    if psi.size != 2 or np.any(psi <= 0.0):
        raise ValueError("psi must be two positive values")
    coords = scaled_design_coords(unique_design, bounds)
    weights = np.concatenate([np.full(5, psi[0]), [psi[1]]])
    return SpdMatrix(gauss_kernel_matrix(coords, coords, weights))


# ---------------------------------------------------------------------------
# posterior density and simulation


def tempered_log_posterior(
    state: ParameterState,
    data: ExperimentData,
    priors: Priors,
    temperature: float,
    mu_provider,
    mu_value: np.ndarray | None = None,
) -> float:
    """Log numerator of the posterior divided by the chain temperature.

    ``mu_value`` short-circuits the forward model when m(theta) for the
    current state is already in hand (chains cache it).
    """
    if temperature < 1.0:
        raise ValueError("temperature must be >= 1")
    if math.isinf(temperature):
        return 0.0
    m_theta = np.asarray(mu_value if mu_value is not None else mu_provider(state.theta), float)
    y = data.assemble_y(state.y_cens)
    mean_rows = state.d_star[data.obs_to_unique]
    omega = SpdMatrix(state.omega)
    total = 0.0
    for block, sl in zip(build_t_blocks(state.rho, data), data.run_slices()):
        total += matnorm_logpdf(y[sl], mean_rows[sl], omega, SpdMatrix(block))
    s = build_S(state.psi, data.unique_design())
    total += matnorm_logpdf(state.d_star, m_theta, SpdMatrix(state.sigma), s)
    total += priors.log_density(state)
    return total / temperature


def simulate_experiment(
    theta_true,
    discrepancy_params: dict,
    noise_params: dict,
    design,
    chi: float,
    rng,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    mu_fn=None,
) -> ExperimentData:
    """Generate synthetic data from the full model at known parameter values.

    ``discrepancy_params`` carries {"sigma": (K,K), "psi": (2,)};
    ``noise_params`` carries {"omega": (K,K), "rho": scalar}. ``mu_fn``
    overrides the kinetics mean, mapping (theta, design_entries) -> (m, K).
    """
    sigma = np.asarray(discrepancy_params["sigma"], dtype=float)
    psi = np.asarray(discrepancy_params["psi"], dtype=float)
    omega = np.asarray(noise_params["omega"], dtype=float)
    rho = float(noise_params["rho"])
    k = sigma.shape[0]

    runs = [(x, np.atleast_1d(np.asarray(t, dtype=float))) for x, t in design]
    shell = ExperimentData(
        runs=runs,
        y=np.zeros((sum(t.size for _, t in runs), k)),
        censor_mask=np.zeros((sum(t.size for _, t in runs), k), dtype=bool),
        chi=0.0,
    )
    if mu_fn is None:
        m_theta = batch_log_amounts(theta_true, shell.design_entries(), constants=constants)
    else:
        m_theta = np.asarray(mu_fn(theta_true, shell.design_entries()), dtype=float)
    if m_theta.shape != (shell.m, k):
        raise ValueError(f"mean must be ({shell.m}, {k}); got {m_theta.shape}")

    s = build_S(psi, shell.unique_design())
    d_vec = mvn_sample(np.zeros(shell.m * k), KroneckerSpd([SpdMatrix(sigma), s]), rng)
    d_star = m_theta + d_vec.reshape(k, shell.m).T

    y = d_star[shell.obs_to_unique].copy()
    omega_spd = SpdMatrix(omega)
    for block, sl in zip(build_t_blocks(rho, runs), shell.run_slices()):
        n_i = block.shape[0]
        noise = mvn_sample(
            np.zeros(n_i * k), KroneckerSpd([omega_spd, SpdMatrix(block)]), rng
        )
        y[sl] += noise.reshape(k, n_i).T

    amounts = np.exp(y)
    mask = amounts < chi
    return ExperimentData(runs=runs, y=y, censor_mask=mask, chi=chi)

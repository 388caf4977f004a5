"""Posterior-predictive draws and constraint-satisfaction probabilities.

Given a retained posterior sample, the predictive distribution at arbitrary
operating conditions (x, t) is Gaussian around the forward-model value plus
the kriging interpolant of the realised discrepancy:

    y0 | state ~ N(mu(theta; x, t) + D' S^-1 s, (1 - s' S^-1 s) Sigma + Omega)

with D the (m, K) discrepancy matrix d* - m(theta) over the experimental
design, S the design correlation and s the correlation vector between the
design rows and (x, t). Probabilities over the constraint region use one
predictive draw per posterior draw, so the binomial standard error is exact.
"""

from __future__ import annotations

import csv as _csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kinetics import DEFAULT_CONSTANTS, FactorPoint, TIME_HORIZON, log_amounts
from .model import ExperimentData, KineticsMu, ParameterState, scaled_design_coords
from .stats import SpdMatrix, gauss_kernel_matrix, mvn_sample, substream

__all__ = [
    "ConstraintSpec",
    "PredictionError",
    "KineticsPredictor",
    "EmulatorPredictor",
    "predictive_draw",
    "constraint_probability",
    "probability_surface",
    "SurfaceResult",
]

# tolerated numerical undershoot of the interpolation variance factor
_VAR_FLOOR = -1e-8


class PredictionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstraintSpec:
    """Log-scale thresholds on the three tracked species.

    The product F must exceed ``f_min`` while the by-products E and H stay
    below ``e_max`` and ``h_max``. Infinite thresholds switch a constraint
    off (probability one).
    """

    e_max: float = math.log(3.0)
    f_min: float = math.log(20.0)
    h_max: float = math.log(3.0)

    def __post_init__(self):
        for name in ("e_max", "f_min", "h_max"):
            if math.isnan(getattr(self, name)):
                raise ValueError(f"{name} must not be NaN")

    def indicators(self, values: np.ndarray) -> np.ndarray:
        """(B, 4) booleans: E, F, H marginals and the joint region."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[1] != 3:
            raise ValueError(f"expected 3 outputs per draw, got {values.shape}")
        out = np.empty((values.shape[0], 4), dtype=bool)
        out[:, 0] = values[:, 0] < self.e_max
        out[:, 1] = values[:, 1] > self.f_min
        out[:, 2] = values[:, 2] < self.h_max
        out[:, 3] = out[:, 0] & out[:, 1] & out[:, 2]
        return out


# ---------------------------------------------------------------------------
# forward-model adapters


class KineticsPredictor:
    """Exact ODE forward model: deterministic point values."""

    def __init__(self, data: ExperimentData, constants=DEFAULT_CONSTANTS,
                 rtol: float = 1e-8, atol: float = 1e-10):
        self.data = data
        self._design_mu = KineticsMu(data, constants, rtol=rtol, atol=atol)
        self._kwargs = {"constants": constants, "rtol": rtol, "atol": atol}

    @property
    def eval_count(self) -> int:
        return self._design_mu.eval_count

    def design_mean(self, theta) -> np.ndarray:
        return self._design_mu(theta)

    def point_value(self, theta, x: FactorPoint, t: float, rng) -> np.ndarray:
        return log_amounts(theta, x, np.array([float(t)]), **self._kwargs)[0]


class EmulatorPredictor:
    """Emulated forward model; point values are draws from the predictive
    distribution, so emulator uncertainty propagates into y0."""

    def __init__(self, model, data: ExperimentData):
        from .emulator import DesignPredictor

        self.model = model
        self.data = data
        self._design = DesignPredictor(model, data.unique_design())

    def design_mean(self, theta) -> np.ndarray:
        return self._design(theta)

    def point_value(self, theta, x: FactorPoint, t: float, rng) -> np.ndarray:
        from .emulator import sample_predictive

        return sample_predictive(self.model, theta, x, float(t), rng)


# ---------------------------------------------------------------------------
# predictive distribution


class _DrawTerms:
    """Per-posterior-draw quantities that do not depend on (x, t)."""

    __slots__ = ("theta", "sigma", "omega", "weights", "s_mat", "disc")

    def __init__(self, state: ParameterState, predictor):
        design = predictor.data.unique_design()
        coords = _design_coords(predictor)
        self.theta = np.asarray(state.theta, dtype=float)
        self.sigma = np.asarray(state.sigma, dtype=float)
        self.omega = np.asarray(state.omega, dtype=float)
        psi = np.asarray(state.psi, dtype=float)
        self.weights = np.concatenate([np.full(5, psi[0]), [psi[1]]])
        self.s_mat = SpdMatrix(gauss_kernel_matrix(coords, coords, self.weights))
        self.disc = state.d_star - predictor.design_mean(state.theta)
        if self.disc.shape != (len(design), self.sigma.shape[0]):
            raise PredictionError(
                f"discrepancy shape {self.disc.shape} does not match the design"
            )


def _design_coords(predictor) -> np.ndarray:
    cached = getattr(predictor, "_coords_cache", None)
    if cached is None:
        cached = scaled_design_coords(predictor.data.unique_design())
        predictor._coords_cache = cached
    return cached


def _draw_from_terms(terms: _DrawTerms, x: FactorPoint, t: float,
                     predictor, rng) -> np.ndarray:
    coords = _design_coords(predictor)
    point = scaled_design_coords([(x, float(t))])
    s = gauss_kernel_matrix(coords, point, terms.weights)[:, 0]
    u = terms.s_mat.solve(s)
    var_scale = 1.0 - float(s @ u)
    if var_scale < _VAR_FLOOR:
        raise PredictionError(
            f"interpolation variance factor {var_scale:.3g} is negative; "
            "the design correlation matrix is numerically inconsistent"
        )
    var_scale = max(var_scale, 0.0)
    mean = predictor.point_value(terms.theta, x, t, rng) + terms.disc.T @ u
    cov = var_scale * terms.sigma + terms.omega
    return mvn_sample(mean, SpdMatrix(cov), rng)


def predictive_draw(posterior_draw: ParameterState, x: FactorPoint, t: float,
                    predictor, rng) -> np.ndarray:
    """One draw of the three log amounts at (x, t) given a posterior draw."""
    return _draw_from_terms(_DrawTerms(posterior_draw, predictor), x, t, predictor, rng)


def _indicator_block(terms, x, t, constraints, predictor, rng) -> np.ndarray:
    draws = np.empty((len(terms), 3))
    for b, tm in enumerate(terms):
        draws[b] = _draw_from_terms(tm, x, t, predictor, rng)
    return constraints.indicators(draws)


def constraint_probability(posterior_sample: Sequence[ParameterState], x: FactorPoint,
                           t: float, constraints: ConstraintSpec, predictor,
                           rng) -> tuple[float, float]:
    """Proportion of predictive draws inside the constraint region.

    One predictive draw per posterior draw; returns (p_hat, binomial SE).
    """
    if not len(posterior_sample):
        raise PredictionError("posterior sample is empty")
    terms = [_DrawTerms(s, predictor) for s in posterior_sample]
    ind = _indicator_block(terms, x, t, constraints, predictor, rng)
    b = ind.shape[0]
    p = float(ind[:, 3].mean())
    return p, math.sqrt(p * (1.0 - p) / b)


# ---------------------------------------------------------------------------
# probability surface over (A0, temperature, time)


@dataclass
class SurfaceResult:
    """Constraint probabilities on an (A0, temperature, time) grid."""

    a0_values: np.ndarray
    temperatures: np.ndarray
    times: np.ndarray
    fixed: dict
    p_e: np.ndarray  # (nA, nL, nT)
    p_f: np.ndarray
    p_h: np.ndarray
    p_joint: np.ndarray
    mc_se: np.ndarray
    n_draws: int = 0

    def to_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            writer = _csv.writer(fh)
            writer.writerow(["A0", "temperature", "time",
                             "p_E", "p_F", "p_H", "p_joint", "mc_se"])
            for i, a0 in enumerate(self.a0_values):
                for j, lam in enumerate(self.temperatures):
                    for k, t in enumerate(self.times):
                        writer.writerow([
                            f"{a0:.17g}", f"{lam:.17g}", f"{t:.17g}",
                            f"{self.p_e[i, j, k]:.17g}", f"{self.p_f[i, j, k]:.17g}",
                            f"{self.p_h[i, j, k]:.17g}", f"{self.p_joint[i, j, k]:.17g}",
                            f"{self.mc_se[i, j, k]:.17g}",
                        ])


def probability_surface(posterior_sample: Sequence[ParameterState],
                        a0_values, temperatures, times,
                        fixed: dict, constraints: ConstraintSpec, predictor,
                        seed: int = 0) -> SurfaceResult:
    """Marginal and joint constraint probabilities over the grid.

    ``fixed`` holds the remaining factors {"d0", "e0", "volume"}. Cells are
    independent: each uses its own RNG substream keyed by grid indices, so
    any evaluation order (or a partial recomputation) reproduces the same
    values. The grid must lie inside the design region and time horizon.
    """
    if not len(posterior_sample):
        raise PredictionError("posterior sample is empty")
    a0_values = np.asarray(a0_values, dtype=float)
    temperatures = np.asarray(temperatures, dtype=float)
    times = np.asarray(times, dtype=float)
    if np.any(times < 0.0) or np.any(times > TIME_HORIZON):
        raise ValueError(f"times must lie in [0, {TIME_HORIZON:g}]")

    points = {}
    for i, a0 in enumerate(a0_values):
        for j, lam in enumerate(temperatures):
            x = FactorPoint(a0=float(a0), d0=float(fixed["d0"]), e0=float(fixed["e0"]),
                            temperature=float(lam), volume=float(fixed["volume"]))
            if not x.in_design_region():
                raise ValueError(f"grid point {x} lies outside the design region")
            points[i, j] = x

    terms = [_DrawTerms(s, predictor) for s in posterior_sample]
    shape = (a0_values.size, temperatures.size, times.size)
    p_e, p_f, p_h, p_joint, mc_se = (np.empty(shape) for _ in range(5))
    for (i, j), x in points.items():
        for k, t in enumerate(times):
            rng = substream(seed, "cell", i, j, k)
            ind = _indicator_block(terms, x, float(t), constraints, predictor, rng)
            frac = ind.mean(axis=0)
            p_e[i, j, k], p_f[i, j, k], p_h[i, j, k], p_joint[i, j, k] = frac
            mc_se[i, j, k] = math.sqrt(frac[3] * (1.0 - frac[3]) / ind.shape[0])

    return SurfaceResult(a0_values=a0_values, temperatures=temperatures, times=times,
                         fixed=dict(fixed), p_e=p_e, p_f=p_f, p_h=p_h,
                         p_joint=p_joint, mc_se=mc_se, n_draws=len(posterior_sample))

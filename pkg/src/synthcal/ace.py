"""Approximate coordinate exchange over the operating region.

The constraint-probability objective is only available through noisy Monte
Carlo evaluations, so plain cyclic ascent would chase noise. Each coordinate
update instead evaluates the objective on a coarse grid along the coordinate,
smooths those values with a one-dimensional GP, proposes the fine-grid argmax
of the smoothed mean, and accepts the proposal only when an independent
re-evaluation beats one at the current point by more than one combined
standard error. Restarts from uniform points in the region guard against
local maxima.
"""

from __future__ import annotations

import csv as _csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .kinetics import FACTOR_BOUNDS, FactorPoint, TIME_HORIZON
from .prediction import constraint_probability
from .stats import jittered_cholesky

__all__ = [
    "AceConfig",
    "AceError",
    "AceResult",
    "StepRecord",
    "DESIGN_BOUNDS",
    "one_d_gp_fit",
    "ace_coordinate_step",
    "ace_optimize",
    "probability_objective",
    "trace_to_csv",
]

# operating region: the five controllable factors plus reaction time
DESIGN_BOUNDS = np.vstack([FACTOR_BOUNDS, [0.0, TIME_HORIZON]])

FACTOR_NAMES = ("A0", "D0", "E0", "temperature", "volume", "time")


class AceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AceConfig:
    n_starts: int = 100
    n_iterations: int = 20
    grid_points_per_coord: int = 20
    candidate_fine_grid: int = 200
    accept_draws: int | None = None  # MC budget per objective call, None = full sample
    seed: int = 0

    def __post_init__(self):
        for name in ("n_starts", "grid_points_per_coord", "candidate_fine_grid"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be nonnegative")
        if self.accept_draws is not None and self.accept_draws < 1:
            raise ValueError("accept_draws must be positive")


# ---------------------------------------------------------------------------
# one-dimensional GP smoother


def _nll(params, dist2, ys, noise_var):
    log_sf, log_ell = params
    sf2 = math.exp(2.0 * log_sf)
    k = sf2 * np.exp(-dist2 / (2.0 * math.exp(2.0 * log_ell))) + np.diag(noise_var)
    k[np.diag_indices_from(k)] += 1e-10 * (sf2 + noise_var.mean() + 1e-12)
    try:
        chol, _ = jittered_cholesky(k)
    except np.linalg.LinAlgError:
        return 1e12
    half = np.linalg.solve(chol, ys)
    return 0.5 * half @ half + np.log(np.diag(chol)).sum()


def one_d_gp_fit(coords, values, noise_se):
    """Smooth noisy 1-D observations; returns a vectorized mean function.

    Squared-exponential kernel with per-point noise variances taken from the
    supplied Monte Carlo standard errors; (signal, length-scale) set by the
    marginal-likelihood mode over a fixed multi-start. Degenerate inputs
    (constant values, or a collapsed coordinate range) give a flat predictor.
    """
    x = np.asarray(coords, dtype=float).reshape(-1)
    y = np.asarray(values, dtype=float).reshape(-1)
    se = np.asarray(noise_se, dtype=float).reshape(-1)
    if x.size != y.size or x.size != se.size:
        raise ValueError("coords, values and noise_se must have equal length")
    if x.size < 4:
        raise ValueError(f"need at least 4 points, got {x.size}")

    span = x.max() - x.min()
    y_mean, y_sd = y.mean(), y.std()
    if span <= 0.0 or y_sd <= 1e-14 * max(1.0, abs(y_mean)):
        return lambda g: np.full(np.asarray(g, dtype=float).reshape(-1).shape, y_mean)

    xs = (x - x.min()) / span
    ys = (y - y_mean) / y_sd
    nv = (se / y_sd) ** 2
    dist2 = (xs[:, None] - xs[None, :]) ** 2

    best = None
    for s0 in (0.0, 1.0):
        for l0 in (math.log(0.1), math.log(0.3), math.log(1.0)):
            res = minimize(_nll, np.array([s0, l0]), args=(dist2, ys, nv),
                           method="L-BFGS-B", bounds=[(-6.0, 4.0), (-5.0, 2.0)])
            if best is None or res.fun < best.fun:
                best = res
    log_sf, log_ell = best.x
    sf2 = math.exp(2.0 * log_sf)
    ell2 = math.exp(2.0 * log_ell)
    k = sf2 * np.exp(-dist2 / (2.0 * ell2)) + np.diag(nv)
    k[np.diag_indices_from(k)] += 1e-10 * (sf2 + nv.mean() + 1e-12)
    chol, _ = jittered_cholesky(k)
    weights = np.linalg.solve(chol.T, np.linalg.solve(chol, ys))
    x_min = x.min()

    def mean(grid):
        g = (np.asarray(grid, dtype=float).reshape(-1) - x_min) / span
        kg = sf2 * np.exp(-((g[:, None] - xs[None, :]) ** 2) / (2.0 * ell2))
        return (kg @ weights) * y_sd + y_mean

    return mean


# ---------------------------------------------------------------------------
# coordinate exchange


@dataclass
class StepRecord:
    start: int
    iteration: int
    coordinate: int  # -1 for the initial evaluation of a start
    point: np.ndarray
    value: float
    mc_se: float
    accepted: bool
    best: float


def ace_coordinate_step(current, coord_index, objective, bounds, config, rng):
    """One coordinate update; returns (point, evaluation or None).

    The evaluation is the accepted candidate's independent re-evaluation,
    None when the current point was retained. Grid points where the
    objective raises are dropped; fewer than 4 survivors is an error.
    """
    current = np.asarray(current, dtype=float)
    lo, hi = bounds[coord_index]
    grid = np.linspace(lo, hi, config.grid_points_per_coord)
    coords, vals, ses = [], [], []
    errors = []
    for g in grid:
        pt = current.copy()
        pt[coord_index] = g
        try:
            v, se = objective(pt, rng)
        except Exception as exc:  # noqa: BLE001 - failed evaluations are data
            errors.append(f"{g:.6g}: {exc}")
            continue
        coords.append(g)
        vals.append(v)
        ses.append(se)
    if len(coords) < 4:
        raise AceError(
            f"only {len(coords)} grid evaluations survived on coordinate "
            f"{coord_index}: " + "; ".join(errors[:3])
        )

    smooth = one_d_gp_fit(coords, vals, ses)
    fine = np.linspace(lo, hi, config.candidate_fine_grid)
    cand_coord = float(fine[int(np.argmax(smooth(fine)))])
    if cand_coord == current[coord_index]:
        return current, None

    candidate = current.copy()
    candidate[coord_index] = cand_coord
    v_cand, se_cand = objective(candidate, rng)
    v_curr, se_curr = objective(current, rng)
    if v_cand - v_curr > math.sqrt(se_cand**2 + se_curr**2):
        return candidate, (v_cand, se_cand)
    return current, None


@dataclass
class AceResult:
    point: np.ndarray
    probability: float
    mc_se: float
    trace: list[StepRecord] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)


def ace_optimize(objective, bounds, config: AceConfig, rng) -> AceResult:
    """Best point over uniform restarts of cyclic coordinate exchange.

    Each start runs ``n_iterations`` full coordinate cycles on its own
    spawned stream (starts are order-independent). A start whose objective
    keeps failing is recorded in ``failures``; all starts failing is an
    error. The trace carries one record per initial evaluation and per
    accepted move, with ``best`` the running within-start maximum.
    """
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("bounds must be (d, 2) with lower < upper")
    d = bounds.shape[0]

    streams = rng.spawn(config.n_starts)
    trace: list[StepRecord] = []
    failures: list[tuple[int, str]] = []
    best_point, best_value, best_se = None, -math.inf, math.nan
    for s, srng in enumerate(streams):
        point = bounds[:, 0] + srng.uniform(size=d) * (bounds[:, 1] - bounds[:, 0])
        try:
            value, se = objective(point, srng)
        except Exception as exc:  # noqa: BLE001
            failures.append((s, f"initial evaluation: {exc}"))
            continue
        run_best = value
        trace.append(StepRecord(s, 0, -1, point.copy(), value, se, True, run_best))
        run_best_point, run_best_se = point.copy(), se
        try:
            for it in range(1, config.n_iterations + 1):
                for coord in range(d):
                    point, accepted = ace_coordinate_step(
                        point, coord, objective, bounds, config, srng
                    )
                    if accepted is None:
                        continue
                    value, se = accepted
                    if value > run_best:
                        run_best, run_best_point, run_best_se = value, point.copy(), se
                    trace.append(
                        StepRecord(s, it, coord, point.copy(), value, se, True, run_best)
                    )
        except AceError as exc:
            failures.append((s, str(exc)))
        if run_best > best_value:
            best_point, best_value, best_se = run_best_point, run_best, run_best_se
    if best_point is None:
        raise AceError(
            "all starts failed: " + "; ".join(msg for _, msg in failures[:5])
        )
    return AceResult(point=best_point, probability=best_value, mc_se=best_se,
                     trace=trace, failures=failures)


# ---------------------------------------------------------------------------
# objective and report plumbing


def probability_objective(posterior_sample, constraints, predictor, subsample=None):
    """Constraint-probability objective over (factors, time) vectors.

    ``subsample`` caps the Monte Carlo budget per evaluation by drawing that
    many posterior states without replacement; None uses the full sample.
    """
    sample = list(posterior_sample)
    if subsample is not None and subsample < len(sample):
        def pick(rng):
            idx = rng.choice(len(sample), size=subsample, replace=False)
            return [sample[i] for i in idx]
    else:
        def pick(rng):
            return sample

    def objective(point, rng):
        point = np.asarray(point, dtype=float)
        x = FactorPoint.from_array(point[:5])
        return constraint_probability(pick(rng), x, float(point[5]),
                                      constraints, predictor, rng)

    return objective


def trace_to_csv(trace, path, names=None, header_lines=()) -> None:
    if names is None:
        d = len(trace[0].point) if trace else len(FACTOR_NAMES)
        names = FACTOR_NAMES if d == len(FACTOR_NAMES) else tuple(
            f"x{i + 1}" for i in range(d)
        )
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = _csv.writer(fh)
        writer.writerow(["start", "iteration", "coordinate", "accepted",
                         "value", "mc_se", "best", *names])
        for rec in trace:
            writer.writerow([
                rec.start, rec.iteration, rec.coordinate, int(rec.accepted),
                f"{rec.value:.17g}", f"{rec.mc_se:.17g}", f"{rec.best:.17g}",
                *(f"{v:.17g}" for v in rec.point),
            ])

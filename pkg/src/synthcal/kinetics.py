"""Forward model of the batch synthesis kinetics.

Nine substances take part.  A decomposes into 2B + C at a fast fixed rate;
B catalyses the reversible conversion of D + E into G + F; F and B combine
irreversibly into the product H and byproduct I.  States are concentrations
in mol/l inside a stirred vessel of fixed volume, and the observable outputs
are the log amounts (mols) of E, F and H.

Rate constants follow an Arrhenius law relative to a 25 C reference, with the
activation energies and the three slow reference rates collected in a
5-vector of log-scale calibration inputs

    theta = log(k2_minus, k2_plus, k3, E2, E3).

The decomposition rate k1 is fixed and temperature independent.  Because k1
is of order 1e4 1/s while the horizon is 3000 s, the system is stiff whenever
substance A is present; :mod:`synthcal.integrate` handles the switch to a
semi-implicit method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .integrate import IntegrationError, IntegrationInfo, integrate_ode

__all__ = [
    "SPECIES",
    "FACTOR_NAMES",
    "FACTOR_BOUNDS",
    "TIME_HORIZON",
    "OUTPUT_SPECIES",
    "LOG_FLOOR_MOLS",
    "PhysicalConstants",
    "PhysicalTheta",
    "FactorPoint",
    "ConcentrationTrajectory",
    "arrhenius_rate",
    "arrhenius_rates",
    "reaction_rhs",
    "reaction_jacobian",
    "initial_state",
    "solve_odes",
    "log_amounts",
    "batch_log_amounts",
    "IntegrationError",
]

SPECIES = ("A", "B", "C", "D", "E", "F", "G", "H", "I")
OUTPUT_SPECIES = ("E", "F", "H")

FACTOR_NAMES = ("a0", "d0", "e0", "temperature", "volume")
# loadings in mols, temperature in C, volume in liters
FACTOR_BOUNDS = np.array(
    [
        [22.5, 40.0],
        [91.4, 91.59],
        [26.42, 26.47],
        [25.0, 40.0],
        [31.28, 32.56],
    ]
)

TIME_HORIZON = 3000.0
LOG_FLOOR_MOLS = 1e-12


@dataclass(frozen=True)
class PhysicalConstants:
    """Fixed physical inputs shared by every solve."""

    k1: float = 1.0e4
    gas_constant: float = 8.31445
    ref_temperature_c: float = 25.0
    kelvin_offset: float = 273.15

    def __post_init__(self):
        for name in ("k1", "gas_constant"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")


DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class PhysicalTheta:
    """Log-scale kinetic inputs (log k2-, log k2+, log k3, log E2, log E3)."""

    log_k2_minus: float
    log_k2_plus: float
    log_k3: float
    log_e2: float
    log_e3: float

    @classmethod
    def from_array(cls, values) -> "PhysicalTheta":
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.size != 5 or not np.all(np.isfinite(v)):
            raise ValueError(f"theta must be 5 finite values, got {values!r}")
        return cls(*v.tolist())

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.log_k2_minus, self.log_k2_plus, self.log_k3, self.log_e2, self.log_e3]
        )


@dataclass(frozen=True)
class FactorPoint:
    """Controllable operating conditions of one run."""

    a0: float
    d0: float
    e0: float
    temperature: float
    volume: float

    def __post_init__(self):
        if self.volume <= 0.0:
            raise ValueError("volume must be positive")
        if min(self.a0, self.d0, self.e0) < 0.0:
            raise ValueError("loadings must be non-negative")

    @classmethod
    def from_array(cls, values) -> "FactorPoint":
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.size != 5:
            raise ValueError("factor point needs 5 values")
        return cls(*v.tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.a0, self.d0, self.e0, self.temperature, self.volume])

    def in_design_region(self) -> bool:
        v = self.as_array()
        return bool(np.all(v >= FACTOR_BOUNDS[:, 0]) and np.all(v <= FACTOR_BOUNDS[:, 1]))


def _theta_array(theta) -> np.ndarray:
    if isinstance(theta, PhysicalTheta):
        return theta.as_array()
    v = np.asarray(theta, dtype=float).reshape(-1)
    if v.size != 5:
        raise ValueError(f"theta must have 5 components, got {v.size}")
    return v


def arrhenius_rate(
    k_ref: float,
    activation_energy: float,
    temperature_c: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> float:
    """Rate at a run temperature: k_ref * exp((E/G) (1/T - 1/T_ref)), T in Kelvin."""
    if k_ref <= 0.0:
        raise ValueError("reference rate must be positive")
    if activation_energy < 0.0:
        raise ValueError("activation energy must be non-negative")
    t_k = temperature_c + constants.kelvin_offset
    t_ref = constants.ref_temperature_c + constants.kelvin_offset
    if t_k <= 0.0:
        raise ValueError(f"temperature {temperature_c} C is below absolute zero")
    dinv = 1.0 / t_k - 1.0 / t_ref
    try:
        out = k_ref * math.exp(activation_energy / constants.gas_constant * dinv)
    except OverflowError:
        out = math.inf
    if not math.isfinite(out):
        raise ValueError(
            f"rate overflow: k_ref={k_ref}, E={activation_energy}, T={temperature_c} C"
        )
    return out


def arrhenius_rates(theta, temperature_c: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Rates (k1, k2-, k2+, k3) at the run temperature.

    The three slow rates follow :func:`arrhenius_rate` with the reversible
    pair sharing activation energy E2; k1 has no activation energy and stays
    at its reference value.
    """
    th = _theta_array(theta)
    e2 = math.exp(th[3])
    e3 = math.exp(th[4])
    return np.array(
        [
            constants.k1,
            arrhenius_rate(math.exp(th[0]), e2, temperature_c, constants),
            arrhenius_rate(math.exp(th[1]), e2, temperature_c, constants),
            arrhenius_rate(math.exp(th[2]), e3, temperature_c, constants),
        ]
    )


def reaction_rhs(y: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Concentration derivatives for state y = [A..I] in mol/l."""
    k1, k2m, k2p, k3 = rates
    a, b, _, d, e, f, g, _, _ = y
    r1 = k1 * a
    r2 = k2m * b * d * e
    r3 = k2p * b * g * f
    r4 = k3 * f * b
    return np.array(
        [
            -r1,
            2.0 * r1 - r4,
            r1,
            -r2 + r3,
            -r2 + r3,
            r2 - r3 - r4,
            r2 - r3,
            r4,
            r4,
        ]
    )


def reaction_jacobian(y: np.ndarray, rates: np.ndarray) -> np.ndarray:
    k1, k2m, k2p, k3 = rates
    _, b, _, d, e, f, g, _, _ = y
    r2_b = k2m * d * e
    r2_d = k2m * b * e
    r2_e = k2m * b * d
    r3_b = k2p * g * f
    r3_f = k2p * b * g
    r3_g = k2p * b * f
    r4_b = k3 * f
    r4_f = k3 * b
    jac = np.zeros((9, 9))
    jac[0, 0] = -k1
    jac[1, 0] = 2.0 * k1
    jac[1, 1] = -r4_b
    jac[1, 5] = -r4_f
    jac[2, 0] = k1
    for row in (3, 4):
        jac[row, 1] = -r2_b + r3_b
        jac[row, 3] = -r2_d
        jac[row, 4] = -r2_e
        jac[row, 5] = r3_f
        jac[row, 6] = r3_g
    jac[5, 1] = r2_b - r3_b - r4_b
    jac[5, 3] = r2_d
    jac[5, 4] = r2_e
    jac[5, 5] = -r3_f - r4_f
    jac[5, 6] = -r3_g
    jac[6, 1] = r2_b - r3_b
    jac[6, 3] = r2_d
    jac[6, 4] = r2_e
    jac[6, 5] = -r3_f
    jac[6, 6] = -r3_g
    jac[7, 1] = r4_b
    jac[7, 5] = r4_f
    jac[8, 1] = r4_b
    jac[8, 5] = r4_f
    return jac


def initial_state(x: FactorPoint) -> np.ndarray:
    """Initial concentrations: A, D, E loaded, everything else empty."""
    y0 = np.zeros(9)
    y0[0] = x.a0 / x.volume
    y0[3] = x.d0 / x.volume
    y0[4] = x.e0 / x.volume
    return y0


@dataclass
class ConcentrationTrajectory:
    """Solver output: concentrations (mol/l) at the requested times."""

    times: np.ndarray
    concentrations: np.ndarray  # (n_times, 9)
    volume: float
    n_clamped: int = 0
    info: IntegrationInfo | None = None

    def amounts(self) -> np.ndarray:
        """Amounts in mols, shape (n_times, 9)."""
        return self.concentrations * self.volume

    def amount(self, species: str) -> np.ndarray:
        return self.amounts()[:, SPECIES.index(species)]

    def log_outputs(self, floor: float = LOG_FLOOR_MOLS) -> np.ndarray:
        """log amounts of (E, F, H), floored at ``floor`` mols; shape (n, 3)."""
        cols = [SPECIES.index(s) for s in OUTPUT_SPECIES]
        return np.log(np.maximum(self.amounts()[:, cols], floor))


def solve_odes(
    theta,
    x: FactorPoint,
    times,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    method: str = "auto",
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    max_steps: int = 1_000_000,
) -> ConcentrationTrajectory:
    """Solve the kinetics at one (theta, x) for a set of times in [0, 3000].

    ``times`` may repeat and need not be sorted; each distinct time is solved
    once.  Round-off negatives in recorded states are clamped to zero and
    counted in ``n_clamped``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.size == 0:
        raise ValueError("need at least one output time")
    if np.any(times < 0.0) or np.any(times > TIME_HORIZON):
        raise ValueError(f"times must lie in [0, {TIME_HORIZON}]")
    uniq, inverse = np.unique(times, return_inverse=True)

    rates = arrhenius_rates(theta, x.temperature, constants)
    y0 = initial_state(x)
    rhs = lambda y: reaction_rhs(y, rates)
    jac = lambda y: reaction_jacobian(y, rates)

    positive = uniq[uniq > 0.0]
    if positive.size:
        states, info = integrate_ode(
            rhs, jac, y0, 0.0, positive, rtol=rtol, atol=atol, method=method, max_steps=max_steps
        )
    else:
        states, info = np.empty((0, 9)), IntegrationInfo()

    full = np.empty((uniq.size, 9))
    if uniq.size != positive.size:  # t = 0 requested
        full[0] = y0
        full[1:] = states
    else:
        full[:] = states

    n_clamped = int(np.sum(full < 0.0))
    np.maximum(full, 0.0, out=full)

    return ConcentrationTrajectory(
        times=times.copy(),
        concentrations=full[inverse],
        volume=x.volume,
        n_clamped=n_clamped,
        info=info,
    )


def log_amounts(theta, x: FactorPoint, times, **kwargs) -> np.ndarray:
    """Log output amounts at (theta, x); shape (n_times, 3)."""
    return solve_odes(theta, x, times, **kwargs).log_outputs()


def batch_log_amounts(theta, design, **kwargs) -> np.ndarray:
    """Stacked log outputs over a design of (FactorPoint, times) entries.

    Entries sharing an identical factor point are solved together, so a
    design whose rows repeat a handful of treatments costs one solve per
    treatment.  Rows come back in the order the design lists them.
    """
    entries = list(design)
    groups: dict[tuple, list[int]] = {}
    points: list[FactorPoint] = []
    for idx, (x, _) in enumerate(entries):
        key = tuple(x.as_array())
        if key not in groups:
            groups[key] = []
            points.append(x)
        groups[key].append(idx)

    sizes = [np.atleast_1d(np.asarray(t, dtype=float)).size for _, t in entries]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = np.empty((int(offsets[-1]), len(OUTPUT_SPECIES)))
    for x, idxs in zip(points, groups.values()):
        merged = np.concatenate(
            [np.atleast_1d(np.asarray(entries[i][1], dtype=float)) for i in idxs]
        )
        traj = solve_odes(theta, x, merged, **kwargs)
        logs = traj.log_outputs()
        pos = 0
        for i in idxs:
            out[offsets[i] : offsets[i] + sizes[i]] = logs[pos : pos + sizes[i]]
            pos += sizes[i]
    return out

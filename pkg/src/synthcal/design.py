"""Meta-design construction for the emulator.

Covers prior sampling of theta points, randomized Latin hypercubes over box
domains, greedy maximin subsampling, and the bookkeeping half of the
adaptive design-augmentation loop (the sampling side lives in the sampler).
"""

from __future__ import annotations

import csv as _csv
from dataclasses import dataclass

import numpy as np

from .emulator import MetaDesign, evaluate_design
from .kinetics import log_amounts

__all__ = [
    "DesignSpec",
    "prior_theta_design",
    "latin_hypercube",
    "maximin_subsample",
    "augment_design",
    "design_to_csv",
]


@dataclass(frozen=True)
class DesignSpec:
    """Sizing and bounds for one emulator build."""

    phase: str  # "sampling" | "prediction"
    n1_initial: int
    n1: int
    n2: int
    n3: int
    factor_bounds: np.ndarray | None = None
    time_bounds: tuple | None = None

    def __post_init__(self):
        if self.phase not in ("sampling", "prediction"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if min(self.n1_initial, self.n1, self.n2, self.n3) < 1:
            raise ValueError("design sizes must be positive")


def prior_theta_design(n: int, priors, rng) -> np.ndarray:
    """(n, p) iid draws from the prior of theta."""
    if n < 1:
        raise ValueError("need at least one point")
    sd = np.sqrt(priors.theta_var)
    return priors.theta_mean[None, :] + rng.standard_normal((n, priors.p)) * sd[None, :]


def latin_hypercube(n: int, bounds, rng) -> np.ndarray:
    """(n, d) randomized Latin hypercube over a box.

    Each dimension is cut into n strata; every stratum holds exactly one
    point, placed uniformly inside it, with independent permutations
    coupling the dimensions.
    """
    if n < 1:
        raise ValueError("need at least one point")
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(hi < lo):
        raise ValueError("bounds must satisfy low <= high")
    d = bounds.shape[0]
    u = np.empty((n, d))
    for j in range(d):
        strata = rng.permutation(n)
        u[:, j] = (strata + rng.uniform(size=n)) / n
    return lo[None, :] + u * (hi - lo)[None, :]


def maximin_subsample(pool: np.ndarray, k: int) -> np.ndarray:
    """Greedy space-filling subset of k rows from the pool.

    Distances use per-dimension standardization by the pool's own standard
    deviation so that no coordinate dominates.  Starts from the medoid and
    repeatedly adds the point farthest from the chosen set.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    n = pool.shape[0]
    if k > n:
        raise ValueError(f"cannot select {k} points from a pool of {n}")
    if k == n:
        return pool.copy()
    sd = pool.std(axis=0)
    sd[sd == 0.0] = 1.0
    z = pool / sd[None, :]
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=2)
    chosen = [int(np.argmin(d2.sum(axis=1)))]
    min_d2 = d2[chosen[0]].copy()
    while len(chosen) < k:
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        np.minimum(min_d2, d2[nxt], out=min_d2)
    return pool[chosen]


def augment_design(design: MetaDesign, z: np.ndarray, new_thetas, kinetics=log_amounts,
                   **solve_kwargs):
    """Extend zeta1 with new theta points and evaluate their response rows.

    Points already in zeta1 (or duplicated in the batch) are skipped.  The
    caller refits the model on the returned (design, Z).
    """
    new_thetas = np.atleast_2d(np.asarray(new_thetas, dtype=float))
    if new_thetas.size == 0:
        return design, z
    fresh = []
    for theta in new_thetas:
        seen = any(np.allclose(theta, old, rtol=0, atol=1e-12) for old in design.zeta1)
        seen = seen or any(np.allclose(theta, f, rtol=0, atol=1e-12) for f in fresh)
        if not seen:
            fresh.append(theta)
    if not fresh:
        return design, z
    add = MetaDesign(np.array(fresh), design.zeta2, design.zeta3)
    add, z_new = evaluate_design(add, kinetics, **solve_kwargs)
    merged = MetaDesign(
        np.vstack([design.zeta1, add.zeta1]), design.zeta2, design.zeta3
    )
    return merged, np.vstack([z, z_new])


def design_to_csv(design: MetaDesign, path):
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["component", "index"] + [f"value_{i}" for i in range(5)])
        for i, theta in enumerate(design.zeta1):
            writer.writerow(["zeta1", i] + [f"{v:.17g}" for v in theta])
        for i, x in enumerate(design.zeta2):
            writer.writerow(["zeta2", i] + [f"{v:.17g}" for v in x.as_array()])
        for i, t in enumerate(design.zeta3):
            writer.writerow(["zeta3", i, f"{t:.17g}", "", "", "", ""])

"""Adaptive ODE integration with an automatic stiff-phase handoff.

The driver starts with an explicit Cash-Karp 5(4) embedded pair.  When the
controller pins the accepted step far below the remaining-span scale for many
consecutive steps (the signature of stability- rather than accuracy-limited
stepping), it hands the state to an L-stable Rosenbrock 4(3) method (RODAS4
coefficients) that uses the analytic Jacobian.  Output times are hit exactly
by clipping steps, so no interpolant error enters recorded states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

__all__ = ["IntegrationError", "IntegrationInfo", "integrate_ode"]


class IntegrationError(RuntimeError):
    """Integration could not continue; ``last_time`` is the last good t."""

    def __init__(self, message: str, last_time: float):
        super().__init__(f"{message} (last good time t={last_time:.6g})")
        self.last_time = float(last_time)


@dataclass
class IntegrationInfo:
    n_steps: int = 0
    n_rejected: int = 0
    n_rhs: int = 0
    n_jac: int = 0
    n_lu: int = 0
    switched_at: float | None = None
    methods_used: list = field(default_factory=list)


# Cash-Karp 5(4): 6 stages, 5th-order propagation, 4th-order embedded.
_CK_C = np.array([0.0, 1 / 5, 3 / 10, 3 / 5, 1.0, 7 / 8])
_CK_A = (
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([3 / 10, -9 / 10, 6 / 5]),
    np.array([-11 / 54, 5 / 2, -70 / 27, 35 / 27]),
    np.array([1631 / 55296, 175 / 512, 575 / 13824, 44275 / 110592, 253 / 4096]),
)
_CK_B = np.array([37 / 378, 0.0, 250 / 621, 125 / 594, 0.0, 512 / 1771])
_CK_E = np.array(
    [-277 / 64512, 0.0, 6925 / 370944, -6925 / 202752, -277 / 14336, 277 / 7084]
)

# RODAS4: 6-stage stiffly accurate Rosenbrock, order 4 with embedded order 3.
_ROS_GAMMA = 0.25
_ROS_A = (
    np.array([]),
    np.array([1.544]),
    np.array([0.9466785280815826, 0.2557011698983284]),
    np.array([3.314825187068521, 2.896124015972201, 0.9986419139977817]),
    np.array([1.221224509226641, 6.019134481288629, 12.53708332932087, -0.687886036105895]),
    np.array([1.221224509226641, 6.019134481288629, 12.53708332932087, -0.687886036105895, 1.0]),
)
_ROS_C = (
    np.array([]),
    np.array([-5.6688]),
    np.array([-2.430093356833875, -0.2063599157091915]),
    np.array([-0.1073529058151375, -9.594562251023355, -20.47028614809616]),
    np.array([7.496443313967647, -10.24680431464352, -33.99990352819905, 11.7089089320616]),
    np.array(
        [
            8.083246795921522,
            -7.981132988064893,
            -31.52159432874371,
            16.31930543123136,
            -6.058818238834054,
        ]
    ),
)
_ROS_M = np.array(
    [1.221224509226641, 6.019134481288629, 12.53708332932087, -0.687886036105895, 1.0, 1.0]
)
_ROS_E = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0])

_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 6.0
# consecutive accepted steps below span scale before declaring stiffness
_STIFF_COUNT = 20
_STIFF_SPAN_FRAC = 1e-4


def _error_norm(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, rtol: float, atol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, y0, f0, t_end, rtol, atol, order, info):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, t_end - t0)
    y1 = y0 + h0 * f0
    f1 = rhs(y1)
    info.n_rhs += 1
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1.0))
    return min(100.0 * h0, h1, t_end - t0)


def _ck_step(rhs, y, h, info):
    k = np.empty((6, y.size))
    k[0] = rhs(y)
    for i in range(1, 6):
        k[i] = rhs(y + h * (_CK_A[i] @ k[:i]))
    info.n_rhs += 6
    y1 = y + h * (_CK_B @ k)
    err = h * (_CK_E @ k)
    return y1, err


def _ros_step(rhs, jac, y, h, info):
    n = y.size
    g = np.eye(n) / (h * _ROS_GAMMA) - jac(y)
    info.n_jac += 1
    try:
        lu = lu_factor(g)
    except (ValueError, np.linalg.LinAlgError):
        return None, None
    info.n_lu += 1
    k = np.empty((6, n))
    for i in range(6):
        yi = y + (_ROS_A[i] @ k[:i] if i else 0.0)
        fi = rhs(yi)
        rh = fi + ((_ROS_C[i] / h) @ k[:i] if i else 0.0)
        k[i] = lu_solve(lu, rh)
    info.n_rhs += 6
    y1 = y + _ROS_M @ k
    err = _ROS_E @ k
    return y1, err


def integrate_ode(
    rhs,
    jac,
    y0: np.ndarray,
    t0: float,
    t_eval: np.ndarray,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    method: str = "auto",
    max_steps: int = 1_000_000,
) -> tuple[np.ndarray, IntegrationInfo]:
    """Integrate y' = rhs(y) (autonomous) from ``t0``, recording at ``t_eval``.

    Parameters
    ----------
    rhs, jac : callables mapping a state vector to the derivative / Jacobian.
    t_eval : strictly increasing times, all > t0.
    method : "auto" (explicit with stiff handoff), "rkck" or "rosenbrock".

    Returns (states, info) where states has shape (len(t_eval), len(y0)).
    Raises :class:`IntegrationError` when the step controller stalls or the
    step budget is exhausted.
    """
    if method not in ("auto", "rkck", "rosenbrock"):
        raise ValueError(f"unknown method {method!r}")
    t_eval = np.asarray(t_eval, dtype=float)
    if t_eval.ndim != 1 or t_eval.size == 0:
        raise ValueError("t_eval must be a non-empty 1-d array")
    if np.any(np.diff(t_eval) <= 0.0):
        raise ValueError("t_eval must be strictly increasing")
    if t_eval[0] <= t0:
        raise ValueError("all t_eval must be > t0")

    y = np.array(y0, dtype=float)
    t = float(t0)
    t_end = float(t_eval[-1])
    info = IntegrationInfo()
    stiff_mode = method == "rosenbrock"
    info.methods_used.append("rosenbrock" if stiff_mode else "rkck")
    order = 4 if stiff_mode else 5

    f0 = rhs(y)
    info.n_rhs += 1
    h = _initial_step(rhs, t, y, f0, t_end, rtol, atol, order, info)

    out = np.empty((t_eval.size, y.size))
    next_idx = 0
    stiff_hits = 0

    while next_idx < t_eval.size:
        if info.n_steps + info.n_rejected >= max_steps:
            raise IntegrationError("step budget exhausted", t)
        h_floor = max(1e-14, 8.0 * np.finfo(float).eps * max(abs(t), 1.0))
        if h < h_floor:
            if not stiff_mode and method == "auto":
                stiff_mode = True
                info.switched_at = t
                info.methods_used.append("rosenbrock")
                h = h_floor * 1e4
                continue
            raise IntegrationError("step size underflow", t)

        t_next_out = t_eval[next_idx]
        h_try = min(h, t_next_out - t)
        hit_output = h_try >= (t_next_out - t) * (1.0 - 1e-12)

        if stiff_mode:
            y1, err = _ros_step(rhs, jac, y, h_try, info)
            if y1 is None:
                info.n_rejected += 1
                h = h_try * 0.25
                continue
        else:
            y1, err = _ck_step(rhs, y, h_try, info)

        if not np.all(np.isfinite(y1)):
            info.n_rejected += 1
            h = h_try * 0.1
            continue

        enorm = _error_norm(err, y, y1, rtol, atol)
        if enorm <= 1.0:
            t = t_next_out if hit_output else t + h_try
            y = y1
            info.n_steps += 1
            if hit_output:
                out[next_idx] = y
                next_idx += 1
            fac = _SAFETY * (enorm + 1e-300) ** (-1.0 / order)
            h_acc = h_try * min(_FAC_MAX, max(_FAC_MIN, fac))
            if hit_output and enorm <= 0.5:
                # output clipping must not shrink the working step
                h_acc = max(h_acc, h)
            # stability-limited stepping: accepted h far below remaining span
            if method == "auto" and not stiff_mode:
                if h_acc < _STIFF_SPAN_FRAC * max(t_end - t, 1e-30) and not hit_output:
                    stiff_hits += 1
                else:
                    stiff_hits = max(0, stiff_hits - 1)
                if stiff_hits >= _STIFF_COUNT:
                    stiff_mode = True
                    info.switched_at = t
                    info.methods_used.append("rosenbrock")
                    order = 4
            h = h_acc
        else:
            info.n_rejected += 1
            fac = _SAFETY * enorm ** (-1.0 / order)
            h = h_try * min(1.0, max(_FAC_MIN, fac))

    return out, info

"""Batch front end for the calibration pipeline.

Six commands cover the workflow end to end: ``simulate`` writes a synthetic
replica of the batch-synthesis data set, ``sample`` runs the two-phase
posterior sampler and exports the draws, the sampling-phase emulator and its
meta-design, ``predict`` fits the prediction-stage emulator and tabulates
constraint probabilities over an (A0, temperature, time) grid, ``optimize``
searches the whole design region for the most reliable operating point,
``diagnose`` scores the prediction emulator on a held-out test design of the
same size, and ``export-surface`` regenerates the surface CSV from its saved
grid bundle.

Configuration is a flat INI file with sections; any key not set falls back
to a built-in default mirroring the replica study.  Every output file starts
with header comments recording the tool version, the root seed and a hash of
the fully resolved configuration, and every command is a pure function of
those two: rerunning with identical config and seed reproduces each output
byte for byte.  All randomness derives from the single root seed through
named substreams.  Failures append one JSON object per line to the error log
and exit nonzero.

The ``--threads`` flag is recorded in the configuration (and thus the hash)
but execution is single threaded; it exists so schedulers can pass it
without breaking, and so a future parallel build keeps the same interface.
"""

from __future__ import annotations

import argparse
import configparser
import csv as _csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .ace import (
    DESIGN_BOUNDS,
    FACTOR_NAMES,
    AceConfig,
    ace_optimize,
    probability_objective,
    trace_to_csv,
)
from .design import latin_hypercube, maximin_subsample
from .emulator import (
    MetaDesign,
    MGPModel,
    evaluate_design,
    fit_alpha,
    fit_mgp,
    predict,
    write_npz,
)
from .kinetics import FACTOR_BOUNDS, OUTPUT_SPECIES, TIME_HORIZON, FactorPoint, log_amounts
from .model import (
    REPLICA_DISCREPANCY,
    REPLICA_NOISE,
    ExperimentData,
    KineticsMu,
    Priors,
    replica_runs,
    simulate_experiment,
)
from .prediction import ConstraintSpec, EmulatorPredictor, SurfaceResult, probability_surface
from .sampler import (
    PhaseConfig,
    run_exploration_phase,
    run_sampling_phase,
    sample_from_csv,
    sample_to_csv,
)
from .stats import substream

__all__ = ["RunConfig", "load_config", "main"]


DEFAULT_CONFIG = {
    "run": {
        "seed": "2024",
        "out_dir": ".",
        "threads": "1",
    },
    "paths": {
        "data": "data.csv",
        "samples": "samples.csv",
        "emulator": "emulator.npz",
        "meta_design": "meta_design.csv",
        "prediction_emulator": "prediction_emulator.npz",
        "surface": "surface.csv",
        "surface_grid": "surface_grid.npz",
        "report": "optimum.csv",
        "trace": "optimum_trace.csv",
        "diagnostics": "diagnostics.json",
        "errors": "errors.jsonl",
    },
    "simulate": {
        "chi": "0.01",
        "theta": "-9.9 -13.0 -11.78 10.0 10.0",
    },
    "sample": {
        "n_chains": "6",
        "n1_initial": "50",
        "n1_final": "100",
        "points_per_iter": "5",
        "steps_per_iter": "50",
        "alpha_starts": "20",
        "alpha_refit_starts": "4",
        "n_draws": "1000",
        "thin": "1",
        "burn_frac": "0.2",
    },
    "predict": {
        "n_theta": "20",
        "n_factors": "50",
        "n_times": "50",
        "alpha_starts": "20",
        "time_bounds": "10 3000",
    },
    "constraints": {
        "e_max_mols": "3.0",
        "f_min_mols": "20.0",
        "h_max_mols": "3.0",
    },
    "grid": {
        "a0": "22.5 40 7",
        "temperature": "25 40 7",
        "time": "60 3000 13",
        "d0": "91.5",
        "e0": "26.45",
        "volume": "32.0",
    },
    "optimize": {
        "n_starts": "100",
        "n_iterations": "20",
        "grid_points": "20",
        "fine_grid": "200",
        "subsample": "0",
    },
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved, validated run settings plus their provenance hash."""

    seed: int
    out_dir: Path
    threads: int
    paths: dict
    chi: float
    sim_theta: np.ndarray
    phase: PhaseConfig
    n_draws: int
    pred_n_theta: int
    pred_n_factors: int
    pred_n_times: int
    pred_alpha_starts: int
    pred_time_bounds: tuple
    constraints: ConstraintSpec
    grid_a0: np.ndarray
    grid_temperature: np.ndarray
    grid_time: np.ndarray
    grid_fixed: dict
    ace: AceConfig
    opt_subsample: int
    raw: dict
    config_hash: str

    def path(self, key: str) -> Path:
        p = Path(self.paths[key])
        return p if p.is_absolute() else self.out_dir / p

    def header_lines(self) -> list[str]:
        return [
            f"version={__version__}",
            f"seed={self.seed}",
            f"config_hash={self.config_hash}",
        ]


def _parse(raw, section, key, kind, minimum=None):
    text = raw[section][key]
    try:
        value = kind(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None
    if minimum is not None and value < minimum:
        raise ConfigError(f"[{section}] {key} must be >= {minimum}, got {value}")
    return value


def _floats(raw, section, key, count=None) -> np.ndarray:
    try:
        values = np.array([float(v) for v in raw[section][key].split()])
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw[section][key]!r}") from None
    if count is not None and values.size != count:
        raise ConfigError(f"[{section}] {key} needs {count} values, got {values.size}")
    return values


def _axis(raw, section, key, lo, hi) -> np.ndarray:
    spec = _floats(raw, section, key, count=3)
    n = int(spec[2])
    if n < 1 or spec[2] != n:
        raise ConfigError(f"[{section}] {key}: point count must be a positive integer")
    if not lo <= spec[0] <= spec[1] <= hi:
        raise ConfigError(f"[{section}] {key} must stay within [{lo:g}, {hi:g}]")
    return np.linspace(spec[0], spec[1], n)


def _fixed_factor(raw, key, lo, hi) -> float:
    value = _parse(raw, "grid", key, float)
    if not lo <= value <= hi:
        raise ConfigError(f"[grid] {key} must lie in [{lo:g}, {hi:g}], got {value:g}")
    return value


def load_config(path=None, seed=None, out=None, threads=None) -> RunConfig:
    """Defaults, then the INI file, then the command-line overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_dict(DEFAULT_CONFIG)
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
    for section in parser.sections():
        if section not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in DEFAULT_CONFIG[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    if seed is not None:
        parser["run"]["seed"] = str(seed)
    if out is not None:
        parser["run"]["out_dir"] = str(out)
    if threads is not None:
        parser["run"]["threads"] = str(threads)

    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    # out_dir and threads never influence output content, so they stay out
    # of the hash: the same settings rerun elsewhere stay bit-identical
    canonical = "\n".join(
        f"{s}.{k}={v}" for s in sorted(raw) for k, v in sorted(raw[s].items())
        if (s, k) not in (("run", "out_dir"), ("run", "threads"))
    )
    config_hash = hashlib.sha256(canonical.encode()).hexdigest()[:12]

    phase = PhaseConfig(
        n_chains=_parse(raw, "sample", "n_chains", int, minimum=1),
        burn_frac=_parse(raw, "sample", "burn_frac", float, minimum=0.0),
        thin=_parse(raw, "sample", "thin", int, minimum=1),
        n1_initial=_parse(raw, "sample", "n1_initial", int, minimum=1),
        n1_final=_parse(raw, "sample", "n1_final", int, minimum=1),
        points_per_iter=_parse(raw, "sample", "points_per_iter", int, minimum=1),
        steps_per_iter=_parse(raw, "sample", "steps_per_iter", int, minimum=1),
        alpha_starts=_parse(raw, "sample", "alpha_starts", int, minimum=1),
        alpha_refit_starts=_parse(raw, "sample", "alpha_refit_starts", int, minimum=1),
    )
    if phase.burn_frac >= 1.0:
        raise ConfigError("[sample] burn_frac must lie in [0, 1)")
    if phase.n1_final < phase.n1_initial:
        raise ConfigError("[sample] n1_final must be >= n1_initial")

    time_bounds = _floats(raw, "predict", "time_bounds", count=2)
    if not 0.0 <= time_bounds[0] < time_bounds[1] <= TIME_HORIZON:
        raise ConfigError(f"[predict] time_bounds must be increasing within [0, {TIME_HORIZON:g}]")

    thresholds = {
        key: _parse(raw, "constraints", key, float)
        for key in ("e_max_mols", "f_min_mols", "h_max_mols")
    }
    for key, value in thresholds.items():
        if not value > 0.0:
            raise ConfigError(f"[constraints] {key} must be positive, got {value:g}")

    grid_fixed = {
        "d0": _fixed_factor(raw, "d0", *FACTOR_BOUNDS[1]),
        "e0": _fixed_factor(raw, "e0", *FACTOR_BOUNDS[2]),
        "volume": _fixed_factor(raw, "volume", *FACTOR_BOUNDS[4]),
    }

    try:
        ace = AceConfig(
            n_starts=_parse(raw, "optimize", "n_starts", int, minimum=1),
            n_iterations=_parse(raw, "optimize", "n_iterations", int, minimum=0),
            grid_points_per_coord=_parse(raw, "optimize", "grid_points", int, minimum=4),
            candidate_fine_grid=_parse(raw, "optimize", "fine_grid", int, minimum=2),
            seed=_parse(raw, "run", "seed", int, minimum=0),
        )
    except ValueError as exc:
        raise ConfigError(f"[optimize] {exc}") from None

    return RunConfig(
        seed=_parse(raw, "run", "seed", int, minimum=0),
        out_dir=Path(raw["run"]["out_dir"]),
        threads=_parse(raw, "run", "threads", int, minimum=1),
        paths=dict(raw["paths"]),
        chi=_parse(raw, "simulate", "chi", float, minimum=0.0),
        sim_theta=_floats(raw, "simulate", "theta", count=5),
        phase=phase,
        n_draws=_parse(raw, "sample", "n_draws", int, minimum=1),
        pred_n_theta=_parse(raw, "predict", "n_theta", int, minimum=1),
        pred_n_factors=_parse(raw, "predict", "n_factors", int, minimum=1),
        pred_n_times=_parse(raw, "predict", "n_times", int, minimum=1),
        pred_alpha_starts=_parse(raw, "predict", "alpha_starts", int, minimum=1),
        pred_time_bounds=(float(time_bounds[0]), float(time_bounds[1])),
        constraints=ConstraintSpec(
            e_max=math.log(thresholds["e_max_mols"]),
            f_min=math.log(thresholds["f_min_mols"]),
            h_max=math.log(thresholds["h_max_mols"]),
        ),
        grid_a0=_axis(raw, "grid", "a0", *FACTOR_BOUNDS[0]),
        grid_temperature=_axis(raw, "grid", "temperature", *FACTOR_BOUNDS[3]),
        grid_time=_axis(raw, "grid", "time", 0.0, TIME_HORIZON),
        grid_fixed=grid_fixed,
        ace=ace,
        opt_subsample=_parse(raw, "optimize", "subsample", int, minimum=0),
        raw=raw,
        config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# shared pieces


class OdeCounter:
    """Forward-solver pass-through counting calls and (theta, x, t) cells."""

    def __init__(self):
        self.solves = 0
        self.cells = 0

    def __call__(self, theta, x, times, **kwargs):
        self.solves += 1
        self.cells += np.atleast_1d(np.asarray(times)).size
        return log_amounts(theta, x, times, **kwargs)


def _load_data(cfg: RunConfig) -> ExperimentData:
    path = cfg.path("data")
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path} (run simulate first)")
    return ExperimentData.from_csv(path, chi=cfg.chi)


def _load_samples(cfg: RunConfig, data: ExperimentData) -> list:
    path = cfg.path("samples")
    if not path.exists():
        raise FileNotFoundError(f"samples file not found: {path} (run sample first)")
    states = sample_from_csv(path, data)
    if not states:
        raise RuntimeError(f"samples file {path} holds no draws")
    return states


def _distinct_thetas(states) -> np.ndarray:
    return np.unique(np.array([s.theta for s in states]), axis=0)


def _fit_prediction_emulator(cfg: RunConfig, states) -> MGPModel:
    """Space-filling design over the posterior sample, then a fresh MGP fit.

    Deterministic given config+seed, so predict and diagnose agree on the
    model without sharing state through a file.
    """
    rng = substream(cfg.seed, "predict")
    thetas = _distinct_thetas(states)
    if thetas.shape[0] < cfg.pred_n_theta:
        raise RuntimeError(
            f"posterior sample has {thetas.shape[0]} distinct theta points, "
            f"fewer than [predict] n_theta={cfg.pred_n_theta}"
        )
    zeta1 = maximin_subsample(thetas, cfg.pred_n_theta)
    zeta2 = [
        FactorPoint.from_array(row)
        for row in latin_hypercube(cfg.pred_n_factors, FACTOR_BOUNDS, rng)
    ]
    zeta3 = np.sort(
        latin_hypercube(cfg.pred_n_times, [cfg.pred_time_bounds], rng)[:, 0]
    )
    design, z = evaluate_design(MetaDesign(zeta1, zeta2, zeta3))
    alpha = fit_alpha(design, z, rng, n_starts=cfg.pred_alpha_starts)
    return fit_mgp(design, z, alpha)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    rng = substream(cfg.seed, "simulate")
    data = simulate_experiment(
        cfg.sim_theta, REPLICA_DISCREPANCY, REPLICA_NOISE, replica_runs(), cfg.chi, rng
    )
    counts = data.censor_mask.sum(axis=0)
    summary = " ".join(f"{s}:{int(c)}" for s, c in zip(OUTPUT_SPECIES, counts))
    out = cfg.path("data")
    data.to_csv(out, header_lines=cfg.header_lines() + [
        f"chi={cfg.chi:.17g}",
        f"censored_counts={summary}",
    ])
    print(f"censored observations per output: {summary} (of {data.n})")
    return [out]


def cmd_sample(cfg: RunConfig) -> list[Path]:
    data = _load_data(cfg)
    priors = Priors.default()
    counter = OdeCounter()
    rng = substream(cfg.seed, "sample")
    exploration = run_exploration_phase(data, priors, counter, cfg.phase, rng, seed=cfg.seed)

    n1, n2, n3 = exploration.design.sizes
    budget = cfg.phase.n1_final * n2 * n3
    if counter.cells > budget:
        raise RuntimeError(
            f"exploration used {counter.cells} forward-model cells, over the {budget} budget"
        )

    kinetics = KineticsMu(data)
    sample = run_sampling_phase(
        data, priors, exploration.model, kinetics, cfg.phase, rng,
        n_draws=cfg.n_draws, seed=cfg.seed, warm=exploration,
    )
    diag = sample.diagnostics
    header = cfg.header_lines() + [
        f"exploration_ode_solves={counter.solves}",
        f"exploration_ode_cells={counter.cells} budget={budget}",
        f"sampling_ode_evals={diag['ode_evals_steady']}",
        f"burn_sweeps={diag['burn_sweeps']} steady_sweeps={diag['steady_sweeps']}",
    ]

    samples_path = cfg.path("samples")
    sample_to_csv(sample, samples_path, include_latent=True, header_lines=header)
    emulator_path = cfg.path("emulator")
    exploration.model.save(emulator_path)

    meta_path = cfg.path("meta_design")
    with open(meta_path, "w", newline="") as fh:
        for line in cfg.header_lines() + [f"n_factor_points={n2} n_times={n3}"]:
            fh.write(f"# {line}\n")
        writer = _csv.writer(fh)
        writer.writerow([f"theta_{i + 1}" for i in range(exploration.design.zeta1.shape[1])])
        for row in exploration.design.zeta1:
            writer.writerow([f"{v:.17g}" for v in row])

    print(f"exploration: {counter.solves} ODE solves, {counter.cells}/{budget} design cells, "
          f"meta-design {n1} theta points")
    print(f"sampling: {sample.size} draws, {diag['ode_evals_steady']} steady-state ODE evals")
    return [samples_path, emulator_path, meta_path]


def cmd_predict(cfg: RunConfig) -> list[Path]:
    data = _load_data(cfg)
    states = _load_samples(cfg, data)
    model = _fit_prediction_emulator(cfg, states)
    bundle_path = cfg.path("prediction_emulator")
    model.save(bundle_path)

    header = cfg.header_lines() + [
        f"n_draws={len(states)}",
        "fixed=" + " ".join(f"{k}:{v:.17g}" for k, v in sorted(cfg.grid_fixed.items())),
    ]
    surface = probability_surface(
        states, cfg.grid_a0, cfg.grid_temperature, cfg.grid_time,
        cfg.grid_fixed, cfg.constraints, EmulatorPredictor(model, data), seed=cfg.seed,
    )
    surface_path = cfg.path("surface")
    surface.to_csv(surface_path, header_lines=header)

    grid_path = cfg.path("surface_grid")
    write_npz(grid_path, {
        "a0": surface.a0_values,
        "temperature": surface.temperatures,
        "time": surface.times,
        "fixed": np.array([cfg.grid_fixed[k] for k in ("d0", "e0", "volume")]),
        "p_e": surface.p_e,
        "p_f": surface.p_f,
        "p_h": surface.p_h,
        "p_joint": surface.p_joint,
        "mc_se": surface.mc_se,
        "n_draws": surface.n_draws,
        "header": np.array(header),
    })
    best = np.unravel_index(np.argmax(surface.p_joint), surface.p_joint.shape)
    print(f"surface: {surface.p_joint.size} cells from {len(states)} draws, "
          f"max p_joint={surface.p_joint[best]:.4g} at A0={surface.a0_values[best[0]]:g} "
          f"temperature={surface.temperatures[best[1]]:g} time={surface.times[best[2]]:g}")
    return [bundle_path, surface_path, grid_path]


def cmd_export_surface(cfg: RunConfig) -> list[Path]:
    grid_path = cfg.path("surface_grid")
    if not grid_path.exists():
        raise FileNotFoundError(f"surface grid bundle not found: {grid_path} (run predict first)")
    with np.load(grid_path) as bundle:
        surface = SurfaceResult(
            a0_values=bundle["a0"],
            temperatures=bundle["temperature"],
            times=bundle["time"],
            fixed=dict(zip(("d0", "e0", "volume"), bundle["fixed"].tolist())),
            p_e=bundle["p_e"],
            p_f=bundle["p_f"],
            p_h=bundle["p_h"],
            p_joint=bundle["p_joint"],
            mc_se=bundle["mc_se"],
            n_draws=int(bundle["n_draws"]),
        )
        header = [str(line) for line in bundle["header"]]
    out = cfg.path("surface")
    surface.to_csv(out, header_lines=header)
    return [out]


def cmd_optimize(cfg: RunConfig) -> list[Path]:
    data = _load_data(cfg)
    states = _load_samples(cfg, data)
    bundle_path = cfg.path("prediction_emulator")
    if not bundle_path.exists():
        raise FileNotFoundError(
            f"prediction emulator not found: {bundle_path} (run predict first)"
        )
    model = MGPModel.load(bundle_path)

    objective = probability_objective(
        states, cfg.constraints, EmulatorPredictor(model, data),
        subsample=cfg.opt_subsample or None,
    )
    result = ace_optimize(objective, DESIGN_BOUNDS, cfg.ace, substream(cfg.seed, "optimize"))

    header = cfg.header_lines() + [
        f"n_draws={len(states)} subsample={cfg.opt_subsample or len(states)}",
        f"starts={cfg.ace.n_starts} failed_starts={len(result.failures)}",
    ]
    report_path = cfg.path("report")
    with open(report_path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        writer = _csv.writer(fh)
        writer.writerow([*FACTOR_NAMES, "probability", "mc_se"])
        writer.writerow([f"{v:.17g}" for v in (*result.point, result.probability, result.mc_se)])
    trace_path = cfg.path("trace")
    trace_to_csv(result.trace, trace_path, header_lines=header)

    point = " ".join(f"{n}={v:.4g}" for n, v in zip(FACTOR_NAMES, result.point))
    print(f"optimum: {point} with p={result.probability:.4g} (se {result.mc_se:.2g})")
    return [report_path, trace_path]


def cmd_diagnose(cfg: RunConfig) -> list[Path]:
    data = _load_data(cfg)
    states = _load_samples(cfg, data)
    model = _fit_prediction_emulator(cfg, states)

    rng = substream(cfg.seed, "diagnose")
    thetas = _distinct_thetas(states)
    train = model.design.zeta1
    held = np.array([
        row for row in thetas
        if not any(np.allclose(row, t, rtol=0, atol=1e-12) for t in train)
    ])
    if held.shape[0] < cfg.pred_n_theta:
        raise RuntimeError(
            f"only {held.shape[0]} posterior theta points are held out from training; "
            f"need [predict] n_theta={cfg.pred_n_theta}"
        )
    zeta1 = held[np.sort(rng.choice(held.shape[0], size=cfg.pred_n_theta, replace=False))]
    zeta2 = [
        FactorPoint.from_array(row)
        for row in latin_hypercube(cfg.pred_n_factors, FACTOR_BOUNDS, rng)
    ]
    zeta3 = np.sort(latin_hypercube(cfg.pred_n_times, [cfg.pred_time_bounds], rng)[:, 0])

    sq_err = np.zeros(len(OUTPUT_SPECIES))
    inside = np.zeros(len(OUTPUT_SPECIES))
    n_cells = 0
    for theta in zeta1:
        for x in zeta2:
            truth = log_amounts(theta, x, zeta3)
            for k, t in enumerate(zeta3):
                q = predict(model, theta, x, float(t))
                err = q.mean - truth[k]
                sq_err += err**2
                sd = np.sqrt(np.clip(np.diag(q.cov), 0.0, None))
                inside += np.abs(err) <= 1.96 * sd
                n_cells += 1

    mse = sq_err / n_cells
    coverage = inside / n_cells
    pooled = float(inside.sum() / (len(OUTPUT_SPECIES) * n_cells))
    report = {
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash,
        "test_design": {
            "n_theta": cfg.pred_n_theta,
            "n_factors": cfg.pred_n_factors,
            "n_times": cfg.pred_n_times,
            "n_cells": int(n_cells),
        },
        "mse": {s: float(mse[i]) for i, s in enumerate(OUTPUT_SPECIES)},
        "coverage95": {s: float(coverage[i]) for i, s in enumerate(OUTPUT_SPECIES)},
        "coverage95_pooled": pooled,
        "mse_finite": bool(np.all(np.isfinite(mse))),
        "coverage_in_range": bool(0.90 <= pooled <= 0.98),
    }
    out = cfg.path("diagnostics")
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"diagnostics: mse={[f'{v:.3g}' for v in mse]} coverage95={pooled:.3f} "
          f"on {n_cells} held-out cells")
    return [out]


COMMANDS = {
    "simulate": cmd_simulate,
    "sample": cmd_sample,
    "predict": cmd_predict,
    "optimize": cmd_optimize,
    "diagnose": cmd_diagnose,
    "export-surface": cmd_export_surface,
}


# ---------------------------------------------------------------------------
# entry point


def _append_error(path: Path, command: str, exc: Exception) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            fh.write(json.dumps(
                {"command": command, "error": type(exc).__name__, "message": str(exc)},
                sort_keys=True,
            ) + "\n")
    except OSError:
        pass  # the stderr message and exit code still report the failure


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthcal",
        description="Calibrate the batch-synthesis kinetics model and optimize its operation.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", metavar="FILE", help="INI config; omitted keys use defaults")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--out", metavar="DIR", help="override [run] out_dir")
    parser.add_argument("--threads", type=int, help="override [run] threads (recorded only)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)
    except Exception as exc:
        out_dir = Path(args.out) if args.out else Path(".")
        _append_error(out_dir / DEFAULT_CONFIG["paths"]["errors"], args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](cfg)
    except Exception as exc:
        _append_error(cfg.path("errors"), args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

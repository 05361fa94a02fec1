"""
commands.py — one pipeline per carpet_lab subcommand
===================================================

Every command takes the validated RunConfig, an ArtifactWriter and a
StageClock, writes its tables and reports, and returns the named acceptance
assertions it evaluated. ``execute`` wraps a command with timing, logging and
the run manifest.

Public API
──────────
    COMMANDS: Dict[Subcommand, Callable]
    execute(config)  → RunManifest
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from loguru import logger
from scipy import integrate

from analysis.special import (
    BesselDensitySpec,
    bessel_drift_regression,
    chapman_kolmogorov_residual,
    h_ode_check,
    h_ode_integration_check,
    ks_against_density,
    radial_bessel_density,
    simulate_radial_bessel,
)
from core.exceptions import ParameterDomainError, RunAborted
from core.grid import DiskDomain
from core.models import MarkedPointRule, RunConfig, RunManifest, SleParams, StageTiming, Subcommand
from core.params import (
    KAPPA_MAX,
    KAPPA_MIN,
    carpet_dimension,
    covariance_identity_residual,
    derive_params,
    loop_soup_intensity,
)
from core.seeding import STREAM_SOUP, STREAM_THINNING, derive_seed, spawn_seeds
from measures.cle_measure import (
    aggregate_measures,
    cle4_measure_via_coupling,
    disk_reference_covariance_residual,
    estimate_xi,
    loop_mass_vanishing_test,
    quadrant_symmetry_check,
    radial_intensity_fit,
    rotation_equivariance_test,
    shift_scaling_check,
    uniqueness_normalization_check,
    xi_replica,
)
from measures.gmc import generalized_quantum_length, sample_stable_jumps, shift_stable_record, stable_scaling_check
from measures.markov import SubDomain, markov_restriction_test
from measures.natural_param import (
    box_dimension,
    eps_drift_diagnostic,
    estimate_mu0,
    intensity_shape_check,
    lebesgue_stand_in,
    mirror_symmetry_check,
    scaling_covariance_check,
    trace_box_dimension,
)
from pipeline.exports import ArtifactWriter
from pipeline.runner import run_replicas
from sampling.loewner import (
    DrivingFunction,
    LoewnerTrace,
    Swallowed,
    forward_flow,
    sample_sle_driving,
    solve_forward,
    trace_from_driving,
)
from sampling.loopsoup import default_t_min, restriction_smoke_test, sample_cle, sample_loop_soup, thin_soup

MAX_TRACE_TIPS = 2000
BESSEL_SAMPLES = 10_000
STABLE_EPS = (1e-2, 1e-3, 1e-4)
MU0_PROBE_BOXES = [
    (-0.75, -0.25, 0.25, 0.75),
    (0.25, 0.75, 0.25, 0.75),
    (-0.25, 0.25, 0.5, 1.0),
    (-0.25, 0.25, 1.0, 1.5),
    (0.5, 1.0, 1.0, 1.5),
]
XI_PROBE_BOXES = [
    (-0.5, 0.0, -0.5, 0.0),
    (0.0, 0.5, -0.5, 0.0),
    (-0.5, 0.0, 0.0, 0.5),
    (0.0, 0.5, 0.0, 0.5),
    (-0.25, 0.25, -0.25, 0.25),
]


# ============================================================================
# PLUMBING
# ============================================================================

@dataclass
class CommandResult:
    assertions: Dict[str, bool] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    params: Optional[SleParams] = None


class StageClock:
    """Wall-clock per named stage, for the manifest."""

    def __init__(self):
        self.timings: List[StageTiming] = []

    @contextmanager
    def stage(self, name: str):
        logger.info(f"▶ {name}")
        started = time.perf_counter()
        try:
            yield
        finally:
            seconds = time.perf_counter() - started
            self.timings.append(StageTiming(stage=name, seconds=seconds))
            logger.info(f"⏱ {name}: {seconds:.2f}s")


def _params(kappa: float) -> Optional[SleParams]:
    return derive_params(kappa) if KAPPA_MIN <= kappa < KAPPA_MAX else None


def _require(kappa: float, lo: float, hi: float, label: str) -> SleParams:
    if not lo < kappa < hi:
        raise ParameterDomainError("kappa", kappa, label)
    return derive_params(kappa)


def _trace_job(kappa: float, dt: float, n_steps: int, seed: int, stride: int) -> LoewnerTrace:
    return trace_from_driving(sample_sle_driving(kappa, dt, n_steps, seed), stride=stride)


def _traces(config: RunConfig, kappa: float, count: int, stride: int) -> List[LoewnerTrace]:
    jobs = [(kappa, config.dt, config.n_steps, s, stride) for s in spawn_seeds(config.seed, count)]
    return run_replicas(_trace_job, jobs, config.workers)


def _collect_warnings(result: CommandResult, metadata: Dict) -> None:
    for key in ("warnings", "notes"):
        result.warnings.extend(str(w) for w in metadata.get(key, []))


# ============================================================================
# PARAMETERS AND LOEWNER
# ============================================================================

def cmd_params(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult(params=derive_params(config.kappa))
    with clock.stage("parameter identities"):
        rng = np.random.default_rng(config.seed)
        sample = rng.uniform(KAPPA_MIN, KAPPA_MAX, 10_000)
        gap = max(abs(carpet_dimension(k) - carpet_dimension(k, "product")) for k in sample)
        rows = []
        for k in sorted(set(config.kappas) | {config.kappa}):
            p = _params(k)
            if p is None:
                result.warnings.append(f"kappa={k:g} has no carpet parameters (outside [8/3, 8))")
                continue
            rows.append({**p.model_dump(), "covariance_identity_residual": covariance_identity_residual(p)})
    writer.csv("params.csv", pd.DataFrame(rows))
    writer.json("params.json", {"params": result.params.model_dump(), "table": rows, "closed_form_gap": gap})
    result.assertions.update({
        "closed_forms_agree": gap < 1e-12,
        "d_at_4": carpet_dimension(4.0) == 1.875,
        "d_endpoints": abs(carpet_dimension(KAPPA_MIN) - 2.0) < 1e-12 and abs(carpet_dimension(KAPPA_MAX) - 2.0) < 1e-12,
        "covariance_identity": all(abs(r["covariance_identity_residual"]) < 1e-12 for r in rows),
    })
    return result


def loewner_exactness(seed: int = 0) -> Dict:
    """Zero driver: g_t(z) = sqrt(z^2 + 4t) at 100 probes and T_{iy} = y^2/4."""
    zero = DrivingFunction(times=np.linspace(0.0, 1.0, 101), values=np.zeros(101), kappa=0.0)
    rng = np.random.default_rng(seed)
    z = rng.uniform(-2.0, 2.0, 100) + 1j * rng.uniform(0.5, 2.0, 100)
    values, _ = forward_flow(zero, z, 1.0)
    exact = np.sqrt(z * z + 4.0)
    exact = np.where(exact.imag < 0, -exact, exact)
    verdict = solve_forward(zero, 1j, 1.0)
    swallow = verdict.time if isinstance(verdict, Swallowed) else math.nan
    return {"max_map_error": float(np.max(np.abs(values - exact))), "swallow_time": swallow,
            "swallow_error": abs(swallow - 0.25)}


def cmd_sle_trace(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult(params=_params(config.kappa))
    stride = max(1, config.n_steps // MAX_TRACE_TIPS)
    for seed in config.seeds:
        with clock.stage(f"trace seed={seed}"):
            driving = sample_sle_driving(config.kappa, config.dt, config.n_steps, seed)
            trace = trace_from_driving(driving, stride=stride)
        writer.csv(f"driver_seed{seed}.csv", driving.to_frame())
        writer.csv(f"trace_seed{seed}.csv", trace.to_frame())
        writer.svg_scatter(f"trace_seed{seed}.svg", trace.points, f"SLE kappa={config.kappa:g} seed={seed}")
    with clock.stage("loewner exactness"):
        exact = loewner_exactness(config.seed)
    writer.json("loewner_exactness.json", exact)
    result.assertions.update({
        "forward_map_exact": exact["max_map_error"] < 1e-6,
        "swallow_time_exact": exact["swallow_error"] < 1e-4,
    })
    return result


def cmd_dim_est(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult(params=_params(config.kappa))
    stride = max(1, config.n_steps // (8 * MAX_TRACE_TIPS))
    rows = []
    for kappa in config.kappas:
        with clock.stage(f"box dimension kappa={kappa:g}"):
            for i, trace in enumerate(_traces(config, kappa, config.n_traces, stride)):
                rows.append({"kappa": kappa, "trace": i, "dimension": trace_box_dimension(trace, n=config.grid_size),
                             "expected": min(2.0, 1.0 + kappa / 8.0)})
    frame = pd.DataFrame(rows)
    writer.csv("trace_dimensions.csv", frame)
    summary = frame.groupby("kappa").agg(mean=("dimension", "mean"), expected=("expected", "first")).reset_index()
    writer.json("trace_dimensions.json", summary.to_dict(orient="records"))
    for row in summary.itertuples():
        result.assertions[f"trace_dimension_kappa_{row.kappa:.4g}"] = abs(row.mean - row.expected) <= 0.1
    return result


# ============================================================================
# LOOP SOUPS AND CARPETS
# ============================================================================

def cmd_loop_soup(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult(params=_params(config.kappa))
    domain = DiskDomain()
    c = loop_soup_intensity(config.kappa)
    t_min = config.t_min or default_t_min(config.grid_size, domain)
    with clock.stage("soup"):
        soup = sample_loop_soup(domain, c, t_min, config.t_cap, None, derive_seed(config.seed, STREAM_SOUP))
    writer.csv("loops.csv", soup.to_frame())
    writer.json("soup.json", soup.describe())
    writer.svg_scatter("soup.svg", np.concatenate([l.polyline for l in soup.loops]) if soup.loops else np.zeros(0),
                       f"loop soup c={c:.4g}")

    with clock.stage("thinning"):
        marks = derive_seed(config.seed, STREAM_THINNING)
        half, quarter = thin_soup(soup, c / 2.0, marks), thin_soup(soup, c / 4.0, marks)
        nested = {l.loop_id for l in quarter.loops} <= {l.loop_id for l in half.loops}
    with clock.stage("restriction"):
        report = restriction_smoke_test(DiskDomain(0j, 0.5), c, t_min, config.t_cap, config.n_replicas, config.seed)
    writer.json("restriction.json", report.to_dict())
    if not soup.loops:
        result.warnings.append("empty soup")
    result.assertions.update({"thinning_nested": nested, "restriction": report.passed})
    return result


def cmd_carpet(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult(params=_params(config.kappa))
    grid = DiskDomain().grid(config.grid_size)
    with clock.stage("cle"):
        soup, cle = sample_cle(config.kappa, loop_soup_intensity(config.kappa), grid,
                               derive_seed(config.seed, STREAM_SOUP), t_min=config.t_min, t_cap=config.t_cap)
    with clock.stage("box dimension"):
        dimension = box_dimension(cle.carpet)
    expected = carpet_dimension(config.kappa)
    writer.pgm("carpet.pgm", cle.carpet)
    boundaries = [pd.DataFrame({"loop_id": k, "vertex": np.arange(b.size), "re": b.real, "im": b.imag})
                  for k, b in enumerate(cle.outer_boundaries)]
    writer.csv("cle_loops.csv", pd.concat(boundaries, ignore_index=True) if boundaries
               else pd.DataFrame(columns=["loop_id", "vertex", "re", "im"]))
    writer.json("carpet.json", {"box_dimension": dimension, "expected": expected, "n_loops": cle.n_loops,
                                "n_soup_loops": len(soup), **cle.metadata})
    writer.svg_heatmap("carpet.svg", cle.carpet.astype(float), (-1, 1, -1, 1), f"carpet kappa={config.kappa:g}")
    _collect_warnings(result, cle.metadata)
    result.assertions["carpet_dimension"] = abs(dimension - expected) <= 0.1
    return result


# ============================================================================
# XI
# ============================================================================

def _xi_setup(config: RunConfig):
    params = _require(config.kappa, KAPPA_MIN, 4.0, "(8/3, 4)")
    grid = DiskDomain().grid(config.grid_size)
    eps = config.eps or 8.0 * grid.h
    return params, grid, eps


def _xi_run(config: RunConfig, grid, eps, stream: int = 0, marked_point=MarkedPointRule.QUANTUM,
            field_resolution: Optional[int] = None):
    jobs = [(config.kappa, grid, config.n_fields, s, eps, config.t_min, config.t_cap, None,
             field_resolution or config.field_resolution, 0, marked_point)
            for s in spawn_seeds(config.seed, config.n_replicas, stream)]
    return aggregate_measures(run_replicas(xi_replica, jobs, config.workers))


def cmd_xi_estimate(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    params, grid, eps = _xi_setup(config)
    result = CommandResult(params=params)
    with clock.stage(f"xi over {config.n_replicas} CLE samples"):
        measure = _xi_run(config, grid, eps)
    with clock.stage("shape and covariance"):
        radial = radial_intensity_fit(measure, params.d_carpet)
        quadrants = quadrant_symmetry_check(measure)
        reference = disk_reference_covariance_residual(100, params.d_carpet, config.seed)
        rotation = rotation_equivariance_test(config.kappa, config.n_replicas, config.seed, config.grid_size,
                                              config.n_fields, eps, config.t_min, config.t_cap, None,
                                              config.field_resolution, config.workers)
        loop_mass = loop_mass_vanishing_test(config.kappa, config.n_replicas, [r * grid.h for r in (16, 8, 4, 2)],
                                             config.seed, config.grid_size, config.n_fields, eps, config.t_min,
                                             config.t_cap, None, config.field_resolution, config.workers)
    with clock.stage("shift identity and eps drift"):
        _, cle = sample_cle(config.kappa, loop_soup_intensity(config.kappa), grid,
                            derive_seed(config.seed, STREAM_SOUP), t_min=config.t_min, t_cap=config.t_cap)
        shift = shift_scaling_check(cle, params, eps, 0.7, config.seed, field_resolution=config.field_resolution)
        drift = eps_drift_diagnostic(
            lambda e: estimate_xi(cle, config.n_fields, params, e, config.seed,
                                  field_resolution=config.field_resolution),
            [eps, 2.0 * eps, 4.0 * eps])

    writer.csv("xi_masses.csv", measure.to_frame())
    writer.csv("xi_eps_drift.csv", drift)
    writer.json("xi_report.json", {"measure": measure.describe(), "radial_fit": radial, "quadrants": quadrants,
                                   "disk_reference_residual": reference, "rotation": rotation, "shift": shift,
                                   "loop_mass": loop_mass.to_dict()})
    writer.svg_heatmap("xi_masses.svg", measure.masses, (-1, 1, -1, 1), f"Xi kappa={config.kappa:g}")
    if measure.total == 0:
        result.warnings.append("Xi is zero on every sample; lower eps")
    result.assertions.update({
        "radial_slope": bool(radial["passed"]),
        "quadrant_symmetry": bool(quadrants["passed"]),
        "disk_reference_covariance": reference < 1e-10,
        "rotation_equivariance": bool(rotation["passed"]),
        "shift_identity": bool(shift["passed"]),
        "loop_mass_vanishes": loop_mass.passed,
    })
    return result


def cmd_uniqueness_check(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    params, grid, eps = _xi_setup(config)
    result = CommandResult(params=params)
    coarse = max(16, (config.field_resolution or config.grid_size) // 2)
    with clock.stage("estimator A (quantum marked points)"):
        run_a = _xi_run(config, grid, eps)
    with clock.stage("estimator B (euclidean marked points, coarse fields)"):
        run_b = _xi_run(config, grid, eps, stream=1, marked_point=MarkedPointRule.EUCLIDEAN, field_resolution=coarse)
    report = uniqueness_normalization_check(run_a, run_b, XI_PROBE_BOXES)
    writer.csv("uniqueness_boxes.csv", report.boxes)
    writer.json("uniqueness.json", {**report.to_dict(), "run_a": run_a.describe(), "run_b": run_b.describe()})
    result.assertions["uniqueness"] = report.passed
    return result


def cmd_markov_test(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    params, grid, eps = _xi_setup(config)
    result = CommandResult(params=params)
    with clock.stage("markov restriction"):
        report = markov_restriction_test(config.kappa, SubDomain.upper_half_disk(), config.n_replicas, config.seed,
                                         grid_n=config.grid_size, n_fields=config.n_fields, eps=eps,
                                         t_min=config.t_min, t_cap=config.t_cap,
                                         field_resolution=config.field_resolution, workers=config.workers)
    writer.csv("markov_totals.csv", pd.DataFrame({"pushed": pd.Series(report.pushed_totals, dtype=float),
                                                  "reference": pd.Series(report.reference_totals, dtype=float)}))
    writer.json("markov.json", report.to_dict())
    if report.skipped:
        result.warnings.append(f"{report.skipped} replicas skipped: probe swallowed")
    result.assertions["markov_restriction"] = report.passed
    return result


def cmd_cle4_coupling(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult(params=_params(4.0))
    with clock.stage("coupling"):
        measures, diagnostics = cle4_measure_via_coupling(
            config.c_sequence, config.n_fields, config.seed, grid_n=config.grid_size, eps=config.eps,
            t_min=config.t_min, t_cap=config.t_cap, field_resolution=config.field_resolution)
    rows = [{"c": c, "kappa": k, "d": d, "n_loops": n, "total": t}
            for c, k, d, n, t in zip(diagnostics["c_sequence"], diagnostics["kappas"], diagnostics["d_values"],
                                     diagnostics["n_loops"], diagnostics["totals"])]
    writer.csv("coupling.csv", pd.DataFrame(rows))
    writer.json("coupling.json", diagnostics)
    for m in measures:
        writer.pgm(f"carpet_c{m.metadata['c']:.4f}.pgm", m.carpet)
    result.assertions["carpet_nesting"] = bool(diagnostics["monotone"])
    return result


# ============================================================================
# NATURAL PARAMETERIZATION
# ============================================================================

def _mu0(config: RunConfig, clock: StageClock):
    params = _require(config.kappa, 4.0, KAPPA_MAX, "(4, 8)")
    with clock.stage(f"{config.n_traces} traces"):
        traces = _traces(config, config.kappa, config.n_traces, 1)
    eps = config.eps or 8.0 * 2.0 / config.grid_size
    with clock.stage("mu0 estimate"):
        estimate = estimate_mu0(traces, config.n_fields, params, eps, n=config.grid_size, seed=config.seed,
                                field_resolution=config.field_resolution, workers=config.workers)
    return params, traces, estimate


def cmd_mu0_estimate(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult()
    params, traces, estimate = _mu0(config, clock)
    result.params = params
    with clock.stage("shape checks"):
        shape = intensity_shape_check(estimate, MU0_PROBE_BOXES, config.kappa)
        mirror = mirror_symmetry_check(estimate, (0.25, 0.75, 0.25, 0.75))
    with clock.stage("eps drift"):
        drift = eps_drift_diagnostic(
            lambda e: estimate_mu0(traces, config.n_fields, params, e, n=config.grid_size, seed=config.seed,
                                   field_resolution=config.field_resolution, workers=config.workers),
            [estimate.eps, 2.0 * estimate.eps, 4.0 * estimate.eps])
    writer.csv("mu0_masses.csv", estimate.to_frame())
    writer.csv("mu0_shape.csv", shape.table)
    writer.csv("mu0_eps_drift.csv", drift)
    writer.json("mu0_report.json", {"estimate": estimate.describe(), "shape": shape.to_dict(), "mirror": mirror})
    writer.svg_heatmap("mu0_masses.svg", estimate.mass, (-1, 1, 0, 2), f"mu0 kappa={config.kappa:g}")
    if traces:
        writer.svg_scatter("mu0_trace0.svg", traces[0].points, "first trace")
    _collect_warnings(result, estimate.metadata)
    result.assertions.update({"intensity_shape": shape.passed, "mirror_symmetry": bool(mirror["passed"])})
    return result


def cmd_covariance_check(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult()
    params, traces, estimate = _mu0(config, clock)
    result.params = params
    with clock.stage(f"dilation by b={config.scale:g}"):
        mu0_report = scaling_covariance_check(estimate, config.scale, MU0_PROBE_BOXES[:3])
        lebesgue_report = scaling_covariance_check(lebesgue_stand_in(traces, n=config.grid_size), config.scale,
                                                   MU0_PROBE_BOXES[:3])
    writer.csv("covariance_boxes.csv", mu0_report.boxes)
    writer.json("covariance.json", {"mu0": mu0_report.to_dict(), "lebesgue": lebesgue_report.to_dict(),
                                    "identity_residual": covariance_identity_residual(params)})
    result.assertions.update({
        "mu0_dilation": mu0_report.passed,
        "lebesgue_dilation": lebesgue_report.passed,
        "covariance_identity": abs(covariance_identity_residual(params)) < 1e-12,
    })
    return result


def cmd_stable_scaling(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    params = _require(config.kappa, 4.0, KAPPA_MAX, "(4, 8)")
    result = CommandResult(params=params)
    with clock.stage("stable jump counts"):
        frame = stable_scaling_check(params.alpha_hat, STABLE_EPS, n_replicas=config.n_replicas, seed=config.seed)
    first = frame.iloc[0]
    spread = np.hypot(frame["normalized_stderr"], first["normalized_stderr"])
    drift_z = np.where(spread > 0, (frame["normalized"] - first["normalized"]) / np.where(spread > 0, spread, 1), 0)
    with clock.stage("shift identity"):
        record = sample_stable_jumps(params.alpha_hat, 1.0, STABLE_EPS[1], seed=config.seed)
        C = 0.7
        factor = math.exp(0.5 * params.gamma * C)
        base = generalized_quantum_length(record, STABLE_EPS[0])
        shifted = generalized_quantum_length(shift_stable_record(record, C, params.gamma), STABLE_EPS[0] * factor)
        expected = factor ** params.alpha_hat * base
        shift_error = abs(shifted - expected) / expected if expected else abs(shifted)
    writer.csv("stable_scaling.csv", frame)
    writer.json("stable_scaling.json", {"alpha_hat": params.alpha_hat, "max_drift_z": float(np.max(np.abs(drift_z))),
                                        "shift_relative_error": shift_error})
    result.assertions.update({
        "oracle_counts": bool((frame["z_oracle"].abs() < 3.0).all()),
        "normalized_constant": bool(np.all(np.abs(drift_z) < 3.0)),
        "shift_identity": shift_error < 1e-12,
    })
    return result


# ============================================================================
# ANALYTIC KIT
# ============================================================================

def cmd_ode_check(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult(params=_params(config.kappa))
    with clock.stage("H-ODE"):
        residual = h_ode_check(config.kappa, np.linspace(0.01, math.pi - 0.01, 2001))
        integration = h_ode_integration_check(config.kappa)
    writer.json("ode_check.json", {"kappa": config.kappa, "max_residual": residual, "rk_max_deviation": integration})
    result.assertions.update({"ode_residual": residual < 1e-10, "ode_integration": integration < 1e-6})
    return result


def cmd_bessel_check(config: RunConfig, writer: ArtifactWriter, clock: StageClock) -> CommandResult:
    result = CommandResult(params=_params(config.kappa))
    a = 2.0 / config.kappa
    s, theta0 = 0.5, 1.0
    with clock.stage("series"):
        spec = BesselDensitySpec(a, s)
        ys = np.linspace(0.0, math.pi, 20001)
        mass = float(integrate.trapezoid(radial_bessel_density(spec, theta0, ys), ys))
        ck = chapman_kolmogorov_residual(a, 0.3, 0.7, theta0, 2.0)
        grid = np.linspace(0.01, math.pi - 0.01, 200)
        minimum = float(np.min(radial_bessel_density(BesselDensitySpec(a, 0.05), grid[:, None], grid[None, :])))
    with clock.stage("sde"):
        dt = min(config.dt, 1e-3 * s)
        samples = simulate_radial_bessel(a, theta0, s, dt, BESSEL_SAMPLES, config.seed)
        ks = ks_against_density(samples, spec, theta0)
        drift = bessel_drift_regression(a, seed=config.seed)
    writer.csv("bessel_endpoints.csv", pd.DataFrame({"theta": samples}))
    writer.json("bessel_check.json", {"a": a, "s": s, "n_terms": spec.n_terms, "tail_bound": spec.tail_bound,
                                      "total_mass": mass, "chapman_kolmogorov": ck, "min_density": minimum,
                                      "ks": ks, "drift": drift})
    result.assertions.update({
        "density_normalized": abs(mass - 1.0) < 1e-6,
        "chapman_kolmogorov": ck < 1e-6,
        "density_positive": minimum >= -1e-9,
        "sde_matches_density": ks["p_value"] >= 0.01,
        "drift_slope": bool(drift["passed"]),
    })
    return result


COMMANDS: Dict[Subcommand, Callable[[RunConfig, ArtifactWriter, StageClock], CommandResult]] = {
    Subcommand.PARAMS: cmd_params,
    Subcommand.SLE_TRACE: cmd_sle_trace,
    Subcommand.DIM_EST: cmd_dim_est,
    Subcommand.LOOP_SOUP: cmd_loop_soup,
    Subcommand.CARPET: cmd_carpet,
    Subcommand.XI_ESTIMATE: cmd_xi_estimate,
    Subcommand.MU0_ESTIMATE: cmd_mu0_estimate,
    Subcommand.COVARIANCE_CHECK: cmd_covariance_check,
    Subcommand.MARKOV_TEST: cmd_markov_test,
    Subcommand.CLE4_COUPLING: cmd_cle4_coupling,
    Subcommand.ODE_CHECK: cmd_ode_check,
    Subcommand.BESSEL_CHECK: cmd_bessel_check,
    Subcommand.STABLE_SCALING: cmd_stable_scaling,
    Subcommand.UNIQUENESS_CHECK: cmd_uniqueness_check,
}


def execute(config: RunConfig) -> RunManifest:
    """Run one subcommand end to end and write its manifest."""
    started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    started = time.perf_counter()
    writer = ArtifactWriter(config.output_dir, config.export_csv, config.export_json, config.export_svg)
    clock = StageClock()

    logger.info("=" * 60)
    logger.info(f"🚀 {config.subcommand.value}  kappa={config.kappa:g}  seeds={config.seeds}")
    logger.info("=" * 60)
    try:
        result = COMMANDS[config.subcommand](config, writer, clock)
    except ParameterDomainError as exc:
        # Before any artifact: a bad request (exit 2). After: the run broke (exit 4).
        if writer.written:
            raise RunAborted(config.subcommand.value, len(writer.written), exc) from exc
        raise

    manifest = RunManifest(
        config=config.model_dump(mode="json"),
        params=result.params,
        started_at=started_at,
        wall_clock_seconds=time.perf_counter() - started,
        stage_timings=clock.timings,
        assertions=result.assertions,
        passed=all(result.assertions.values()),
        checksums=writer.checksums(),
        warnings=result.warnings,
    )
    writer.manifest(manifest)

    logger.info("=" * 60)
    for name, ok in sorted(result.assertions.items()):
        logger.info(f"  {'✅' if ok else '❌'} {name}")
    for warning in result.warnings:
        logger.warning(f"  ⚠️ {warning}")
    logger.info(f"{'✅ PASSED' if manifest.passed else '❌ FAILED'} in {manifest.wall_clock_seconds:.1f}s")
    logger.info("=" * 60)
    return manifest

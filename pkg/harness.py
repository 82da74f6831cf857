"""
harness.py — Scenario orchestration: turns a ScenarioConfig into numeric objects,
runs trials, counts errors, sweeps parameter grids, compares AD-CPS with the CUSUM
baseline and writes tidy result tables.

Random streams: trial (seed, cell, trial) → make_rng(seed, 0, cell, trial, stream);
nominal calibration run i → make_rng(seed, 1, i, stream). A run with and without
an attack under the same key sees identical noise.

Result tables (fixed columns):
  sweep        cell, trial, seed, W, sigma_wbar, sigma_a, threshold, fpe, dr, fne
  compare      trial, seed, detector, fpe, dr, fne, calibrated, parameter
  fne-surface  sigma_w, t, epsilon, exponent, bound, vacuous
  detect       t, test_norm, threshold, flag, mode, attacked
  simulate     t, x_1..x_d, u_1..u_m, y_1..y_p
  honesty      trial, seed, fpe_clean, fpe_intermittent, nominal_steps, dishonest_steps
"""

import asyncio
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from attack_models import (
    AttackKind,
    AttackSchedule,
    AttackTrace,
    DeceptionParams,
    NO_ATTACK,
    ReplayAttack,
    apply_attack,
    generate_deception,
    generate_intermittent,
    honesty_flags,
    load_trace,
    no_attack,
    synthesize_assumption2_attack,
)
from config import K_CALIBRATION_SAMPLES, MAX_WORKERS
from cusum import CusumConfig, calibrate_cusum, run_cusum
from detector import (
    ADCPSDetector,
    CalibrationResult,
    DetectionRecord,
    DetectorConfig,
    FPEBound,
    KMode,
    Mode,
    calibrate_k,
    calibrate_kappa,
    empirical_fpe,
    first_decision_time,
    fne_bound,
    fpe_bound,
    full_state_config,
    records_from_norms,
    residual_config,
    residual_test_norms,
    state_test_norms,
    zeta_envelopes,
    zeta_threshold,
)
from errors import ConfigurationError, LabError
from estimator import KalmanDesign, lqr_gain, simulate_lqg, solve_dare
from schemas import ScenarioConfig
from system_sim import (
    ATTACK_STREAM,
    CALIBRATION_STREAM,
    PROCESS_STREAM,
    AnalysisConstants,
    ClosedLoop,
    NoiseModel,
    StabilityCertificate,
    SystemModel,
    analysis_constants,
    asymptotic_state_cov,
    make_closed_loop,
    make_rng,
    martingale_samples,
    simulate,
    stability_certificate,
    state_cov_bound,
)

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["cell", "trial", "seed", "W", "sigma_wbar", "sigma_a", "threshold", "fpe", "dr", "fne"]
COMPARE_COLUMNS = ["trial", "seed", "detector", "fpe", "dr", "fne", "calibrated", "parameter"]
SURFACE_COLUMNS = ["sigma_w", "t", "epsilon", "exponent", "bound", "vacuous"]
DETECT_COLUMNS = ["t", "test_norm", "threshold", "flag", "mode", "attacked"]
HONESTY_COLUMNS = ["trial", "seed", "fpe_clean", "fpe_intermittent", "nominal_steps", "dishonest_steps"]


def trial_key(seed: int, cell: int, trial: int) -> tuple[int, ...]:
    return (seed, 0, cell, trial)


def calibration_key(seed: int, run: int) -> tuple[int, ...]:
    return (seed, 1, run)


# ── Scenario assembly ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Scenario:
    cfg: ScenarioConfig
    sys: SystemModel
    loop: ClosedLoop
    noise: NoiseModel
    measurement_noise: NoiseModel
    constants: AnalysisConstants
    design: KalmanDesign | None
    k: float

    @property
    def mode(self) -> Mode:
        return Mode(self.cfg.detector.mode)

    @property
    def T(self) -> int:
        return self.cfg.run.T

    @property
    def n_measurements(self) -> int:
        # full-state observes x_0..x_T; the observed loop measures y_0..y_{T-1}
        return self.T + 1 if self.mode is Mode.FULL_STATE else self.T


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    A = np.asarray(cfg.system.A, dtype=float)
    B = np.asarray(cfg.system.B, dtype=float)
    d = A.shape[0]
    C = np.eye(d) if cfg.system.C is None else np.asarray(cfg.system.C, dtype=float)
    if cfg.system.K is None:
        K = lqr_gain(A, B, cfg.system.lqr_state_cost, cfg.system.lqr_input_cost)
    else:
        K = np.asarray(cfg.system.K, dtype=float)
    sys = SystemModel(A, B, C, K)
    loop = make_closed_loop(sys)
    if not loop.schur_stable:
        log.warning("Closed loop is not Schur stable (spectral radius %.4f)", loop.spectral_radius)

    noise = NoiseModel.isotropic(sys.d, cfg.noise.sigma_w, cfg.noise.kind)
    measurement_noise = NoiseModel.isotropic(sys.p, cfg.noise.sigma_wbar, cfg.noise.measurement_kind)
    constants = analysis_constants(loop.A_K, cfg.noise.sigma_w)

    design = None
    if cfg.detector.mode == Mode.RESIDUAL.value:
        design = solve_dare(A, C, noise.covariance, measurement_noise.covariance)

    if KMode(cfg.detector.k_mode) is KMode.CALIBRATED:
        rng = make_rng(cfg.run.seed, CALIBRATION_STREAM)
        dbar = martingale_samples(loop.A_K, noise, K_CALIBRATION_SAMPLES, rng).d_bar
        k = calibrate_k(np.linalg.norm(dbar, axis=1), constants.sigma_bar, sys.d, cfg.detector.delta)
        log.info("Calibrated concentration constant k = %.4f", k)
    else:
        k = cfg.detector.k

    return Scenario(cfg, sys, loop, noise, measurement_noise, constants, design, k)


def detector_config(scn: Scenario, kappa: float = 1.0, W: int | None = None) -> DetectorConfig:
    delta = scn.cfg.detector.delta
    if scn.mode is Mode.FULL_STATE:
        return full_state_config(scn.constants, scn.sys.d, delta, scn.k, kappa)
    return residual_config(scn.constants, scn.design.Sigma_r, W or scn.cfg.detector.W, delta, scn.k, kappa)


def attack_schedule(cfg: ScenarioConfig) -> AttackSchedule:
    if cfg.attack.kind == AttackKind.NONE.value:
        return NO_ATTACK
    return AttackSchedule(cfg.attack.t_start, cfg.attack.t_stop)


def zeta_bars(scn: Scenario, n: int) -> np.ndarray:
    """ζ̄_t for t = 0..n-1 (entries below t = 2 are zero)."""
    cfg = scn.cfg
    alpha = detector_config(scn).alpha
    sigma_x = state_cov_bound(scn.loop.A_K, cfg.noise.sigma0, cfg.noise.sigma_w, n)
    bars = np.zeros(n)
    for t in range(2, n):
        bars[t] = zeta_threshold(scn.constants, sigma_x, cfg.detector.delta, scn.k,
                                 cfg.noise.sigma_w, scn.sys.d, t, alpha)
    return bars


def make_attack(scn: Scenario, key: tuple[int, ...], n: int):
    """AttackTrace, ReplayAttack or None for the configured attack kind."""
    spec = scn.cfg.attack
    kind = AttackKind(spec.kind)
    if kind is AttackKind.NONE:
        return None
    schedule = attack_schedule(scn.cfg)
    schedule.check_horizon(n)
    p = scn.sys.p
    rng = make_rng(*key, ATTACK_STREAM)

    if kind in (AttackKind.DECEPTION, AttackKind.INTERMITTENT):
        A_a = spec.ar_gain * np.eye(p) if spec.A_a is None else spec.A_a
        params = DeceptionParams(A_a, spec.sigma_a * np.eye(p), spec.sigma_a)
        if kind is AttackKind.DECEPTION:
            return generate_deception(params, schedule, n, rng)
        return generate_intermittent(params, schedule, n, rng, spec.burst_on, spec.burst_off)
    if kind is AttackKind.REPLAY:
        return ReplayAttack(schedule, spec.lag)
    if kind in (AttackKind.REPLAY_FILE, AttackKind.CUSTOM_SEQUENCE):
        return load_trace(spec.file, schedule, n, p, kind)
    direction = np.ones(p) if spec.direction is None else spec.direction
    return synthesize_assumption2_attack(direction, schedule, n, scn.loop.A_K, zeta_bars(scn, n), spec.margin)


# ── Single trials ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrialData:
    norms: np.ndarray              # ‖T_t‖ for t = t0, t0 + 1, ...
    t0: int
    trace: AttackTrace
    outputs: np.ndarray            # honest outputs
    measurements: np.ndarray       # z = y + v
    residuals: np.ndarray | None   # observed loop only
    states: np.ndarray
    inputs: np.ndarray


def run_trial(scn: Scenario, key: tuple[int, ...], W: int | None = None, attacked: bool = True) -> TrialData:
    """Simulate one run under `key`, inject the configured attack (unless attacked=False), compute ‖T_t‖."""
    cfg = scn.cfg
    n = scn.n_measurements
    attack = make_attack(scn, key, n) if attacked else None

    if scn.mode is Mode.FULL_STATE:
        traj = simulate(scn.sys, scn.noise, scn.T, make_rng(*key, PROCESS_STREAM), sigma0=cfg.noise.sigma0)
        y = traj.outputs
        if attack is None:
            trace = no_attack(n, scn.sys.p)
        elif isinstance(attack, ReplayAttack):
            v = np.stack([attack.injection(t, y) for t in range(n)])
            trace = AttackTrace(v, attack.schedule, AttackKind.REPLAY)
        else:
            trace = attack
        z = apply_attack(y, trace)
        return TrialData(norms=state_test_norms(z, scn.loop.A_K), t0=first_decision_time(scn.mode, 2),
                         trace=trace, outputs=y, measurements=z, residuals=None,
                         states=traj.states, inputs=traj.inputs)

    W = W or cfg.detector.W
    wm = cfg.cusum.watermark_sigma * np.eye(scn.sys.m) if cfg.cusum.watermark_sigma > 0 else None
    run = simulate_lqg(scn.sys, scn.design, scn.noise, scn.measurement_noise, scn.T, key,
                       attack=attack, watermark_cov=wm, sigma0=cfg.noise.sigma0)
    return TrialData(norms=residual_test_norms(run.residuals, W), t0=first_decision_time(scn.mode, W),
                     trace=run.attack, outputs=run.outputs, measurements=run.measurements,
                     residuals=run.residuals, states=run.states, inputs=run.inputs)


def nominal_runs(scn: Scenario, W: int | None = None) -> list[TrialData]:
    """Attack-free calibration runs on their own random streams."""
    return [
        run_trial(scn, calibration_key(scn.cfg.run.seed, i), W, attacked=False)
        for i in range(scn.cfg.run.calibration_runs)
    ]


def stream_records(scn: Scenario, det: DetectorConfig, data: TrialData) -> list[DetectionRecord]:
    """Replay a trial through the online detector, one sample per step."""
    online = ADCPSDetector(det, scn.mode, scn.loop.A_K)
    stream = data.measurements if scn.mode is Mode.FULL_STATE else data.residuals
    records = (online.update(sample) for sample in stream)
    return [r for r in records if r is not None]


# ── Metrics ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Metrics:
    fpe: float | None
    dr: float | None
    fne: float | None


def compute_metrics(records, schedule: AttackSchedule, T: int) -> Metrics:
    """
    fpe = alarms outside [T1, T2) / (T − Δ);  dr = alarms inside / Δ;  fne = 1 − dr.
    Any record with .t and .flag is accepted. dr and fne are None when Δ = 0.
    """
    delta = schedule.delta
    inside = outside = 0
    for r in records:
        if r.flag:
            if schedule.active(r.t):
                inside += 1
            else:
                outside += 1
    fpe = outside / (T - delta) if T > delta else None
    if delta == 0:
        return Metrics(fpe=fpe, dr=None, fne=None)
    dr = inside / delta
    return Metrics(fpe=fpe, dr=dr, fne=1.0 - dr)


@dataclass(frozen=True)
class ScenarioResult:
    records: list[DetectionRecord]
    fpe_hat: float | None
    dr_hat: float | None
    fne_hat: float | None
    bound_fpe: float | None
    bound_fne: float | None
    runtime: float
    threshold: float
    kappa: float
    trace: AttackTrace
    cusum_records: list | None = None
    cusum_metrics: Metrics | None = None
    cusum_h: float | None = None


def select_kappa(scn: Scenario, W: int | None = None,
                 nominal: list[TrialData] | None = None) -> tuple[float, CalibrationResult | None]:
    """Configured κ, or the smallest grid κ meeting target_fpe on nominal runs."""
    spec = scn.cfg.detector
    if spec.kappa is not None:
        return spec.kappa, None
    nominal = nominal if nominal is not None else nominal_runs(scn, W)
    alpha = detector_config(scn, 1.0, W).alpha
    result = calibrate_kappa([r.norms for r in nominal], alpha, spec.target_fpe, spec.kappa_grid)
    if result.ok:
        return result.selected, result
    if result.selected is not None:
        return result.selected, result
    kappa = max(spec.kappa_grid)
    log.warning("Falling back to the largest kappa on the grid (%.2f)", kappa)
    return kappa, result


def select_cusum(scn: Scenario, nominal: list[TrialData]) -> tuple[CusumConfig | None, CalibrationResult | None]:
    spec = scn.cfg.cusum
    base = CusumConfig(h=spec.h or 1.0, nu=spec.nu, statistic=spec.statistic,
                       reset_on_alarm=spec.reset_on_alarm)
    if spec.h is not None:
        return base, None
    result = calibrate_cusum([r.residuals for r in nominal], scn.design.Sigma_r, spec.target_fpe, base=base)
    return (result.config if result.ok else None), result


def theory_bounds(scn: Scenario) -> tuple[float | None, float | None]:
    """Error bounds at t = T for the full-state test; None in residual mode or when unavailable."""
    if scn.mode is not Mode.FULL_STATE:
        return None, None
    cfg = scn.cfg
    cert = stability_certificate(scn.loop.A_K, scn.noise.covariance)
    fpe = fpe_bound(cert, scn.constants, cfg.detector.delta, scn.k, cfg.noise.sigma_w, scn.sys.d, 0.0, scn.T)
    sigma_x = state_cov_bound(scn.loop.A_K, cfg.noise.sigma0, cfg.noise.sigma_w, scn.T)
    fne = fne_bound(scn.constants, sigma_x, cfg.detector.delta, scn.k, cfg.noise.sigma_w, scn.T)
    return (fpe.value if isinstance(fpe, FPEBound) else None), fne.bound


def run_scenario(cfg: ScenarioConfig, trial: int = 0, seed: int | None = None) -> ScenarioResult:
    """Simulate, attack, filter if observed, detect with AD-CPS (and CUSUM in residual mode)."""
    start = time.perf_counter()
    seed = cfg.run.seed if seed is None else seed
    try:
        scn = build_scenario(cfg)
        W = cfg.detector.W
        need_nominal = cfg.detector.kappa is None or (
            scn.mode is Mode.RESIDUAL and cfg.cusum.enabled and cfg.cusum.h is None
        )
        nominal = nominal_runs(scn, W) if need_nominal else []
        kappa, _ = select_kappa(scn, W, nominal)
        det = detector_config(scn, kappa, W)

        data = run_trial(scn, trial_key(seed, 0, trial), W)
        records = stream_records(scn, det, data)
        metrics = compute_metrics(records, data.trace.schedule, scn.T)
        bound_fpe, bound_fne = theory_bounds(scn)

        cusum_records = cusum_metrics = cusum_h = None
        if scn.mode is Mode.RESIDUAL and cfg.cusum.enabled:
            ccfg, _ = select_cusum(scn, nominal)
            if ccfg is not None:
                cusum_records = run_cusum(ccfg, data.residuals, scn.design.Sigma_r)
                cusum_metrics = compute_metrics(cusum_records, data.trace.schedule, scn.T)
                cusum_h = ccfg.h
    except LabError as exc:
        exc.add_note(f"scenario: mode={cfg.detector.mode} attack={cfg.attack.kind} seed={seed} trial={trial}")
        raise

    runtime = time.perf_counter() - start
    log.info("Scenario done in %.2fs: FPE %s, DR %s", runtime, metrics.fpe, metrics.dr)
    return ScenarioResult(
        records=records, fpe_hat=metrics.fpe, dr_hat=metrics.dr, fne_hat=metrics.fne,
        bound_fpe=bound_fpe, bound_fne=bound_fne, runtime=runtime, threshold=det.threshold,
        kappa=kappa, trace=data.trace, cusum_records=cusum_records,
        cusum_metrics=cusum_metrics, cusum_h=cusum_h,
    )


# ── Sweeps ────────────────────────────────────────────────────────────────────

def _nan(x: float | None) -> float:
    return float("nan") if x is None else float(x)


def _sweep_cell(cfg: ScenarioConfig, base_cell: int, W: int, sigma_wbar: float, sigma_a: float,
                trials: int, thresholds: list[float]) -> list[dict]:
    cell_cfg = cfg.with_updates(noise={"sigma_wbar": sigma_wbar}, attack={"sigma_a": sigma_a},
                                detector={"W": W})
    scn = build_scenario(cell_cfg)
    schedule = attack_schedule(cell_cfg)
    rows = []
    for trial in range(trials):
        data = run_trial(scn, trial_key(cfg.run.seed, base_cell, trial), W)
        for j, threshold in enumerate(thresholds):
            records = records_from_norms(data.norms, threshold, data.t0, scn.mode)
            m = compute_metrics(records, schedule, scn.T)
            rows.append({
                "cell": base_cell * len(thresholds) + j, "trial": trial, "seed": cfg.run.seed,
                "W": W, "sigma_wbar": sigma_wbar, "sigma_a": sigma_a, "threshold": threshold,
                "fpe": _nan(m.fpe), "dr": _nan(m.dr), "fne": _nan(m.fne),
            })
    return rows


def sweep(
    cfg: ScenarioConfig,
    thresholds=None,
    sigma_wbar=None,
    sigma_a=None,
    windows=None,
    trials: int | None = None,
    max_workers: int = MAX_WORKERS,
) -> pd.DataFrame:
    """
    One row per (threshold, W, σ_w̄, σ_a) cell per trial. Axes left as None
    collapse to the config's single value. The threshold axis reuses each
    run's test norms, so FPE and FNE along it come from identical data.
    """
    thresholds = list(cfg.sweep.thresholds if thresholds is None else thresholds)
    sigma_wbar = list([cfg.noise.sigma_wbar] if sigma_wbar is None else sigma_wbar)
    sigma_a = list([cfg.attack.sigma_a] if sigma_a is None else sigma_a)
    windows = list([cfg.detector.W] if windows is None else windows)
    trials = trials or cfg.run.trials
    if not (thresholds and sigma_wbar and sigma_a and windows):
        raise ConfigurationError("every sweep axis needs at least one value")

    cells = list(itertools.product(windows, sigma_wbar, sigma_a))
    log.info("Sweeping %d cells x %d thresholds x %d trials", len(cells), len(thresholds), trials)

    async def gather() -> list[list[dict]]:
        sem = asyncio.Semaphore(max(1, max_workers))

        async def one(idx: int, W: int, swb: float, sa: float) -> list[dict]:
            async with sem:
                return await asyncio.to_thread(_sweep_cell, cfg, idx, W, swb, sa, trials, thresholds)

        return await asyncio.gather(*(one(i, *cell) for i, cell in enumerate(cells)))

    rows = [row for chunk in asyncio.run(gather()) for row in chunk]
    df = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    return df.sort_values(["cell", "trial"], kind="stable").reset_index(drop=True)


def summarize(df: pd.DataFrame, by, metrics=("fpe", "dr", "fne")) -> pd.DataFrame:
    """Mean and standard error of each metric per group (columns <metric>_mean, <metric>_se)."""
    by = [by] if isinstance(by, str) else list(by)
    metrics = [m for m in metrics if m in df.columns]
    agg = df.groupby(by, sort=True)[metrics].agg(["mean", "sem", "count"])
    agg.columns = [f"{m}_{'se' if s == 'sem' else s}" for m, s in agg.columns]
    return agg.reset_index()


# ── Theory surfaces and reports ───────────────────────────────────────────────

def fne_surface(cfg: ScenarioConfig, sigma_w_grid=None, times=None) -> pd.DataFrame:
    """False-negative exponent log(ε²/(kσ_wM̄)) over σ_w × t for the configured closed loop."""
    sigma_w_grid = list(cfg.sweep.fne_sigma_w if sigma_w_grid is None else sigma_w_grid)
    times = sorted(cfg.sweep.fne_times if times is None else times)
    if min(times) < 2:
        raise ConfigurationError("the false-negative surface starts at t = 2")
    scn = build_scenario(cfg.with_updates(detector={"mode": "full-state"}))
    delta = cfg.detector.delta
    rows = []
    for sigma_w in sigma_w_grid:
        constants = analysis_constants(scn.loop.A_K, sigma_w)
        sigma_x = state_cov_bound(scn.loop.A_K, cfg.noise.sigma0, sigma_w, max(times))
        for t in times:
            b = fne_bound(constants, sigma_x, delta, scn.k, sigma_w, t)
            rows.append({"sigma_w": sigma_w, "t": t, "epsilon": b.epsilon, "exponent": b.exponent,
                         "bound": b.bound, "vacuous": b.vacuous})
    if all(r["vacuous"] for r in rows):
        log.warning("Every point of the false-negative surface is vacuous (bound >= 1)")
    return pd.DataFrame(rows, columns=SURFACE_COLUMNS)


def bounds_report(cfg: ScenarioConfig) -> dict:
    """Constants, certificate, threshold and both error bounds for the full-state test at t = T."""
    scn = build_scenario(cfg.with_updates(detector={"mode": "full-state"}))
    c = scn.constants
    A_K = scn.loop.A_K
    T = cfg.run.T
    delta, sigma_w, d = cfg.detector.delta, cfg.noise.sigma_w, scn.sys.d
    det = detector_config(scn, cfg.detector.kappa or 1.0)
    cert = stability_certificate(A_K, scn.noise.covariance)
    sigma_x = state_cov_bound(A_K, cfg.noise.sigma0, sigma_w, T)

    report = {
        "closed_loop": {"norm": scn.loop.norm, "spectral_radius": scn.loop.spectral_radius},
        "constants": {"M": c.M, "M_bar": c.M_bar, "sigma_dt": c.sigma_dt, "sigma_bar": c.sigma_bar,
                      "h_bar": c.h_bar, "norm_Acl": c.norm_Acl},
        "k": scn.k,
        "alpha": det.alpha,
        "threshold": det.threshold,
    }
    if isinstance(cert, StabilityCertificate):
        report["certificate"] = {"gamma": cert.gamma, "K_radius": cert.K_radius, "beta": cert.beta}
    else:
        report["certificate"] = {"unavailable": cert.reason, "lambda_max": cert.lambda_max}

    fpe = fpe_bound(cert, c, delta, scn.k, sigma_w, d, 0.0, T)
    report["fpe_bound"] = (
        {"value": fpe.value, "simplified": fpe.simplified, "vacuous": fpe.vacuous}
        if isinstance(fpe, FPEBound) else {"unavailable": fpe.reason}
    )
    zeta = zeta_threshold(c, sigma_x, delta, scn.k, sigma_w, d, T, det.alpha)
    env = zeta_envelopes(c, cfg.noise.sigma0, float(sigma_x.max()), delta, scn.k, sigma_w, d, det.alpha)
    report["zeta_bar"] = {"t": T, "value": zeta, "lower": env.lower, "upper": env.upper,
                          "sigma_x_sup": float(sigma_x.max()),
                          "sigma_x_asymptotic": asymptotic_state_cov(A_K, sigma_w)}
    fne = fne_bound(c, sigma_x, delta, scn.k, sigma_w, T)
    report["fne_bound"] = {"t": T, "epsilon": fne.epsilon, "bound": fne.bound, "vacuous": fne.vacuous}
    return report


# ── Detector comparison and honesty study ─────────────────────────────────────

def trial_seeds(cfg: ScenarioConfig, trials: int | None = None) -> list[int]:
    trials = trials or cfg.run.trials
    seeds = list(cfg.run.trial_seeds[:trials])
    nxt = max(seeds, default=cfg.run.seed) + 1
    while len(seeds) < trials:
        seeds.append(nxt)
        nxt += 1
    return seeds


def compare_detectors(cfg: ScenarioConfig, trials: int | None = None) -> pd.DataFrame:
    """
    AD-CPS and CUSUM, each calibrated on the same nominal runs, scored on
    identical attacked trials (one row per detector per trial seed).
    """
    if cfg.detector.mode != Mode.RESIDUAL.value:
        raise ConfigurationError("the detector comparison runs on the residual stream (mode = residual)")
    scn = build_scenario(cfg)
    W = cfg.detector.W
    nominal = nominal_runs(scn, W)

    kappa, kres = select_kappa(scn, W, nominal)
    ad_ok = kres is None or kres.ok
    det = detector_config(scn, kappa, W)
    ccfg, cres = select_cusum(scn, nominal)

    rows = []
    for i, seed in enumerate(trial_seeds(cfg, trials)):
        data = run_trial(scn, trial_key(seed, 0, 0), W)
        schedule = data.trace.schedule

        ad = compute_metrics(records_from_norms(data.norms, det.threshold, data.t0, scn.mode), schedule, scn.T)
        if not ad_ok:
            ad = Metrics(None, None, None)
        rows.append({"trial": i, "seed": seed, "detector": "AD-CPS", "fpe": _nan(ad.fpe), "dr": _nan(ad.dr),
                     "fne": _nan(ad.fne), "calibrated": ad_ok, "parameter": kappa})

        if ccfg is not None:
            cm = compute_metrics(run_cusum(ccfg, data.residuals, scn.design.Sigma_r), schedule, scn.T)
            h = ccfg.h
        else:
            cm, h = Metrics(None, None, None), float("nan")
        rows.append({"trial": i, "seed": seed, "detector": "CUSUM", "fpe": _nan(cm.fpe), "dr": _nan(cm.dr),
                     "fne": _nan(cm.fne), "calibrated": ccfg is not None, "parameter": h})
    return pd.DataFrame(rows, columns=COMPARE_COLUMNS)


def honesty_violation(cfg: ScenarioConfig, trials: int = 50, sigma_a: float | None = None) -> pd.DataFrame:
    """
    False-positive rate on attack-free steps with and without intermittent
    bursts that break W-step honesty, on identical noise per trial.
    """
    if cfg.attack.kind == AttackKind.NONE.value:
        raise ConfigurationError("the honesty study needs an attack window")
    updates = {"kind": AttackKind.INTERMITTENT.value}
    if sigma_a is not None:
        updates["sigma_a"] = sigma_a
    cfg = cfg.with_updates(attack=updates)
    scn = build_scenario(cfg)
    W = cfg.detector.W
    kappa, _ = select_kappa(scn, W)
    threshold = detector_config(scn, kappa, W).threshold
    honesty_window = 2 if scn.mode is Mode.FULL_STATE else W

    rows = []
    for trial in range(trials):
        key = trial_key(cfg.run.seed, 0, trial)
        clean = run_trial(scn, key, W, attacked=False)
        burst = run_trial(scn, key, W)
        t = np.arange(burst.t0, burst.t0 + burst.norms.shape[0])
        quiet = ~np.any(burst.trace.v[t] != 0.0, axis=1)

        honest = np.ones(burst.trace.length, dtype=bool)
        honest[honesty_window:] = honesty_flags(burst.trace, honesty_window)
        dishonest = int(np.sum(quiet & ~honest[t]))

        rows.append({
            "trial": trial, "seed": cfg.run.seed,
            "fpe_clean": empirical_fpe([clean.norms[quiet]], threshold),
            "fpe_intermittent": empirical_fpe([burst.norms[quiet]], threshold),
            "nominal_steps": int(quiet.sum()), "dishonest_steps": dishonest,
        })
    return pd.DataFrame(rows, columns=HONESTY_COLUMNS)


# ── Tables and persistence ────────────────────────────────────────────────────

def detect_table(result: ScenarioResult) -> pd.DataFrame:
    rows = [
        {"t": r.t, "test_norm": r.test_norm, "threshold": r.threshold, "flag": r.flag,
         "mode": r.mode.value, "attacked": bool(np.any(result.trace.v[r.t] != 0.0))}
        for r in result.records
    ]
    return pd.DataFrame(rows, columns=DETECT_COLUMNS)


def simulate_table(scn: Scenario, data: TrialData) -> pd.DataFrame:
    """One row per time step; inputs and outputs are NaN where they are not defined."""
    n = data.states.shape[0]
    cols = {"t": np.arange(n)}

    def pad(arr: np.ndarray) -> np.ndarray:
        out = np.full((n, arr.shape[1]), np.nan)
        out[: arr.shape[0]] = arr
        return out

    for name, arr in (("x", data.states), ("u", pad(data.inputs)), ("y", pad(data.measurements))):
        for i in range(arr.shape[1]):
            cols[f"{name}_{i + 1}"] = arr[:, i]
    return pd.DataFrame(cols)


def json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_table(df: pd.DataFrame, out_dir: str, name: str, fmt: str = "csv",
                summary: dict | None = None) -> str:
    """Write df as <name>.csv or <name>.json, plus <name>_summary.json when a summary is given."""
    os.makedirs(out_dir, exist_ok=True)
    if fmt == "csv":
        path = os.path.join(out_dir, f"{name}.csv")
        df.to_csv(path, index=False)
    elif fmt == "json":
        path = os.path.join(out_dir, f"{name}.json")
        df.to_json(path, orient="records", indent=2, double_precision=15)
    else:
        raise ConfigurationError(f"unknown output format {fmt!r}")
    if summary is not None:
        with open(os.path.join(out_dir, f"{name}_summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, default=json_default, allow_nan=True)
    log.info("Wrote %s (%d rows)", path, len(df))
    return path


def write_json(obj: dict, out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{name}.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, default=json_default)
    return path

"""
cli.py — Command-line entry point for the detection lab.

    python cli.py <command> [--config FILE] [--seed N] [--trials N] [--out DIR] [--format csv|json]

Commands: simulate, calibrate, detect, sweep-fpe, sweep-fne, tradeoff,
honesty-violation, compare, fne-surface, bounds.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import json
import logging
import sys

import pandas as pd

from config import DEFAULT_CONFIG, LOG_LEVEL, OUTPUT_DIR
from cusum import alarm_rates
from detector import Mode, calibrate_kappa
from errors import EXIT_OK, LabError
from harness import (
    bounds_report,
    build_scenario,
    compare_detectors,
    detect_table,
    detector_config,
    fne_surface,
    honesty_violation,
    json_default,
    nominal_runs,
    run_scenario,
    run_trial,
    select_cusum,
    simulate_table,
    summarize,
    sweep,
    trial_key,
    write_json,
    write_table,
)
from schemas import ScenarioConfig, load_config

log = logging.getLogger("cli")


# ── Commands ──────────────────────────────────────────────────────────────────

def cmd_simulate(cfg: ScenarioConfig, args) -> None:
    scn = build_scenario(cfg)
    data = run_trial(scn, trial_key(cfg.run.seed, 0, 0))
    df = simulate_table(scn, data)
    path = write_table(df, args.out, "simulate", args.format)
    print(f"Simulated {cfg.run.T} steps ({cfg.detector.mode}) → {path}")


def cmd_calibrate(cfg: ScenarioConfig, args) -> None:
    scn = build_scenario(cfg)
    W = cfg.detector.W
    nominal = nominal_runs(scn, W)
    alpha = detector_config(scn, 1.0, W).alpha
    kres = calibrate_kappa([r.norms for r in nominal], alpha, cfg.detector.target_fpe, cfg.detector.kappa_grid)
    frames = [pd.DataFrame(kres.curve, columns=["parameter", "fpe"]).assign(detector="AD-CPS")]
    summary = {"alpha": alpha, "kappa": kres.selected, "kappa_ok": kres.ok}

    if scn.mode is Mode.RESIDUAL and cfg.cusum.enabled:
        ccfg, cres = select_cusum(scn, nominal)
        if cres is None:
            rate = float(alarm_rates([r.residuals for r in nominal], scn.design.Sigma_r, [ccfg.h],
                                     ccfg.nu, ccfg.statistic, ccfg.reset_on_alarm)[0])
            frames.append(pd.DataFrame({"parameter": [ccfg.h], "fpe": [rate], "detector": ["CUSUM"]}))
            summary.update({"cusum_h": ccfg.h, "cusum_ok": True})
        else:
            frames.append(pd.DataFrame(cres.curve, columns=["parameter", "fpe"]).assign(detector="CUSUM"))
            summary.update({"cusum_h": cres.selected, "cusum_ok": cres.ok})

    df = pd.concat(frames, ignore_index=True)[["detector", "parameter", "fpe"]]
    path = write_table(df, args.out, "calibrate", args.format, summary)
    print(f"kappa* = {summary['kappa']}  (alpha = {alpha:.6g})")
    if "cusum_h" in summary:
        print(f"CUSUM h* = {summary['cusum_h']}")
    print(f"Calibration curves → {path}")


def cmd_detect(cfg: ScenarioConfig, args) -> None:
    result = run_scenario(cfg)
    summary = {
        "fpe": result.fpe_hat, "dr": result.dr_hat, "fne": result.fne_hat,
        "bound_fpe": result.bound_fpe, "bound_fne": result.bound_fne,
        "kappa": result.kappa, "threshold": result.threshold, "runtime": result.runtime,
    }
    if result.cusum_metrics is not None:
        summary["cusum"] = {"h": result.cusum_h, "fpe": result.cusum_metrics.fpe, "dr": result.cusum_metrics.dr}
    path = write_table(detect_table(result), args.out, "detect", args.format, summary)
    print(f"FPE {result.fpe_hat}  DR {result.dr_hat}  threshold {result.threshold:.6g} → {path}")


def _with_attack(cfg: ScenarioConfig) -> ScenarioConfig:
    if cfg.attack.kind == "none":
        return cfg.with_updates(attack={"kind": "deception"})
    return cfg


def cmd_sweep_fpe(cfg: ScenarioConfig, args) -> None:
    cfg = cfg.with_updates(attack={"kind": "none"})
    df = sweep(cfg, sigma_wbar=cfg.sweep.sigma_wbar, windows=cfg.sweep.windows, trials=args.trials)
    _write_sweep(df, args, "sweep_fpe", ["W", "sigma_wbar", "threshold"])


def cmd_sweep_fne(cfg: ScenarioConfig, args) -> None:
    cfg = _with_attack(cfg)
    df = sweep(cfg, sigma_wbar=cfg.sweep.sigma_wbar, sigma_a=cfg.sweep.sigma_a, trials=args.trials)
    _write_sweep(df, args, "sweep_fne", ["sigma_wbar", "sigma_a", "threshold"])


def cmd_tradeoff(cfg: ScenarioConfig, args) -> None:
    cfg = _with_attack(cfg)
    df = sweep(cfg, sigma_a=cfg.sweep.sigma_a, windows=cfg.sweep.windows, trials=args.trials)
    _write_sweep(df, args, "tradeoff", ["W", "sigma_a", "threshold"])


def _write_sweep(df: pd.DataFrame, args, name: str, by: list[str]) -> None:
    path = write_table(df, args.out, name, args.format)
    agg = summarize(df, by)
    write_table(agg, args.out, f"{name}_mean", args.format)
    print(agg.to_string(index=False, float_format=lambda x: f"{x:.4f}"))
    print(f"\n{len(df)} rows → {path}")


def cmd_honesty(cfg: ScenarioConfig, args) -> None:
    df = honesty_violation(cfg, trials=args.trials or 50, sigma_a=args.sigma_a)
    summary = {
        "fpe_clean_mean": float(df["fpe_clean"].mean()),
        "fpe_intermittent_mean": float(df["fpe_intermittent"].mean()),
        "trials": len(df),
    }
    path = write_table(df, args.out, "honesty_violation", args.format, summary)
    print(f"Nominal-step FPE: clean {summary['fpe_clean_mean']:.4f}, "
          f"with bursts {summary['fpe_intermittent_mean']:.4f} → {path}")


def cmd_compare(cfg: ScenarioConfig, args) -> None:
    df = compare_detectors(cfg, trials=args.trials)
    path = write_table(df, args.out, "compare", args.format)
    print(df.to_string(index=False, float_format=lambda x: f"{x:.4f}"))
    print(f"\n→ {path}")


def cmd_fne_surface(cfg: ScenarioConfig, args) -> None:
    df = fne_surface(cfg)
    path = write_table(df, args.out, "fne_surface", args.format)
    print(f"{len(df)} surface points ({int(df['vacuous'].sum())} vacuous) → {path}")


def cmd_bounds(cfg: ScenarioConfig, args) -> None:
    report = bounds_report(cfg)
    print(json.dumps(report, indent=2, default=json_default))
    write_json(report, args.out, "bounds")


COMMANDS = {
    "simulate": (cmd_simulate, "simulate one run and write states, inputs and measurements"),
    "calibrate": (cmd_calibrate, "tune kappa (and the CUSUM threshold) on nominal runs"),
    "detect": (cmd_detect, "run one scenario and write the detection records"),
    "sweep-fpe": (cmd_sweep_fpe, "false-positive rate over thresholds, windows and measurement noise"),
    "sweep-fne": (cmd_sweep_fne, "false-negative rate over thresholds, measurement noise and attack noise"),
    "tradeoff": (cmd_tradeoff, "FPE and FNE together over thresholds, attack noise and windows"),
    "honesty-violation": (cmd_honesty, "nominal-step FPE with intermittent attacks"),
    "compare": (cmd_compare, "AD-CPS against the CUSUM baseline on identical trials"),
    "fne-surface": (cmd_fne_surface, "false-negative exponent over noise level and time"),
    "bounds": (cmd_bounds, "print constants, certificate and both error bounds"),
}


# ── Entry point ───────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG, help="scenario JSON file")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--trials", type=int, default=None, help="number of trials")
    common.add_argument("--out", default=OUTPUT_DIR, help="output directory")
    common.add_argument("--format", choices=["csv", "json"], default="csv")
    common.add_argument("--log-level", default=LOG_LEVEL)

    parser = argparse.ArgumentParser(description="False-data-injection detection lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "honesty-violation":
            p.add_argument("--sigma-a", type=float, default=None,
                           help="burst attack noise level (default: the config attack sigma_a)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        run = {}
        if args.seed is not None:
            run["seed"] = args.seed
        if args.trials is not None:
            run["trials"] = args.trials
        if run:
            cfg = cfg.with_updates(run=run)
        COMMANDS[args.command][0](cfg, args)
    except LabError as exc:
        log.error("%s failed: %s", args.command, exc)
        for note in getattr(exc, "__notes__", []):
            log.error("  %s", note)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

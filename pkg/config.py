"""
config.py — Central configuration for the false-data-injection detection lab.
All defaults, grids, tolerances and paths live here.
"""

import os

from dotenv import load_dotenv

# ── Paths ─────────────────────────────────────────────────────────────────────
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
load_dotenv(os.path.join(PROJECT_ROOT, ".env"))

OUTPUT_DIR     = os.environ.get("LAB_OUTPUT_DIR", os.path.join(PROJECT_ROOT, "results"))
CONFIG_DIR     = os.path.join(PROJECT_ROOT, "configs")
DEFAULT_CONFIG = os.path.join(CONFIG_DIR, "inverted_pendulum.json")
LOG_LEVEL      = os.environ.get("LAB_LOG_LEVEL", "INFO")

# ── Plant: inverted pendulum on a cart (sampled, 4 states, 1 input) ──────────
IP_A = [
    [1.0, 0.01,    0.00011, 0.0],
    [0.0, 0.9982,  0.0267,  0.0001],
    [0.0, 0.0,     1.0016,  0.01],
    [0.0, -0.0045, 0.3119,  1.0016],
]
IP_B = [[0.0001], [0.0182], [0.0002], [0.0454]]

# Quadratic costs for the stabilising gain (u = K x); the plant is open-loop unstable
LQR_STATE_COST = 1.0
LQR_INPUT_COST = 0.1

# ── Noise ─────────────────────────────────────────────────────────────────────
SIGMA_W    = 0.001   # process noise covariance bound, fixed across all experiments
SIGMA_WBAR = 0.01    # measurement noise covariance bound (partially observed case)
SIGMA_0    = 0.0     # initial-state covariance bound; 0 means x0 = 0
NOISE_KINDS = ["gaussian", "uniform-box", "truncated-gaussian"]
TRUNCATION_LEVEL = 3.0   # truncated-gaussian cut-off, in standard deviations

# ── Attack ────────────────────────────────────────────────────────────────────
SIGMA_A          = 0.1    # deception noise covariance bound
DECEPTION_AR_GAIN = 0.5   # A_a = gain * I
ATTACK_START     = 300
ATTACK_STOP      = 800
BURST_ON         = 5      # intermittent attacks: active steps per burst
BURST_OFF        = 25     # intermittent attacks: idle steps between bursts

# ── Detector (AD-CPS) ─────────────────────────────────────────────────────────
DELTA        = 0.01
WINDOW       = 20         # residual window; the theory suite uses W = 2
KAPPA        = 1.0
CERTIFIED_K  = 6401.0     # k = C^2 + 1 with C = 80 from the concentration proof
K_MODES      = ["certified", "calibrated"]
TARGET_FPE   = 0.02
KAPPA_GRID   = [float(f"{10 ** (i / 40 - 4):.4g}") for i in range(201)]   # 1e-4 .. 10, log-spaced
KAPPA_FLOOR_FRACTION = 0.25   # floor FPE under this share of target: grid too coarse
K_CALIBRATION_SAMPLES = 100_000

# ── CUSUM baseline ────────────────────────────────────────────────────────────
CUSUM_TARGET_FPE = 0.025
CUSUM_H_GRID     = [round(0.5 * i, 1) for i in range(1, 401)]  # 0.5 .. 200
CUSUM_STATISTICS = ["chi-square", "norm"]
WATERMARK_SIGMA  = 0.0

# ── Run ───────────────────────────────────────────────────────────────────────
HORIZON          = 1000
SEED             = int(os.environ.get("LAB_SEED", "2"))
TRIAL_SEEDS      = [2, 3, 4]   # the comparison trials
CALIBRATION_RUNS = 10          # nominal runs used for kappa / h calibration
MAX_WORKERS      = int(os.environ.get("LAB_MAX_WORKERS", str(os.cpu_count() or 1)))

# ── Sweep grids ───────────────────────────────────────────────────────────────
THRESHOLD_GRID  = [round(0.05 * i, 2) for i in range(1, 21)]   # absolute threshold 0.05 .. 1.0
SIGMA_WBAR_GRID = [0.005, 0.01, 0.05, 0.1]
SIGMA_A_GRID    = [0.001, 0.01, 0.1]
WINDOW_SET      = [5, 20]
FNE_SURFACE_SIGMA_W = [0.0005, 0.001, 0.002, 0.005, 0.01]
FNE_SURFACE_TIMES   = list(range(2, 201))

# ── Numerics ──────────────────────────────────────────────────────────────────
POWER_TOL        = 1e-12
POWER_MAX_ITER   = 10_000
DARE_TOL         = 1e-10
DARE_MAX_ITER    = 100_000
PSD_TOL          = 1e-12   # relative eigenvalue slack when checking PSD-ness

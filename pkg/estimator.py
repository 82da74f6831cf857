"""
estimator.py — Steady-state Kalman filtering and state-feedback synthesis for the
partially observed plant.

Provides:
  - solve_dare()    : filter Riccati fixed point → KalmanDesign (P, L, Σ_r)
  - filter_step()   : one predictor/innovation step, returns the residual r_t
  - lqr_gain()      : stabilising u = K x from the dual (control) Riccati iteration
  - simulate_lqg()  : plant + measurement noise + injected attack + filter +
                      certainty-equivalent control u_t = K x̂_t (+ optional watermark)
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from attack_models import AttackKind, AttackSchedule, AttackTrace
from config import DARE_MAX_ITER, DARE_TOL
from cusum import watermark_input
from errors import ConfigurationError, EstimatorDesignError, HorizonError, SynthesisError
from system_sim import (
    INITIAL_STREAM,
    MEASUREMENT_STREAM,
    MIN_HORIZON,
    PROCESS_STREAM,
    WATERMARK_STREAM,
    NoiseModel,
    SystemModel,
    make_rng,
    sample_noise,
    spectral_radius,
)

log = logging.getLogger(__name__)


# ── Filter design ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class KalmanDesign:
    P: np.ndarray          # steady-state prediction error covariance (d, d)
    L: np.ndarray          # gain (d, p)
    Sigma_r: np.ndarray    # residual covariance C P Cᵀ + Σ_w̄ (p, p)
    dare_iterations: int
    dare_residual: float


def riccati_map(P: np.ndarray, A: np.ndarray, C: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """A (P − P Cᵀ (C P Cᵀ + R)⁻¹ C P) Aᵀ + Q."""
    S = C @ P @ C.T + R
    PCt = P @ C.T
    nxt = A @ (P - PCt @ linalg.solve(S, PCt.T, assume_a="sym")) @ A.T + Q
    return 0.5 * (nxt + nxt.T)


def solve_dare(
    A,
    C,
    Sigma_w,
    Sigma_wbar,
    tol: float = DARE_TOL,
    max_iter: int = DARE_MAX_ITER,
) -> KalmanDesign:
    """
    Iterate the filter Riccati map from P₀ = Σ_w until ‖map(P) − P‖₂ < tol.

    The returned P is the iterate whose one-step change is below tol, so
    dare_residual is exactly ‖map(P) − P‖₂.
    """
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    Q = np.asarray(Sigma_w, dtype=float)
    R = np.asarray(Sigma_wbar, dtype=float)
    if tol <= 0:
        raise ConfigurationError(f"tol must be positive, got {tol}")
    if C.shape[1] != A.shape[0] or Q.shape != A.shape or R.shape != (C.shape[0], C.shape[0]):
        raise ConfigurationError(
            f"inconsistent filter dimensions A{A.shape} C{C.shape} Σ_w{Q.shape} Σ_w̄{R.shape}"
        )

    P = Q.copy()
    diff = np.inf
    for it in range(1, max_iter + 1):
        try:
            nxt = riccati_map(P, A, C, Q, R)
        except linalg.LinAlgError as exc:
            raise EstimatorDesignError("innovation covariance became singular", iteration=it) from exc
        diff = float(np.linalg.norm(nxt - P, 2))
        if not np.isfinite(diff):
            raise EstimatorDesignError("Riccati iterate diverged", iteration=it)
        if diff < tol:
            break
        P = nxt
    else:
        raise EstimatorDesignError(
            "filter Riccati iteration did not converge",
            iterations=max_iter, residual=diff, tol=tol,
        )

    Sigma_r = C @ P @ C.T + R
    Sigma_r = 0.5 * (Sigma_r + Sigma_r.T)
    try:
        linalg.cholesky(Sigma_r, lower=True)
    except linalg.LinAlgError as exc:
        raise EstimatorDesignError("residual covariance is not positive definite") from exc
    L = linalg.solve(Sigma_r, C @ P, assume_a="pos").T

    log.debug("DARE converged in %d iterations (residual %.3e)", it, diff)
    return KalmanDesign(P=P, L=L, Sigma_r=Sigma_r, dare_iterations=it, dare_residual=diff)


@dataclass
class FilterState:
    x_hat: np.ndarray
    t: int = 0


def filter_step(
    design: KalmanDesign, state: FilterState, y, u, sys: SystemModel
) -> tuple[FilterState, np.ndarray]:
    """r_t = y − C x̂_t;  x̂_{t+1} = A x̂_t + B u + A L r_t."""
    r = np.asarray(y, dtype=float) - sys.C @ state.x_hat
    x_next = sys.A @ state.x_hat + sys.B @ np.asarray(u, dtype=float) + sys.A @ (design.L @ r)
    return FilterState(x_hat=x_next, t=state.t + 1), r


# ── Control synthesis ─────────────────────────────────────────────────────────

def _cost_matrix(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(n)
    if arr.shape != (n, n):
        raise ConfigurationError(f"{name} must be scalar or {n}x{n}, got {arr.shape}")
    return arr


def lqr_gain(
    A,
    B,
    Q_cost=1.0,
    R_cost=1.0,
    tol: float = DARE_TOL,
    max_iter: int = DARE_MAX_ITER,
) -> np.ndarray:
    """
    K = −(R + BᵀXB)⁻¹ BᵀXA with X the fixed point of the control Riccati map
    X = Q + AᵀXA − AᵀXB (R + BᵀXB)⁻¹ BᵀXA, iterated from X₀ = Q.

    Raises SynthesisError when the iteration stalls or A + BK is not Schur stable.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    d, m = B.shape
    Q = _cost_matrix(Q_cost, d, "Q_cost")
    R = _cost_matrix(R_cost, m, "R_cost")

    X = Q.copy()
    diff = np.inf
    for it in range(1, max_iter + 1):
        BtXA = B.T @ X @ A
        gain = linalg.solve(R + B.T @ X @ B, BtXA, assume_a="sym")
        nxt = Q + A.T @ X @ A - BtXA.T @ gain
        nxt = 0.5 * (nxt + nxt.T)
        diff = float(np.linalg.norm(nxt - X, 2))
        X = nxt
        if not np.isfinite(diff):
            raise SynthesisError("control Riccati iterate diverged", iteration=it)
        if diff < tol * max(1.0, float(np.linalg.norm(X, 2))):
            break
    else:
        raise SynthesisError(
            "control Riccati iteration did not converge",
            iterations=max_iter, residual=diff,
        )

    K = -linalg.solve(R + B.T @ X @ B, B.T @ X @ A, assume_a="sym")
    rho = spectral_radius(A + B @ K)
    if rho >= 1.0:
        raise SynthesisError("synthesised gain does not stabilise the plant", spectral_radius=rho)
    log.debug("LQR gain after %d iterations, closed-loop spectral radius %.6f", it, rho)
    return K


# ── Partially observed closed loop ────────────────────────────────────────────

@dataclass(frozen=True)
class LQGRun:
    states: np.ndarray        # (T+1, d)   x_0..x_T
    estimates: np.ndarray     # (T+1, d)   x̂_0..x̂_T
    outputs: np.ndarray       # (T, p)     honest y_t = C x_t + w̄_t
    measurements: np.ndarray  # (T, p)     z_t = y_t + v_t
    residuals: np.ndarray     # (T, p)     r_t = z_t − C x̂_t
    inputs: np.ndarray        # (T, m)     applied u_t + e_t
    watermark: np.ndarray     # (T, m)     e_t (zeros when off)
    attack: AttackTrace       # realised v_t, length T

    @property
    def horizon(self) -> int:
        return self.residuals.shape[0]


def simulate_lqg(
    sys: SystemModel,
    design: KalmanDesign,
    noise: NoiseModel,
    measurement_noise: NoiseModel,
    T: int,
    key: tuple[int, ...],
    attack=None,
    watermark_cov=None,
    sigma0: float = 0.0,
) -> LQGRun:
    """
    Run T steps of the observed loop with the filter in the loop.

    `key` = (master_seed, *ids) selects the random streams; the same key with
    and without an attack gives bit-identical process and measurement noise.
    `attack` is any object with injection(t, outputs) → p-vector (an
    AttackTrace, or a ReplayAttack that reads earlier honest outputs).
    """
    if T < MIN_HORIZON:
        raise HorizonError(f"horizon must be at least {MIN_HORIZON}, got {T}")
    if noise.dim != sys.d or measurement_noise.dim != sys.p:
        raise ConfigurationError("noise dimensions do not match the plant")

    w = sample_noise(noise, make_rng(*key, PROCESS_STREAM), size=T)
    wbar = sample_noise(measurement_noise, make_rng(*key, MEASUREMENT_STREAM), size=T)
    wm_rng = make_rng(*key, WATERMARK_STREAM)

    states = np.empty((T + 1, sys.d))
    estimates = np.empty((T + 1, sys.d))
    outputs = np.empty((T, sys.p))
    measurements = np.empty((T, sys.p))
    residuals = np.empty((T, sys.p))
    inputs = np.empty((T, sys.m))
    marks = np.zeros((T, sys.m))
    injected = np.zeros((T, sys.p))

    states[0] = 0.0 if sigma0 == 0 else np.sqrt(sigma0) * make_rng(*key, INITIAL_STREAM).standard_normal(sys.d)
    fstate = FilterState(x_hat=np.zeros(sys.d))
    estimates[0] = fstate.x_hat

    for t in range(T):
        x = states[t]
        outputs[t] = sys.C @ x + wbar[t]
        if attack is not None:
            injected[t] = attack.injection(t, outputs)
        measurements[t] = outputs[t] + injected[t]

        u = sys.K @ fstate.x_hat
        if watermark_cov is not None:
            u, marks[t] = watermark_input(u, watermark_cov, wm_rng)
        inputs[t] = u

        fstate, residuals[t] = filter_step(design, fstate, measurements[t], u, sys)
        estimates[t + 1] = fstate.x_hat
        states[t + 1] = sys.A @ x + sys.B @ u + w[t]

    if not np.all(np.isfinite(states)):
        log.warning("Observed-loop run produced non-finite states (key=%s)", key)

    if attack is None:
        trace = AttackTrace(v=injected, schedule=AttackSchedule(0, 0), kind=AttackKind.NONE)
    else:
        trace = AttackTrace(v=injected, schedule=attack.schedule, kind=attack.kind)
    return LQGRun(
        states=states, estimates=estimates, outputs=outputs, measurements=measurements,
        residuals=residuals, inputs=inputs, watermark=marks, attack=trace,
    )

"""
detector.py — The AD-CPS two-step test: test signals, threshold, decision rule,
streaming detector, threshold tuning and evaluators for the error bounds.

Full-state mode (W = 2):
    T_t = ½ A_K z_{t-1} − ½ z_t − ½ (A_K − I) z_{t-2},   decided for t ≥ 2
Residual mode (window W):
    T_t = mean(r_{t-W+1..t}) − r_t,                    decided once W residuals are in

Threshold:
    α = (√2 + √M̄) · sqrt(k σ dim ln(1/δ)),   ᾱ = κ α,   flag = 1 iff ‖T_t‖ > ᾱ
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from config import CERTIFIED_K, KAPPA_FLOOR_FRACTION, KAPPA_GRID, TARGET_FPE
from errors import ConfigurationError, TimeIndexError
from system_sim import AnalysisConstants, CertificateUnavailable, StabilityCertificate, op_norm

log = logging.getLogger(__name__)


class Mode(str, Enum):
    FULL_STATE = "full-state"
    RESIDUAL = "residual"


class KMode(str, Enum):
    CERTIFIED = "certified"
    CALIBRATED = "calibrated"


def _log_inv_delta(delta: float) -> float:
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    return math.log(1.0 / delta)


def alpha_value(M_bar: float, k: float, sigma: float, dim: int, delta: float) -> float:
    """(√2 + √M̄) · sqrt(k σ dim ln(1/δ))."""
    if sigma < 0:
        raise ConfigurationError(f"sigma must be nonnegative, got {sigma}")
    return (math.sqrt(2.0) + math.sqrt(M_bar)) * math.sqrt(k * sigma * dim * _log_inv_delta(delta))


@dataclass(frozen=True)
class DetectorConfig:
    delta: float
    k_constant: float
    kappa: float
    W: int
    dim: int
    sigma: float
    constants: AnalysisConstants

    def __post_init__(self) -> None:
        _log_inv_delta(self.delta)
        if not self.k_constant > 0:
            raise ConfigurationError(f"k must be positive, got {self.k_constant}")
        if not self.kappa > 0:
            raise ConfigurationError(f"kappa must be positive, got {self.kappa}")
        if self.W < 2:
            raise ConfigurationError(f"window W must be at least 2, got {self.W}")
        if self.dim < 1:
            raise ConfigurationError(f"tested dimension must be positive, got {self.dim}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be nonnegative, got {self.sigma}")

    @property
    def alpha(self) -> float:
        return alpha_value(self.constants.M_bar, self.k_constant, self.sigma, self.dim, self.delta)

    @property
    def threshold(self) -> float:
        return self.kappa * self.alpha


def threshold_alpha(cfg: DetectorConfig) -> float:
    return cfg.alpha


def residual_sigma(Sigma_r, W: int) -> float:
    """Spectral-norm bound of Cov(T_t) = (1 − 1/W) Σ_r for white residuals."""
    return (1.0 - 1.0 / W) * op_norm(Sigma_r)


def full_state_config(constants: AnalysisConstants, d: int, delta: float, k: float = CERTIFIED_K,
                      kappa: float = 1.0) -> DetectorConfig:
    return DetectorConfig(delta=delta, k_constant=k, kappa=kappa, W=2, dim=d,
                          sigma=constants.sigma_w, constants=constants)


def residual_config(constants: AnalysisConstants, Sigma_r, W: int, delta: float,
                    k: float = CERTIFIED_K, kappa: float = 1.0) -> DetectorConfig:
    Sigma_r = np.atleast_2d(Sigma_r)
    return DetectorConfig(delta=delta, k_constant=k, kappa=kappa, W=W, dim=Sigma_r.shape[0],
                          sigma=residual_sigma(Sigma_r, W), constants=constants)


# ── Test signals ──────────────────────────────────────────────────────────────

def test_signal_state(z_prev2, z_prev1, z_t, A_K) -> np.ndarray:
    A_K = np.asarray(A_K, dtype=float)
    z_prev2 = np.asarray(z_prev2, dtype=float)
    return 0.5 * (A_K @ np.asarray(z_prev1, dtype=float)) - 0.5 * np.asarray(z_t, dtype=float) \
        - 0.5 * (A_K @ z_prev2 - z_prev2)


def test_signal_residual(window, W: int) -> np.ndarray | None:
    """mean of the last W residuals minus the newest; None while fewer than W are available."""
    r = np.atleast_2d(np.asarray(window, dtype=float))
    if r.shape[0] < W:
        return None
    r = r[-W:]
    return r.mean(axis=0) - r[-1]


def state_test_norms(z, A_K) -> np.ndarray:
    """‖T_t‖ for t = 2..n-1 over a whole measurement sequence (n, d)."""
    z = np.asarray(z, dtype=float)
    if z.shape[0] < 3:
        raise TimeIndexError("the full-state test needs at least three measurements")
    A_K = np.asarray(A_K, dtype=float)
    T = 0.5 * (z[1:-1] @ A_K.T) - 0.5 * z[2:] - 0.5 * (z[:-2] @ A_K.T - z[:-2])
    return np.linalg.norm(T, axis=1)


def residual_test_norms(r, W: int) -> np.ndarray:
    """‖T_t‖ for t = W-1..n-1 over a whole residual sequence (n, p)."""
    r = np.asarray(r, dtype=float)
    if r.shape[0] < W:
        raise TimeIndexError(f"the residual test needs at least W = {W} residuals")
    csum = np.vstack([np.zeros((1, r.shape[1])), np.cumsum(r, axis=0)])
    means = (csum[W:] - csum[:-W]) / W
    return np.linalg.norm(means - r[W - 1:], axis=1)


def first_decision_time(mode: Mode | str, W: int) -> int:
    return 2 if Mode(mode) is Mode.FULL_STATE else W - 1


# ── Decisions ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DetectionRecord:
    t: int
    test_norm: float
    threshold: float
    flag: int
    mode: Mode


def decide(T_t, threshold: float, t: int = 0, mode: Mode | str = Mode.FULL_STATE) -> DetectionRecord:
    """flag = 1 iff ‖T_t‖ > threshold; a tie is honest."""
    norm = float(np.linalg.norm(np.atleast_1d(T_t)))
    return DetectionRecord(t=t, test_norm=norm, threshold=float(threshold),
                           flag=int(norm > threshold), mode=Mode(mode))


def records_from_norms(norms, threshold: float, t0: int, mode: Mode | str) -> list[DetectionRecord]:
    mode = Mode(mode)
    return [
        DetectionRecord(t=t0 + i, test_norm=float(n), threshold=float(threshold),
                        flag=int(n > threshold), mode=mode)
        for i, n in enumerate(norms)
    ]


class ADCPSDetector:
    """
    Streaming two-step detector. Feed measurements (full-state) or residuals
    (residual mode) one step at a time; update() returns None during warm-up.
    """

    def __init__(self, cfg: DetectorConfig, mode: Mode | str = Mode.FULL_STATE, A_K=None) -> None:
        self.cfg = cfg
        self.mode = Mode(mode)
        if self.mode is Mode.FULL_STATE:
            if A_K is None:
                raise ConfigurationError("full-state mode needs the closed-loop matrix A_K")
            self.A_K = np.asarray(A_K, dtype=float)
            self._buffer = deque(maxlen=3)
        else:
            self.A_K = None
            self._buffer = deque(maxlen=cfg.W)
        self.threshold = cfg.threshold
        self.t = 0

    def reset(self) -> None:
        self._buffer.clear()
        self.t = 0

    def update(self, sample) -> DetectionRecord | None:
        self._buffer.append(np.asarray(sample, dtype=float))
        t = self.t
        self.t += 1
        if len(self._buffer) < self._buffer.maxlen:
            return None
        if self.mode is Mode.FULL_STATE:
            T_t = test_signal_state(self._buffer[0], self._buffer[1], self._buffer[2], self.A_K)
        else:
            T_t = test_signal_residual(np.stack(self._buffer), self.cfg.W)
        return decide(T_t, self.threshold, t=t, mode=self.mode)


# ── Tuning ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CalibrationResult:
    selected: float | None
    curve: list[tuple[float, float]]
    ok: bool
    config: object = None

    def fpe_at(self, value: float) -> float:
        for x, fpe in self.curve:
            if x == value:
                return fpe
        raise KeyError(value)


def empirical_fpe(nominal_norms, threshold: float) -> float:
    """Pooled fraction of nominal test norms above the threshold."""
    norms = np.concatenate([np.ravel(n) for n in nominal_norms])
    return float(np.mean(norms > threshold)) if norms.size else 0.0


def calibrate_kappa(
    nominal_norms,
    alpha: float,
    target_fpe: float = TARGET_FPE,
    kappa_grid=KAPPA_GRID,
) -> CalibrationResult:
    """
    Smallest grid κ whose pooled nominal FPE is ≤ target_fpe. ok is False when
    no grid κ reaches the target, or when the grid floor already lands far
    below it (selected is then the floor).

    nominal_norms is an iterable of per-run ‖T_t‖ arrays from attack-free runs.
    """
    norms = np.sort(np.concatenate([np.ravel(n) for n in nominal_norms]))
    if norms.size == 0:
        raise ConfigurationError("kappa calibration needs at least one nominal test signal")
    grid = np.sort(np.asarray(kappa_grid, dtype=float))
    above = norms.size - np.searchsorted(norms, grid * alpha, side="right")
    fpe = above / norms.size
    curve = list(zip(grid.tolist(), fpe.tolist()))

    ok = np.flatnonzero(fpe <= target_fpe)
    if ok.size == 0:
        log.warning("Kappa calibration: no kappa on the grid reaches FPE <= %.4f (best %.4f)",
                    target_fpe, float(fpe.min()))
        return CalibrationResult(selected=None, curve=curve, ok=False)
    kappa = float(grid[ok[0]])
    # the grid floor already over-shoots: the target is never bracketed
    if ok[0] == 0 and fpe[0] < KAPPA_FLOOR_FRACTION * target_fpe:
        log.warning("Kappa calibration: smallest grid kappa %.4g already gives FPE %.4f, far below "
                    "target %.4f; extend the grid downwards", kappa, fpe[0], target_fpe)
        return CalibrationResult(selected=kappa, curve=curve, ok=False)
    log.info("Kappa calibrated: kappa = %.4g, nominal FPE %.4f", kappa, fpe[ok[0]])
    return CalibrationResult(selected=kappa, curve=curve, ok=True)


def calibrate_k(dbar_norms, sigma_bar: float, d: int, delta: float) -> float:
    """k such that the (1 − δ)-quantile of ‖d̄_t‖ equals sqrt(k σ̄ d ln(1/δ))."""
    if not sigma_bar > 0:
        raise ConfigurationError(f"sigma_bar must be positive, got {sigma_bar}")
    q = float(np.quantile(np.ravel(dbar_norms), 1.0 - delta))
    return q * q / (sigma_bar * d * _log_inv_delta(delta))


# ── Error bounds ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BoundUnavailable:
    reason: str


@dataclass(frozen=True)
class FPEBound:
    value: float
    simplified: float

    @property
    def vacuous(self) -> bool:
        return self.value >= 1.0


def fpe_bound(
    cert: StabilityCertificate | CertificateUnavailable,
    constants: AnalysisConstants,
    delta: float,
    k: float,
    sigma_w: float,
    d: int,
    x0_norm: float,
    t: int,
) -> FPEBound | BoundUnavailable:
    """
    δ + 2h̄ Σ_{i=t-1}^{t} (γ^{i-1}‖x₀‖ + β Σ_{j=0}^{i-2} γ^{i-2-j}) / sqrt(2kσ_w d ln(1/δ)),
    with the x₀ = 0, t → ∞ form 4h̄β / ((1−γ) sqrt(2kσ_w d ln(1/δ))) + δ.
    """
    if isinstance(cert, CertificateUnavailable):
        return BoundUnavailable(f"no stability certificate: {cert.reason}")
    if t < 2:
        raise TimeIndexError(f"the false-positive bound needs t >= 2, got {t}")
    denom = math.sqrt(2.0 * k * sigma_w * d * _log_inv_delta(delta))
    if denom == 0.0:
        return BoundUnavailable("zero process-noise level")

    g, beta = cert.gamma, cert.beta
    drift = 0.0
    for i in (t - 1, t):
        geometric = (1.0 - g ** (i - 1)) / (1.0 - g)   # Σ_{l=0}^{i-2} γ^l
        drift += g ** (i - 1) * x0_norm + beta * geometric
    value = delta + 2.0 * constants.h_bar * drift / denom
    simplified = 4.0 * constants.h_bar * beta / ((1.0 - g) * denom) + delta
    return FPEBound(value=value, simplified=simplified)


def _sigma_pair(sigma_x, t: int) -> tuple[float, float]:
    sigma_x = np.ravel(np.asarray(sigma_x, dtype=float))
    if t < 2:
        raise TimeIndexError(f"ζ̄_t needs t >= 2, got {t}")
    if sigma_x.shape[0] < t:
        raise TimeIndexError(f"σ_x sequence has {sigma_x.shape[0]} entries, needs indices up to {t - 1}")
    return float(sigma_x[t - 2]), float(sigma_x[t - 1])


def zeta_threshold(
    constants: AnalysisConstants,
    sigma_x,
    delta: float,
    k: float,
    sigma_w: float,
    d: int,
    t: int,
    alpha: float,
) -> float:
    """ζ̄_t = sqrt(dσ_wM̄) + h̄ Σ_{i=t-1}^{t} (sqrt(dσ_{x_{i-1}}) + sqrt(kσ_{x_{i-1}} ln(1/δ))) + α."""
    lg = _log_inv_delta(delta)
    total = sum(math.sqrt(d * s) + math.sqrt(k * s * lg) for s in _sigma_pair(sigma_x, t))
    return math.sqrt(d * sigma_w * constants.M_bar) + constants.h_bar * total + alpha


@dataclass(frozen=True)
class ZetaEnvelope:
    lower: float
    upper: float


def zeta_envelopes(
    constants: AnalysisConstants,
    sigma0: float,
    nu_sup: float,
    delta: float,
    k: float,
    sigma_w: float,
    d: int,
    alpha: float,
) -> ZetaEnvelope:
    """
    Time-uniform bounds on ζ̄_t given ν = sup_t σ_{x_t}:

        lower = sqrt(dσ_wM̄) + 2h̄ (sqrt(dσ₀) + sqrt(kσ₀ ln(1/δ))) + α
        upper = sqrt(dσ_wM̄) + 2h̄ sqrt(kνd ln(1/δ)) + α

    The lower envelope holds when σ_{x_t} ≥ σ₀ (always for σ₀ = 0); the upper
    one when √d + √(k ln(1/δ)) ≤ √(k d ln(1/δ)), e.g. for the certified k.
    """
    lg = _log_inv_delta(delta)
    base = math.sqrt(d * sigma_w * constants.M_bar) + alpha
    lower = base + 2.0 * constants.h_bar * (math.sqrt(d * sigma0) + math.sqrt(k * sigma0 * lg))
    upper = base + 2.0 * constants.h_bar * math.sqrt(k * nu_sup * d * lg)
    return ZetaEnvelope(lower=lower, upper=upper)


@dataclass(frozen=True)
class FNEBound:
    epsilon: float
    ratio: float        # ε² / (k σ_w M̄)
    bound: float
    vacuous: bool = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vacuous", self.bound >= 1.0)

    @property
    def exponent(self) -> float:
        """log(ε² / (kσ_wM̄)); −inf when ε = 0."""
        return math.log(self.ratio) if self.ratio > 0 else float("-inf")


def fne_from_epsilon(epsilon: float, constants: AnalysisConstants, delta: float, k: float,
                     sigma_w: float) -> FNEBound:
    scale = k * sigma_w * constants.M_bar
    if epsilon == 0.0:
        ratio = 0.0
    elif scale == 0.0:
        ratio = float("inf")
    else:
        ratio = epsilon * epsilon / scale
    return FNEBound(epsilon=epsilon, ratio=ratio, bound=math.exp(-ratio) + 2.0 * delta)


def fne_bound(
    constants: AnalysisConstants,
    sigma_x,
    delta: float,
    k: float,
    sigma_w: float,
    t: int,
) -> FNEBound:
    """ε = (h̄/2) Σ_{i=t-1}^{t} sqrt(kσ_{x_{i-1}} ln(1/δ)); bound = exp(−ε²/(kσ_wM̄)) + 2δ."""
    lg = _log_inv_delta(delta)
    eps = 0.5 * constants.h_bar * sum(math.sqrt(k * s * lg) for s in _sigma_pair(sigma_x, t))
    result = fne_from_epsilon(eps, constants, delta, k, sigma_w)
    if result.vacuous:
        log.debug("False-negative bound is vacuous at t = %d (%.4f)", t, result.bound)
    return result

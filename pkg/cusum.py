"""
cusum.py — One-sided CUSUM change detector on the Kalman residual stream, the
baseline AD-CPS is compared against, plus gaussian control-input watermarking.

    g_t = r_tᵀ Σ_r⁻¹ r_t   (chi-square)   or   ‖r_t‖   (norm)
    S_t = max(0, S_{t-1} + g_t − ν),  alarm iff S_t ≥ h,  optional reset to 0
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import linalg

from config import CUSUM_H_GRID, CUSUM_TARGET_FPE
from detector import CalibrationResult
from errors import ConfigurationError
from system_sim import NoiseModel, sample_noise

log = logging.getLogger(__name__)


class Statistic(str, Enum):
    CHI_SQUARE = "chi-square"
    NORM = "norm"


@dataclass(frozen=True)
class CusumConfig:
    h: float
    nu: float | None = None          # None → nominal mean of the statistic
    statistic: Statistic = Statistic.CHI_SQUARE
    reset_on_alarm: bool = True
    watermark_cov: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.h > 0:
            raise ConfigurationError(f"CUSUM threshold h must be positive, got {self.h}")
        if self.nu is not None and self.nu < 0:
            raise ConfigurationError(f"CUSUM drift must be nonnegative, got {self.nu}")
        object.__setattr__(self, "statistic", Statistic(self.statistic))

    def drift(self, Sigma_r: np.ndarray) -> float:
        if self.nu is not None:
            return float(self.nu)
        return default_drift(self.statistic, Sigma_r)


@dataclass
class CusumState:
    S: float = 0.0
    t: int = 0


def default_drift(statistic: Statistic | str, Sigma_r: np.ndarray) -> float:
    """E[g] under H₀ for chi-square (= p); √tr Σ_r, an upper bound on E‖r‖, for norm."""
    Sigma_r = np.atleast_2d(Sigma_r)
    if Statistic(statistic) is Statistic.CHI_SQUARE:
        return float(Sigma_r.shape[0])
    return float(np.sqrt(np.trace(Sigma_r)))


def _residual_factor(Sigma_r) -> np.ndarray:
    try:
        return linalg.cholesky(np.atleast_2d(np.asarray(Sigma_r, dtype=float)), lower=True)
    except linalg.LinAlgError as exc:
        raise ConfigurationError("residual covariance is singular; chi-square CUSUM undefined") from exc


def statistic_values(residuals, Sigma_r, statistic: Statistic | str = Statistic.CHI_SQUARE) -> np.ndarray:
    """g_t for every row of residuals (n, p)."""
    r = np.atleast_2d(np.asarray(residuals, dtype=float))
    if Statistic(statistic) is Statistic.NORM:
        return np.linalg.norm(r, axis=1)
    z = linalg.solve_triangular(_residual_factor(Sigma_r), r.T, lower=True)
    return np.sum(z * z, axis=0)


def cusum_step(cfg: CusumConfig, state: CusumState, r_t, Sigma_r) -> tuple[CusumState, bool]:
    g = float(statistic_values(r_t, Sigma_r, cfg.statistic)[0])
    return _advance(state, g, cfg.drift(Sigma_r), cfg.h, cfg.reset_on_alarm)


def _advance(state: CusumState, g: float, nu: float, h: float, reset: bool) -> tuple[CusumState, bool]:
    S = max(0.0, state.S + g - nu)
    alarm = S >= h
    if alarm and reset:
        S = 0.0
    return CusumState(S=S, t=state.t + 1), alarm


@dataclass(frozen=True)
class CusumRecord:
    t: int
    statistic: float
    S: float
    threshold: float
    flag: int


class CusumDetector:
    """Streaming CUSUM; the residual factor and drift are fixed at construction."""

    def __init__(self, cfg: CusumConfig, Sigma_r) -> None:
        self.cfg = cfg
        self.Sigma_r = np.atleast_2d(np.asarray(Sigma_r, dtype=float))
        if cfg.statistic is Statistic.CHI_SQUARE:
            self._factor = _residual_factor(self.Sigma_r)
        self.nu = cfg.drift(self.Sigma_r)
        self.state = CusumState()

    def reset(self) -> None:
        self.state = CusumState()

    def update(self, r_t) -> CusumRecord:
        r = np.asarray(r_t, dtype=float)
        if self.cfg.statistic is Statistic.NORM:
            g = float(np.linalg.norm(r))
        else:
            z = linalg.solve_triangular(self._factor, r, lower=True)
            g = float(z @ z)
        t = self.state.t
        self.state, alarm = _advance(self.state, g, self.nu, self.cfg.h, self.cfg.reset_on_alarm)
        return CusumRecord(t=t, statistic=g, S=self.state.S, threshold=self.cfg.h, flag=int(alarm))


def run_cusum(cfg: CusumConfig, residuals, Sigma_r) -> list[CusumRecord]:
    """One record per residual, t = 0..n-1."""
    det = CusumDetector(cfg, Sigma_r)
    return [det.update(r) for r in np.atleast_2d(residuals)]


# ── Calibration ───────────────────────────────────────────────────────────────

def alarm_rates(
    nominal_residuals: list[np.ndarray],
    Sigma_r,
    h_grid,
    nu: float | None = None,
    statistic: Statistic | str = Statistic.CHI_SQUARE,
    reset_on_alarm: bool = True,
) -> np.ndarray:
    """Pooled alarm rate for every h on the grid, all h advanced together."""
    statistic = Statistic(statistic)
    h = np.asarray(h_grid, dtype=float)
    nu = default_drift(statistic, Sigma_r) if nu is None else float(nu)
    alarms = np.zeros(h.shape[0])
    steps = 0
    for residuals in nominal_residuals:
        g = statistic_values(residuals, Sigma_r, statistic)
        S = np.zeros_like(h)
        for g_t in g:
            S = np.maximum(0.0, S + g_t - nu)
            hit = S >= h
            alarms += hit
            if reset_on_alarm:
                S[hit] = 0.0
        steps += g.shape[0]
    return alarms / max(steps, 1)


def calibrate_cusum(
    nominal_residuals: list[np.ndarray],
    Sigma_r,
    target_fpe: float = CUSUM_TARGET_FPE,
    h_grid=CUSUM_H_GRID,
    base: CusumConfig | None = None,
):
    """Smallest grid h whose pooled nominal alarm rate is ≤ target_fpe."""
    base = base or CusumConfig(h=1.0)
    grid = np.sort(np.asarray(h_grid, dtype=float))
    rates = alarm_rates(
        nominal_residuals, Sigma_r, grid, base.nu, base.statistic, base.reset_on_alarm
    )
    curve = list(zip(grid.tolist(), rates.tolist()))
    ok = np.flatnonzero(rates <= target_fpe)
    if ok.size == 0:
        log.warning("CUSUM calibration: no h on the grid reaches FPE <= %.4f (best %.4f)",
                    target_fpe, float(rates.min()))
        return CalibrationResult(selected=None, curve=curve, ok=False)
    h_star = float(grid[ok[0]])
    log.info("CUSUM calibrated: h = %.2f, nominal FPE %.4f", h_star, rates[ok[0]])
    return CalibrationResult(selected=h_star, curve=curve, ok=True, config=replace(base, h=h_star))


# ── Watermarking ──────────────────────────────────────────────────────────────

def watermark_input(u_t, watermark_cov, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """u_t' = u_t + e_t with e_t ~ N(0, watermark_cov); returns (u_t', e_t)."""
    u = np.asarray(u_t, dtype=float)
    cov = np.atleast_2d(np.asarray(watermark_cov, dtype=float))
    if not cov.any():
        return u.copy(), np.zeros_like(u)
    e = sample_noise(NoiseModel(cov), rng)
    return u + e, e

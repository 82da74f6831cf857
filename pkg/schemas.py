"""
schemas.py — Pydantic models for the JSON scenario config, and its loader.

Matrices are row-major nested lists. Any field left out takes its default from config.py.
"""

import json
import os
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from config import (
    ATTACK_START,
    ATTACK_STOP,
    BURST_OFF,
    BURST_ON,
    CALIBRATION_RUNS,
    CERTIFIED_K,
    CUSUM_TARGET_FPE,
    DECEPTION_AR_GAIN,
    DELTA,
    FNE_SURFACE_SIGMA_W,
    FNE_SURFACE_TIMES,
    HORIZON,
    IP_A,
    IP_B,
    KAPPA_GRID,
    LQR_INPUT_COST,
    LQR_STATE_COST,
    SEED,
    SIGMA_0,
    SIGMA_A,
    SIGMA_A_GRID,
    SIGMA_W,
    SIGMA_WBAR,
    SIGMA_WBAR_GRID,
    TARGET_FPE,
    THRESHOLD_GRID,
    TRIAL_SEEDS,
    WATERMARK_SIGMA,
    WINDOW,
    WINDOW_SET,
)
from errors import ConfigurationError

Matrix = list[list[float]]
NoiseKindName = Literal["gaussian", "uniform-box", "truncated-gaussian"]


# ── Plant and noise ──────────────────────────────────────────────────────────

class SystemSpec(BaseModel):
    A: Matrix = Field(default_factory=lambda: [row[:] for row in IP_A])
    B: Matrix = Field(default_factory=lambda: [row[:] for row in IP_B])
    C: Matrix | None = None          # None → identity
    K: Matrix | None = None          # None → LQR gain from the costs below
    lqr_state_cost: float = Field(LQR_STATE_COST, gt=0)
    lqr_input_cost: float = Field(LQR_INPUT_COST, gt=0)

    @model_validator(mode="after")
    def check_shapes(self) -> "SystemSpec":
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        d = A.shape[0]
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != d:
            raise ValueError(f"B must have {d} rows, got shape {B.shape}")
        if self.C is not None:
            C = np.asarray(self.C, dtype=float)
            if C.ndim != 2 or C.shape[1] != d:
                raise ValueError(f"C must have {d} columns, got shape {C.shape}")
        if self.K is not None:
            K = np.asarray(self.K, dtype=float)
            if K.shape != (B.shape[1], d):
                raise ValueError(f"K must have shape {(B.shape[1], d)}, got {K.shape}")
        return self

    @property
    def d(self) -> int:
        return len(self.A)

    @property
    def p(self) -> int:
        return self.d if self.C is None else len(self.C)


class NoiseSpec(BaseModel):
    sigma_w: float = Field(SIGMA_W, ge=0)
    kind: NoiseKindName = "gaussian"
    sigma_wbar: float = Field(SIGMA_WBAR, ge=0)
    measurement_kind: NoiseKindName = "gaussian"
    sigma0: float = Field(SIGMA_0, ge=0)


# ── Attack ───────────────────────────────────────────────────────────────────

class AttackSpec(BaseModel):
    kind: Literal[
        "none", "deception", "intermittent", "replay", "replay-file", "custom-sequence", "assumption2"
    ] = "deception"
    t_start: int = Field(ATTACK_START, ge=0)
    t_stop: int = Field(ATTACK_STOP, ge=0)
    sigma_a: float = Field(SIGMA_A, ge=0)
    ar_gain: float = DECEPTION_AR_GAIN
    A_a: Matrix | None = None        # None → ar_gain * I
    lag: int = Field(50, gt=0)       # replay
    file: str | None = None          # replay-file / custom-sequence
    burst_on: int = Field(BURST_ON, gt=0)
    burst_off: int = Field(BURST_OFF, ge=0)
    direction: list[float] | None = None   # assumption2; None → all ones
    margin: float = Field(1.05, ge=1.0)

    @model_validator(mode="after")
    def check_window(self) -> "AttackSpec":
        if self.t_stop < self.t_start:
            raise ValueError(f"t_stop ({self.t_stop}) precedes t_start ({self.t_start})")
        if self.kind in ("replay-file", "custom-sequence") and not self.file:
            raise ValueError(f"attack kind {self.kind!r} needs a file")
        return self


# ── Detectors ────────────────────────────────────────────────────────────────

class DetectorSpec(BaseModel):
    mode: Literal["full-state", "residual"] = "residual"
    W: int = Field(WINDOW, ge=2)
    delta: float = Field(DELTA, gt=0, lt=1)
    kappa: float | None = Field(None, gt=0)   # None → calibrate to target_fpe
    k_mode: Literal["certified", "calibrated"] = "certified"
    k: float = Field(CERTIFIED_K, gt=0)
    target_fpe: float = Field(TARGET_FPE, gt=0, lt=1)
    kappa_grid: list[float] = Field(default_factory=lambda: list(KAPPA_GRID))

    @field_validator("kappa_grid")
    @classmethod
    def grid_positive(cls, v: list[float]) -> list[float]:
        if not v or min(v) <= 0:
            raise ValueError("kappa_grid must be a nonempty list of positive values")
        return v


class CusumSpec(BaseModel):
    enabled: bool = True
    statistic: Literal["chi-square", "norm"] = "chi-square"
    nu: float | None = Field(None, ge=0)
    h: float | None = Field(None, gt=0)        # None → calibrate to target_fpe
    target_fpe: float = Field(CUSUM_TARGET_FPE, gt=0, lt=1)
    reset_on_alarm: bool = True
    watermark_sigma: float = Field(WATERMARK_SIGMA, ge=0)


# ── Run and sweeps ───────────────────────────────────────────────────────────

class RunSpec(BaseModel):
    T: int = Field(HORIZON, ge=3)
    seed: int = Field(SEED, ge=0)
    trials: int = Field(len(TRIAL_SEEDS), ge=1)
    trial_seeds: list[int] = Field(default_factory=lambda: list(TRIAL_SEEDS))
    calibration_runs: int = Field(CALIBRATION_RUNS, ge=1)


class SweepSpec(BaseModel):
    thresholds: list[float] = Field(default_factory=lambda: list(THRESHOLD_GRID))
    sigma_wbar: list[float] = Field(default_factory=lambda: list(SIGMA_WBAR_GRID))
    sigma_a: list[float] = Field(default_factory=lambda: list(SIGMA_A_GRID))
    windows: list[int] = Field(default_factory=lambda: list(WINDOW_SET))
    fne_sigma_w: list[float] = Field(default_factory=lambda: list(FNE_SURFACE_SIGMA_W))
    fne_times: list[int] = Field(default_factory=lambda: list(FNE_SURFACE_TIMES))

    @model_validator(mode="after")
    def nonempty(self) -> "SweepSpec":
        for name in ("thresholds", "sigma_wbar", "sigma_a", "windows", "fne_sigma_w", "fne_times"):
            if not getattr(self, name):
                raise ValueError(f"sweep axis {name!r} is empty")
        if min(self.windows) < 2:
            raise ValueError("every window size must be at least 2")
        if min(self.fne_times) < 2:
            raise ValueError("fne_times must start at t >= 2")
        return self


class ScenarioConfig(BaseModel):
    system: SystemSpec = Field(default_factory=SystemSpec)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    attack: AttackSpec = Field(default_factory=AttackSpec)
    detector: DetectorSpec = Field(default_factory=DetectorSpec)
    cusum: CusumSpec = Field(default_factory=CusumSpec)
    run: RunSpec = Field(default_factory=RunSpec)
    sweep: SweepSpec = Field(default_factory=SweepSpec)

    @model_validator(mode="after")
    def check_consistency(self) -> "ScenarioConfig":
        if self.attack.kind != "none" and self.attack.t_stop > self.run.T:
            raise ValueError(f"attack window ends at {self.attack.t_stop}, past the horizon {self.run.T}")
        if self.detector.mode == "full-state":
            if self.system.C is not None and not np.allclose(self.system.C, np.eye(self.system.d)):
                raise ValueError("full-state mode needs C = I (or C omitted)")
        if self.attack.kind == "assumption2" and self.detector.mode != "full-state":
            raise ValueError("assumption2 attacks are defined for the full-state test only")
        if self.attack.A_a is not None:
            A_a = np.asarray(self.attack.A_a, dtype=float)
            if A_a.shape != (self.system.p, self.system.p):
                raise ValueError(f"A_a must be {self.system.p}x{self.system.p}, got {A_a.shape}")
        if self.attack.direction is not None and len(self.attack.direction) != self.system.p:
            raise ValueError(f"attack direction needs {self.system.p} entries")
        if self.attack.file and not os.path.isfile(self.attack.file):
            raise ValueError(f"attack file not found: {self.attack.file}")
        return self

    def with_updates(self, **sections) -> "ScenarioConfig":
        """Copy with some fields of some sections replaced, e.g. with_updates(attack={"kind": "none"})."""
        data = self.model_dump()
        for section, values in sections.items():
            data[section].update(values)
        try:
            return ScenarioConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigurationError(f"invalid config override:\n{exc}") from exc


def load_config(path: str | None = None) -> ScenarioConfig:
    """Read and validate a scenario file; relative attack files resolve against the file's folder."""
    if path is None:
        return ScenarioConfig()
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}") from exc

    attack_file = raw.get("attack", {}).get("file")
    if attack_file and not os.path.isabs(attack_file):
        raw["attack"]["file"] = os.path.join(os.path.dirname(os.path.abspath(path)), attack_file)
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid config {path}:\n{exc}") from exc

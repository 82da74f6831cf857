"""
attack_models.py — Measurement-injection attacks z_t = y_t + v_t.

Kinds:
  - none             : v ≡ 0
  - deception        : AR(1) v_t = A_a v_{t-1} + v̂_t, v̂_t ~ N(0, Σ_a), active on [T1, T2)
  - intermittent     : deception bursts (BURST_ON on, BURST_OFF off) inside [T1, T2)
  - replay           : pre-attack outputs played back in a loop, generated online
  - replay-file /
    custom-sequence  : stored v sequence read from CSV (columns t, v_1..v_p)
  - assumption2      : v_t sized so that ‖ζ_t‖ ≥ ζ̄_t at every active step

Every trace is zero outside its schedule window.
"""

import logging
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd

from config import BURST_OFF, BURST_ON, DECEPTION_AR_GAIN
from errors import ConfigurationError, DataError, TimeIndexError
from system_sim import NoiseModel, sample_noise

log = logging.getLogger(__name__)


class AttackKind(str, Enum):
    NONE = "none"
    DECEPTION = "deception"
    INTERMITTENT = "intermittent"
    REPLAY = "replay"
    REPLAY_FILE = "replay-file"
    CUSTOM_SEQUENCE = "custom-sequence"
    ASSUMPTION2 = "assumption2"


@dataclass(frozen=True)
class AttackSchedule:
    """Attack active on [t_start, t_stop). t_start == t_stop means no attack."""

    t_start: int
    t_stop: int

    def __post_init__(self) -> None:
        if not 0 <= self.t_start <= self.t_stop:
            raise ConfigurationError(
                f"attack window must satisfy 0 <= T1 <= T2, got [{self.t_start}, {self.t_stop})"
            )

    @property
    def delta(self) -> int:
        return self.t_stop - self.t_start

    def active(self, t: int) -> bool:
        return self.t_start <= t < self.t_stop

    def mask(self, n: int) -> np.ndarray:
        t = np.arange(n)
        return (t >= self.t_start) & (t < self.t_stop)

    def check_horizon(self, n: int) -> None:
        if self.t_stop > n:
            raise ConfigurationError(f"attack window ends at {self.t_stop}, past the horizon {n}")


NO_ATTACK = AttackSchedule(0, 0)


@dataclass(frozen=True)
class DeceptionParams:
    A_a: np.ndarray
    Sigma_a: np.ndarray
    sigma_a_bound: float

    def __post_init__(self) -> None:
        A_a = np.array(self.A_a, dtype=float, ndmin=2)
        noise = NoiseModel(self.Sigma_a, sigma_bound=self.sigma_a_bound)
        if A_a.shape != noise.covariance.shape:
            raise ConfigurationError(f"A_a {A_a.shape} and Σ_a {noise.covariance.shape} disagree")
        object.__setattr__(self, "A_a", A_a)
        object.__setattr__(self, "Sigma_a", noise.covariance)
        object.__setattr__(self, "sigma_a_bound", noise.sigma_bound)

    @classmethod
    def isotropic(cls, p: int, sigma_a: float, gain: float = DECEPTION_AR_GAIN) -> "DeceptionParams":
        return cls(gain * np.eye(p), sigma_a * np.eye(p), sigma_a)

    @property
    def p(self) -> int:
        return self.A_a.shape[0]

    @property
    def noise(self) -> NoiseModel:
        return NoiseModel(self.Sigma_a, sigma_bound=self.sigma_a_bound)


@dataclass(frozen=True)
class AttackTrace:
    v: np.ndarray               # (n, p)
    schedule: AttackSchedule
    kind: AttackKind

    def __post_init__(self) -> None:
        v = np.array(self.v, dtype=float, ndmin=2)
        outside = ~self.schedule.mask(v.shape[0])
        if np.any(v[outside] != 0.0):
            raise DataError("attack trace is nonzero outside its schedule window")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "kind", AttackKind(self.kind))

    @property
    def length(self) -> int:
        return self.v.shape[0]

    @property
    def p(self) -> int:
        return self.v.shape[1]

    def injection(self, t: int, outputs=None) -> np.ndarray:
        return self.v[t]


def no_attack(n: int, p: int) -> AttackTrace:
    return AttackTrace(np.zeros((n, p)), NO_ATTACK, AttackKind.NONE)


# ── Generators ────────────────────────────────────────────────────────────────

def deception_step(params: DeceptionParams, v_prev, rng: np.random.Generator) -> np.ndarray:
    """v_t = A_a v_{t-1} + v̂_t with v̂_t ~ N(0, Σ_a)."""
    return params.A_a @ np.asarray(v_prev, dtype=float) + sample_noise(params.noise, rng)


def _deception_sequence(params: DeceptionParams, active: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # AR state restarts from zero at the start of every active run
    v = np.zeros((active.shape[0], params.p))
    prev = np.zeros(params.p)
    for t in np.flatnonzero(active):
        if t == 0 or not active[t - 1]:
            prev = np.zeros(params.p)
        prev = deception_step(params, prev, rng)
        v[t] = prev
    return v


def generate_deception(
    params: DeceptionParams, schedule: AttackSchedule, n: int, rng: np.random.Generator
) -> AttackTrace:
    """AR(1) deception attack over [T1, T2) of an n-step measurement sequence."""
    schedule.check_horizon(n)
    v = _deception_sequence(params, schedule.mask(n), rng)
    return AttackTrace(v, schedule, AttackKind.DECEPTION)


def burst_mask(schedule: AttackSchedule, n: int, on: int = BURST_ON, off: int = BURST_OFF) -> np.ndarray:
    """Active for `on` steps then idle for `off` steps, repeating from T1."""
    if on <= 0 or off < 0:
        raise ConfigurationError(f"burst pattern needs on > 0 and off >= 0, got {on}/{off}")
    t = np.arange(n)
    phase = (t - schedule.t_start) % (on + off)
    return schedule.mask(n) & (phase < on)


def generate_intermittent(
    params: DeceptionParams,
    schedule: AttackSchedule,
    n: int,
    rng: np.random.Generator,
    on: int = BURST_ON,
    off: int = BURST_OFF,
) -> AttackTrace:
    """Deception bursts inside [T1, T2); honesty is violated only around each burst."""
    schedule.check_horizon(n)
    v = _deception_sequence(params, burst_mask(schedule, n, on, off), rng)
    return AttackTrace(v, schedule, AttackKind.INTERMITTENT)


@dataclass(frozen=True)
class ReplayAttack:
    """
    Records the `lag` honest outputs before T1 and plays them back in a loop:
    z_t = y_{T1 - lag + ((t - T1) mod lag)}, i.e. v_t = y_replayed − y_t.
    """

    schedule: AttackSchedule
    lag: int
    kind: AttackKind = AttackKind.REPLAY

    def __post_init__(self) -> None:
        if self.lag <= 0:
            raise ConfigurationError(f"replay lag must be positive, got {self.lag}")
        if self.schedule.delta > 0 and self.schedule.t_start < self.lag:
            raise ConfigurationError(
                f"replay needs {self.lag} recorded steps before T1 = {self.schedule.t_start}"
            )

    def source(self, t: int) -> int:
        return self.schedule.t_start - self.lag + (t - self.schedule.t_start) % self.lag

    def injection(self, t: int, outputs: np.ndarray) -> np.ndarray:
        if not self.schedule.active(t):
            return np.zeros(outputs.shape[1])
        return outputs[self.source(t)] - outputs[t]


def custom_sequence(v, schedule: AttackSchedule, kind: AttackKind = AttackKind.CUSTOM_SEQUENCE) -> AttackTrace:
    """Wrap a user-supplied v sequence; entries outside the window must be zero."""
    return AttackTrace(np.asarray(v, dtype=float), schedule, kind)


def apply_attack(outputs, trace: AttackTrace) -> np.ndarray:
    """z_t = y_t + v_t."""
    y = np.asarray(outputs, dtype=float)
    if y.shape != trace.v.shape:
        raise DataError(f"outputs {y.shape} and attack trace {trace.v.shape} are not aligned")
    return y + trace.v


# ── Honesty and cumulative adversarial input ──────────────────────────────────

def is_w_step_honest(trace: AttackTrace, t: int, W: int) -> bool:
    """True iff v_{t-W} = … = v_{t-1} = 0."""
    if t < W:
        raise TimeIndexError(f"W-step honesty needs t >= W, got t = {t}, W = {W}")
    return not np.any(trace.v[t - W:t])


def honesty_flags(trace: AttackTrace, W: int) -> np.ndarray:
    """is_w_step_honest for every t in W..n-1; entry i refers to t = W + i."""
    active = np.any(trace.v != 0.0, axis=1).astype(int)
    window = np.convolve(active, np.ones(W, dtype=int), mode="valid")[:-1]
    return window == 0


def cumulative_adversarial_input(trace: AttackTrace, A_K, t: int) -> np.ndarray:
    """ζ_t = ½ A_K v_{t-1} − ½ v_t − ½ (A_K − I) v_{t-2}."""
    A_K = np.asarray(A_K, dtype=float)
    if A_K.shape != (trace.p, trace.p):
        raise ConfigurationError(
            f"ζ_t needs a state-dimension attack: A_K is {A_K.shape}, v has {trace.p} entries"
        )
    if t < 2:
        raise TimeIndexError(f"ζ_t needs t >= 2, got {t}")
    v = trace.v
    return 0.5 * (A_K @ v[t - 1]) - 0.5 * v[t] - 0.5 * ((A_K - np.eye(trace.p)) @ v[t - 2])


def synthesize_assumption2_attack(
    direction,
    schedule: AttackSchedule,
    n: int,
    A_K,
    zeta_bar,
    margin: float = 1.05,
) -> AttackTrace:
    """
    Attack meeting ‖ζ_t‖ ≥ ζ̄_t at every active step t >= 2.

    ζ_t = c_t − ½ v_t where c_t depends only on v_{t-1}, v_{t-2}. Taking
    v_t = −s·2·margin·ζ̄_t·u with s the sign of ⟨c_t, u⟩ makes the u-component
    of ζ_t at least margin·ζ̄_t in magnitude, and keeps |v_t| bounded.

    zeta_bar is a scalar or a length-n sequence of per-step thresholds.
    """
    schedule.check_horizon(n)
    if margin < 1.0:
        raise ConfigurationError(f"margin must be at least 1, got {margin}")
    A_K = np.asarray(A_K, dtype=float)
    u = np.asarray(direction, dtype=float)
    norm_u = np.linalg.norm(u)
    if norm_u == 0:
        raise ConfigurationError("attack direction must be nonzero")
    u = u / norm_u
    p = u.shape[0]
    if A_K.shape != (p, p):
        raise ConfigurationError(f"direction has {p} entries, A_K is {A_K.shape}")
    bars = np.broadcast_to(np.asarray(zeta_bar, dtype=float), (n,))

    v = np.zeros((n, p))
    shift = A_K - np.eye(p)
    for t in range(max(schedule.t_start, 2), schedule.t_stop):
        carried = 0.5 * (A_K @ v[t - 1]) - 0.5 * (shift @ v[t - 2])
        sign = 1.0 if carried @ u >= 0 else -1.0
        v[t] = -sign * 2.0 * margin * bars[t] * u
    return AttackTrace(v, schedule, AttackKind.ASSUMPTION2)


# ── CSV I/O ───────────────────────────────────────────────────────────────────

def save_trace(trace: AttackTrace, path: str) -> None:
    cols = {"t": np.arange(trace.length)}
    cols.update({f"v_{i + 1}": trace.v[:, i] for i in range(trace.p)})
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")


def load_trace(path: str, schedule: AttackSchedule, n: int, p: int,
               kind: AttackKind = AttackKind.REPLAY_FILE) -> AttackTrace:
    """
    Read columns t, v_1..v_p. Rows may cover any subset of 0..n-1; missing
    steps are zero. Rows outside the schedule window are dropped with a warning.
    """
    if not os.path.isfile(path):
        raise ConfigurationError(f"attack file not found: {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read attack file {path}") from exc

    expected = ["t"] + [f"v_{i + 1}" for i in range(p)]
    missing = [c for c in expected if c not in df.columns]
    if missing:
        raise DataError(f"attack file {path} lacks columns {missing}")
    if df[expected].isna().any().any():
        raise DataError(f"attack file {path} has empty cells")

    t = df["t"].to_numpy(dtype=int)
    if t.min(initial=0) < 0 or t.max(initial=0) >= n:
        raise DataError(f"attack file {path} has time indices outside 0..{n - 1}")

    v = np.zeros((n, p))
    v[t] = df[expected[1:]].to_numpy(dtype=float)
    outside = ~schedule.mask(n) & np.any(v != 0.0, axis=1)
    if outside.any():
        log.warning("Dropping %d attack rows outside [%d, %d)", int(outside.sum()),
                    schedule.t_start, schedule.t_stop)
        v[outside] = 0.0
    return AttackTrace(v, schedule, kind)

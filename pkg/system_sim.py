"""
system_sim.py — Closed-loop stochastic LTI plant, sub-Gaussian noise generation,
and the analysis constants derived from the system matrices.

Provides:
  - SystemModel / NoiseModel / Trajectory      : immutable plant, noise and run containers
  - make_rng()                                  : counter-based random streams keyed by (seed, stream id)
  - make_closed_loop(), simulate(), simulate_ensemble()
  - doob_decompose(), martingale_terms()        : the two-step Doob split used by the test signal
  - analysis_constants(), state_cov_bound(), stability_certificate()

Time convention: states x_0..x_T, inputs u_0..u_{T-1}, process noise w_1..w_T
with x_{t+1} = A x_t + B u_t + w_{t+1}. Row t of Trajectory.process_noise holds w_{t+1}.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy import linalg, stats

from config import PSD_TOL, POWER_MAX_ITER, POWER_TOL, TRUNCATION_LEVEL
from errors import ConfigurationError, HorizonError, NumericalError, TimeIndexError

log = logging.getLogger(__name__)

# ── Random streams ────────────────────────────────────────────────────────────
# Stream ids; a run keyed by (seed, cell, trial) draws each concern from its own stream
PROCESS_STREAM     = 0
MEASUREMENT_STREAM = 1
ATTACK_STREAM      = 2
WATERMARK_STREAM   = 3
INITIAL_STREAM     = 4
CALIBRATION_STREAM = 5

MIN_HORIZON = 3


def make_rng(master_seed: int, *stream_id: int) -> np.random.Generator:
    """Independent Philox stream for (master_seed, *stream_id)."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(s) for s in stream_id))
    return np.random.Generator(np.random.Philox(seq))


# ── Matrix helpers ────────────────────────────────────────────────────────────

def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float, ndmin=2)
    if arr.ndim != 2:
        raise ConfigurationError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def op_norm(M, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> float:
    """
    Operator 2-norm (largest singular value) by power iteration on M^T M.

    Stops when the Rayleigh quotient changes by less than tol (relative).
    Falls back to an SVD, with a warning, if max_iter is reached.
    """
    M = np.array(M, dtype=float, ndmin=2)
    if not np.all(np.isfinite(M)):
        raise NumericalError("operator norm of a non-finite matrix", shape=M.shape)
    if not M.any():
        return 0.0

    G = M.T @ M
    v = 1.0 / np.arange(1, G.shape[0] + 1)   # generic start, no zero entries
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        lam_new = float(v @ w)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            break
        v = w / norm_w
        if abs(lam_new - lam) <= tol * lam_new:
            return float(np.sqrt(lam_new))
        lam = lam_new

    log.warning("Power iteration did not settle in %d steps; using SVD", max_iter)
    return float(np.linalg.norm(M, 2))


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(M, dtype=float)))))


# ── Domain types ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SystemModel:
    """
    x_{t+1} = A x_t + B u_t + w_{t+1},  y_t = C x_t,  u_t = K x_t.

    Shapes: A (d, d), B (d, m), C (p, d), K (m, d).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray

    def __post_init__(self) -> None:
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        K = _as_matrix(self.K, "K")
        d = A.shape[0]
        if A.shape != (d, d):
            raise ConfigurationError(f"A must be square, got {A.shape}")
        if B.shape[0] != d:
            raise ConfigurationError(f"B must have {d} rows, got {B.shape}")
        m = B.shape[1]
        if C.shape[1] != d:
            raise ConfigurationError(f"C must have {d} columns, got {C.shape}")
        if K.shape != (m, d):
            raise ConfigurationError(f"K must be {(m, d)}, got {K.shape}")
        for name, arr in (("A", A), ("B", B), ("C", C), ("K", K)):
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def closed_loop(self) -> np.ndarray:
        return self.A + self.B @ self.K


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM_BOX = "uniform-box"
    TRUNCATED_GAUSSIAN = "truncated-gaussian"


# Unit-variance rescaling for the truncated standard normal
_TRUNCATED_STD = float(stats.truncnorm.std(-TRUNCATION_LEVEL, TRUNCATION_LEVEL))
_UNIFORM_HALF_WIDTH = float(np.sqrt(3.0))


@dataclass(frozen=True)
class NoiseModel:
    """
    Zero-mean sub-Gaussian vector noise with a target covariance.

    Every kind is built as factor @ z with z having i.i.d. zero-mean,
    unit-variance coordinates, so the covariance is exactly `covariance`.
    sigma_bound is the certified bound on the covariance spectral norm.
    """

    covariance: np.ndarray
    kind: NoiseKind = NoiseKind.GAUSSIAN
    sigma_bound: float | None = None
    factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        cov = _as_matrix(self.covariance, "covariance")
        n = cov.shape[0]
        if cov.shape != (n, n):
            raise ConfigurationError(f"covariance must be square, got {cov.shape}")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if not np.allclose(cov, cov.T, atol=PSD_TOL * scale, rtol=0.0):
            raise ConfigurationError("covariance must be symmetric")
        eigvals, eigvecs = linalg.eigh(cov)
        if eigvals.min() < -PSD_TOL * scale:
            raise ConfigurationError(
                f"covariance is not positive semidefinite (min eigenvalue {eigvals.min():.3e})"
            )
        eigvals = np.clip(eigvals, 0.0, None)
        factor = eigvecs * np.sqrt(eigvals)
        factor.setflags(write=False)

        spectral = float(eigvals.max()) if n else 0.0
        bound = spectral if self.sigma_bound is None else float(self.sigma_bound)
        if bound < spectral * (1.0 - 1e-9):
            raise ConfigurationError(
                f"sigma_bound {bound} is below the covariance spectral norm {spectral}"
            )
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        object.__setattr__(self, "sigma_bound", bound)
        object.__setattr__(self, "factor", factor)

    @classmethod
    def isotropic(cls, dim: int, sigma: float, kind: NoiseKind | str = NoiseKind.GAUSSIAN) -> "NoiseModel":
        """Covariance sigma * I, so the spectral-norm bound is exactly sigma."""
        if sigma < 0:
            raise ConfigurationError(f"noise level must be nonnegative, got {sigma}")
        return cls(sigma * np.eye(dim), NoiseKind(kind), float(sigma))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]


def sample_noise(model: NoiseModel, rng: np.random.Generator, size=None) -> np.ndarray:
    """
    Draw zero-mean noise with covariance model.covariance.

    size=None returns one (dim,) vector; an int or tuple prepends that shape.
    """
    if size is None:
        lead = ()
    elif isinstance(size, (int, np.integer)):
        lead = (int(size),)
    else:
        lead = tuple(size)
    shape = lead + (model.dim,)

    if model.kind is NoiseKind.GAUSSIAN:
        z = rng.standard_normal(shape)
    elif model.kind is NoiseKind.UNIFORM_BOX:
        z = rng.uniform(-_UNIFORM_HALF_WIDTH, _UNIFORM_HALF_WIDTH, shape)
    else:
        z = stats.truncnorm.rvs(
            -TRUNCATION_LEVEL, TRUNCATION_LEVEL, size=shape, random_state=rng
        ) / _TRUNCATED_STD
    return z @ model.factor.T


@dataclass(frozen=True)
class ClosedLoop:
    A_K: np.ndarray
    norm: float
    spectral_radius: float

    @property
    def schur_stable(self) -> bool:
        return self.spectral_radius < 1.0


def make_closed_loop(sys: SystemModel) -> ClosedLoop:
    """A_K = A + B K with its operator norm and spectral radius."""
    A_K = sys.closed_loop
    if not np.all(np.isfinite(A_K)):
        raise NumericalError("closed-loop matrix has non-finite entries")
    A_K.setflags(write=False)
    return ClosedLoop(A_K=A_K, norm=op_norm(A_K), spectral_radius=spectral_radius(A_K))


# ── Simulation ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray         # (T+1, d)
    inputs: np.ndarray         # (T, m)
    process_noise: np.ndarray  # (T, d), row t is w_{t+1}
    outputs: np.ndarray        # (T+1, p), honest (pre-attack)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    def noise_at(self, i: int) -> np.ndarray:
        """w_i for i in 1..T."""
        if not 1 <= i <= self.horizon:
            raise TimeIndexError(f"w_{i} is defined for 1 <= i <= {self.horizon}")
        return self.process_noise[i - 1]

    def replay_error(self, sys: SystemModel) -> float:
        """Largest |x_{t+1} - (A x_t + B u_t + w_{t+1})| over the run."""
        x = self.states
        predicted = x[:-1] @ sys.A.T + self.inputs @ sys.B.T + self.process_noise
        return float(np.max(np.abs(x[1:] - predicted))) if self.horizon else 0.0


def _initial_state(d: int, rng: np.random.Generator, x0=None, sigma0: float = 0.0) -> np.ndarray:
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.shape != (d,):
            raise ConfigurationError(f"x0 must have {d} entries, got {x0.shape}")
        return x0.copy()
    if sigma0 < 0:
        raise ConfigurationError(f"sigma0 must be nonnegative, got {sigma0}")
    if sigma0 == 0:
        return np.zeros(d)
    return np.sqrt(sigma0) * rng.standard_normal(d)


def simulate(
    sys: SystemModel,
    noise: NoiseModel,
    T: int,
    rng: np.random.Generator,
    x0=None,
    sigma0: float = 0.0,
    measurement_noise: NoiseModel | None = None,
) -> Trajectory:
    """
    Run the full-state closed loop u_t = K x_t for T steps.

    x0 fixes the initial state; otherwise x0 ~ N(0, sigma0 I) (x0 = 0 when sigma0 = 0).
    measurement_noise, if given, is added to the stored outputs.
    """
    if T < MIN_HORIZON:
        raise HorizonError(f"horizon must be at least {MIN_HORIZON}, got {T}")
    if noise.dim != sys.d:
        raise ConfigurationError(f"process noise has dimension {noise.dim}, plant has {sys.d}")

    states = np.empty((T + 1, sys.d))
    inputs = np.empty((T, sys.m))
    states[0] = _initial_state(sys.d, rng, x0, sigma0)
    w = sample_noise(noise, rng, size=T)

    for t in range(T):
        u = sys.K @ states[t]
        inputs[t] = u
        states[t + 1] = sys.A @ states[t] + sys.B @ u + w[t]

    outputs = states @ sys.C.T
    if measurement_noise is not None:
        if measurement_noise.dim != sys.p:
            raise ConfigurationError(
                f"measurement noise has dimension {measurement_noise.dim}, outputs have {sys.p}"
            )
        outputs = outputs + sample_noise(measurement_noise, rng, size=T + 1)

    for arr in (states, inputs, w, outputs):
        arr.setflags(write=False)
    return Trajectory(states=states, inputs=inputs, process_noise=w, outputs=outputs)


def simulate_ensemble(
    A_K: np.ndarray,
    noise: NoiseModel,
    T: int,
    n_runs: int,
    rng: np.random.Generator,
    sigma0: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """
    n_runs independent closed-loop runs at once.

    Returns (states (n_runs, T+1, d), process_noise (n_runs, T, d)).
    """
    d = A_K.shape[0]
    states = np.empty((n_runs, T + 1, d))
    states[:, 0] = 0.0 if sigma0 == 0 else np.sqrt(sigma0) * rng.standard_normal((n_runs, d))
    w = sample_noise(noise, rng, size=(n_runs, T))
    for t in range(T):
        states[:, t + 1] = states[:, t] @ A_K.T + w[:, t]
    return states, w


def stationary_covariance(A_K: np.ndarray, Sigma_w: np.ndarray) -> np.ndarray:
    """Solution of S = A_K S A_K^T + Sigma_w (requires Schur stability)."""
    if spectral_radius(A_K) >= 1.0:
        raise NumericalError("stationary covariance needs a Schur-stable closed loop")
    return linalg.solve_discrete_lyapunov(A_K, Sigma_w)


# ── Doob decomposition and martingale terms ───────────────────────────────────

class DoobParts(NamedTuple):
    m: np.ndarray      # martingale part  w_{t-1} + w_t
    p: np.ndarray      # predictable part (A_K - I)(x_{t-2} + x_{t-1})
    base: np.ndarray   # x_{t-2}


def doob_decompose(traj: Trajectory, t: int, A_K: np.ndarray) -> DoobParts:
    """Two-step Doob split x_t = m_t + p_t + x_{t-2}."""
    if t < 2:
        raise TimeIndexError(f"the two-step decomposition needs t >= 2, got {t}")
    if t > traj.horizon:
        raise TimeIndexError(f"t = {t} is past the horizon {traj.horizon}")
    x = traj.states
    m = traj.noise_at(t - 1) + traj.noise_at(t)
    p = (A_K - np.eye(A_K.shape[0])) @ (x[t - 2] + x[t - 1])
    return DoobParts(m=m, p=p, base=x[t - 2])


class MartingaleTerms(NamedTuple):
    d: np.ndarray       # ½(A_K m_{t-1} + m_t)
    d_bar: np.ndarray   # d_t - m_t, the cumulative martingale in the test signal
    b_bar: np.ndarray   # m_t - d_t
    q: np.ndarray       # ½(A_K p_{t-1} + p_t) - p_t, the cumulative predictable term


def martingale_terms(traj: Trajectory, t: int, A_K: np.ndarray) -> MartingaleTerms:
    if t < 3:
        raise TimeIndexError(f"martingale terms need t >= 3, got {t}")
    prev = doob_decompose(traj, t - 1, A_K)
    cur = doob_decompose(traj, t, A_K)
    d = 0.5 * (A_K @ prev.m + cur.m)
    q = 0.5 * (A_K @ prev.p + cur.p) - cur.p
    return MartingaleTerms(d=d, d_bar=d - cur.m, b_bar=cur.m - d, q=q)


def martingale_samples(
    A_K: np.ndarray, noise: NoiseModel, n: int, rng: np.random.Generator
) -> MartingaleTerms:
    """
    n i.i.d. draws of (d_t, d̄_t, b̄_t) built from three consecutive noise vectors.

    The predictable term q is state dependent and returned as zeros.
    """
    w = sample_noise(noise, rng, size=(n, 3))
    m_prev = w[:, 0] + w[:, 1]
    m_cur = w[:, 1] + w[:, 2]
    d = 0.5 * (m_prev @ A_K.T + m_cur)
    return MartingaleTerms(d=d, d_bar=d - m_cur, b_bar=m_cur - d, q=np.zeros_like(d))


def martingale_covariances(A_K: np.ndarray, Sigma_w: np.ndarray) -> dict[str, np.ndarray]:
    """Exact covariances of d_t, d̄_t and b̄_t for i.i.d. noise with covariance Sigma_w."""
    I = np.eye(A_K.shape[0])
    outer = A_K @ Sigma_w @ A_K.T
    cov_d = 0.25 * (outer + (A_K + I) @ Sigma_w @ (A_K + I).T + Sigma_w)
    cov_dbar = 0.25 * (outer + (A_K - I) @ Sigma_w @ (A_K - I).T + Sigma_w)
    return {"d": cov_d, "d_bar": cov_dbar, "b_bar": cov_dbar}


# ── Analysis constants ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AnalysisConstants:
    M: float
    M_bar: float
    sigma_dt: float
    sigma_bar: float
    h_bar: float
    norm_Acl: float
    sigma_w: float


def analysis_constants(A_K: np.ndarray, sigma_w: float) -> AnalysisConstants:
    """Threshold and bound constants for the two-step test."""
    if sigma_w < 0:
        raise ConfigurationError(f"sigma_w must be nonnegative, got {sigma_w}")
    A_K = np.array(A_K, dtype=float, ndmin=2)
    a = op_norm(A_K)
    M = 2.0 + 2.0 * a + a * a
    M_bar = 4.0 + M / 4.0 + a
    # sum_{s=t-1}^{t} ||A_K^{t-s}|| + 1 = ||A_K|| + ||I|| + 1
    h_bar = op_norm(A_K - np.eye(A_K.shape[0])) * (a + 2.0)
    values = (M, M_bar, sigma_w * M, sigma_w * M_bar, h_bar, a)
    if not all(np.isfinite(values)):
        raise NumericalError("analysis constants are not finite", norm_Acl=a, sigma_w=sigma_w)
    return AnalysisConstants(
        M=M, M_bar=M_bar, sigma_dt=sigma_w * M, sigma_bar=sigma_w * M_bar,
        h_bar=h_bar, norm_Acl=a, sigma_w=float(sigma_w),
    )


def state_cov_bound(A_K: np.ndarray, sigma0: float, sigma_w: float, t: int) -> np.ndarray:
    """
    Bounds σ_{x_0..t} on ||Cov(x_t)|| from the norm recursion

        Ā_t = Ā_{t-1} A_K,  c_t = c_{t-1} + ||Ā_{t-1}||²,  σ_{x_t} = σ₀||Ā_t||² + σ_w c_t.
    """
    if t < 0:
        raise TimeIndexError(f"t must be nonnegative, got {t}")
    A_K = np.array(A_K, dtype=float, ndmin=2)
    out = np.empty(t + 1)
    out[0] = sigma0
    A_bar = np.eye(A_K.shape[0])
    norm_prev = 1.0   # ||Ā_0||
    c = 0.0
    for i in range(1, t + 1):
        A_bar = A_bar @ A_K
        c += norm_prev ** 2
        norm_prev = op_norm(A_bar)
        out[i] = sigma0 * norm_prev ** 2 + sigma_w * c
    return out


def asymptotic_state_cov(A_K: np.ndarray, sigma_w: float) -> float:
    """σ_w / (1 - ρ(A_K)²), the diagonalizable-case limit of σ_{x_t}."""
    rho = spectral_radius(A_K)
    if rho >= 1.0:
        return float("inf")
    return sigma_w / (1.0 - rho * rho)


# ── Stability certificate ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class StabilityCertificate:
    gamma: float
    K_radius: float
    beta: float


@dataclass(frozen=True)
class CertificateUnavailable:
    reason: str
    lambda_max: float


def stability_certificate(
    A_K: np.ndarray, Sigma_w: np.ndarray
) -> StabilityCertificate | CertificateUnavailable:
    """
    Drift-condition constants (γ, K, β) from the sufficient conditions
    λ_max(A_KᵀA_K) < 1 with γ = ½√λ_min(A_KᵀA_K).

    β = max_{‖x‖≤K} ‖A_K x‖ + √tr(Σ_w) is attained along the top singular
    direction, so β = ‖A_K‖·K + √tr(Σ_w).
    """
    A_K = np.array(A_K, dtype=float, ndmin=2)
    eig = linalg.eigvalsh(A_K.T @ A_K)
    lam_min, lam_max = float(eig[0]), float(eig[-1])
    if lam_max >= 1.0:
        log.warning("No stability certificate: lambda_max(A_K^T A_K) = %.6f >= 1", lam_max)
        return CertificateUnavailable("lambda_max(A_K^T A_K) >= 1", lam_max)
    gamma = 0.5 * np.sqrt(max(lam_min, 0.0))
    if gamma == 0.0:
        log.warning("No stability certificate: A_K is singular")
        return CertificateUnavailable("A_K is singular, gamma = 0", lam_max)

    trace = float(np.trace(np.asarray(Sigma_w, dtype=float)))
    K_radius = np.sqrt(2.0 * trace) / gamma
    beta = op_norm(A_K) * K_radius + np.sqrt(trace)
    return StabilityCertificate(gamma=float(gamma), K_radius=float(K_radius), beta=float(beta))

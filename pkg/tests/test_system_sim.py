import math

import numpy as np
import pytest

from config import IP_A, IP_B
from errors import ConfigurationError, HorizonError, NumericalError, TimeIndexError
from system_sim import (
    CertificateUnavailable,
    NoiseKind,
    NoiseModel,
    StabilityCertificate,
    SystemModel,
    analysis_constants,
    asymptotic_state_cov,
    doob_decompose,
    make_closed_loop,
    make_rng,
    martingale_covariances,
    martingale_samples,
    martingale_terms,
    op_norm,
    sample_noise,
    simulate,
    simulate_ensemble,
    stability_certificate,
    state_cov_bound,
    stationary_covariance,
)
from tests.scenarios import closed_loop, system_model

ROTATION = np.array([[0.0, -0.5], [0.5, 0.0]])


# ── Norms and closed loop ─────────────────────────────────────────────────────

@pytest.mark.parametrize("shape", [(4, 4), (5, 3), (1, 6)])
def test_op_norm_matches_svd(rng, shape):
    M = rng.standard_normal(shape)
    assert op_norm(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-6)


def test_op_norm_of_zero_matrix_is_zero():
    assert op_norm(np.zeros((3, 3))) == 0.0


def test_op_norm_rejects_nonfinite():
    with pytest.raises(NumericalError):
        op_norm([[1.0, np.nan], [0.0, 1.0]])


def test_zero_gain_leaves_open_loop():
    sys = SystemModel(IP_A, IP_B, np.eye(4), np.zeros((1, 4)))
    loop = make_closed_loop(sys)
    np.testing.assert_array_equal(loop.A_K, np.asarray(IP_A))
    assert loop.spectral_radius > 1.0
    assert not loop.schur_stable


def test_feedback_only_closed_loop():
    sys = SystemModel(np.zeros((2, 2)), np.eye(2), np.eye(2), 0.5 * np.eye(2))
    loop = make_closed_loop(sys)
    np.testing.assert_allclose(loop.A_K, 0.5 * np.eye(2))
    assert loop.norm == pytest.approx(0.5)


def test_scalar_plant_is_stabilised():
    loop = make_closed_loop(system_model("scalar_unstable"))
    assert loop.A_K[0, 0] == pytest.approx(0.5)
    assert loop.schur_stable


def test_system_model_rejects_bad_shapes():
    with pytest.raises(ConfigurationError):
        SystemModel(np.eye(2), np.ones((3, 1)), np.eye(2), np.zeros((1, 2)))
    with pytest.raises(ConfigurationError):
        SystemModel(np.eye(2), np.ones((2, 1)), np.eye(2), np.zeros((2, 2)))


# ── Noise ─────────────────────────────────────────────────────────────────────

def test_noise_model_rejects_asymmetric_covariance():
    with pytest.raises(ConfigurationError):
        NoiseModel([[1.0, 0.5], [0.0, 1.0]])


def test_noise_model_rejects_indefinite_covariance():
    with pytest.raises(ConfigurationError):
        NoiseModel([[1.0, 2.0], [2.0, 1.0]])


def test_noise_model_rejects_bound_below_spectrum():
    with pytest.raises(ConfigurationError):
        NoiseModel(np.diag([0.2, 0.1]), sigma_bound=0.1)


def test_isotropic_noise_bound():
    model = NoiseModel.isotropic(3, 0.04, "uniform-box")
    assert model.sigma_bound == 0.04
    assert model.kind is NoiseKind.UNIFORM_BOX
    assert model.dim == 3


def test_zero_covariance_draws_zeros(rng):
    draws = sample_noise(NoiseModel.isotropic(2, 0.0), rng, size=100)
    assert draws.shape == (100, 2)
    assert not draws.any()


@pytest.mark.parametrize("kind", list(NoiseKind))
def test_sample_covariance_matches_target(rng, kind):
    cov = np.array([[0.02, 0.005], [0.005, 0.01]])
    n = 100_000
    x = sample_noise(NoiseModel(cov, kind), rng, size=n)
    sample = x.T @ x / n
    assert np.linalg.norm(sample - cov, 2) <= 8 * np.linalg.norm(cov, 2) / math.sqrt(n)
    assert np.all(np.abs(x.mean(axis=0)) <= 5 * np.sqrt(np.diag(cov) / n))


def test_bounded_kinds_have_bounded_support(rng):
    sigma = 0.04
    box = sample_noise(NoiseModel.isotropic(2, sigma, "uniform-box"), rng, size=10_000)
    assert np.abs(box).max() <= math.sqrt(3 * sigma) + 1e-12
    trunc = sample_noise(NoiseModel.isotropic(2, sigma, "truncated-gaussian"), rng, size=10_000)
    assert np.abs(trunc).max() <= 3 * math.sqrt(sigma) / 0.98 + 1e-12


# ── Simulation ────────────────────────────────────────────────────────────────

def test_noise_free_run_from_origin_stays_at_origin(rng):
    sys = system_model("rotation")
    traj = simulate(sys, NoiseModel.isotropic(2, 0.0), 50, rng)
    assert not traj.states.any()


def test_noise_free_scalar_run_is_geometric(rng):
    sys = system_model("scalar_unstable")
    traj = simulate(sys, NoiseModel.isotropic(1, 0.0), 20, rng, x0=[1.0])
    np.testing.assert_allclose(traj.states[:, 0], 0.5 ** np.arange(21))


def test_short_horizon_rejected(rng):
    with pytest.raises(HorizonError):
        simulate(system_model("rotation"), NoiseModel.isotropic(2, 0.01), 2, rng)


def test_noise_dimension_mismatch_rejected(rng):
    with pytest.raises(ConfigurationError):
        simulate(system_model("rotation"), NoiseModel.isotropic(3, 0.01), 10, rng)


def test_trajectory_replays_exactly(ip_system, rng):
    traj = simulate(ip_system, NoiseModel.isotropic(4, 0.001), 500, rng)
    assert traj.replay_error(ip_system) <= 1e-12
    np.testing.assert_allclose(traj.inputs, traj.states[:-1] @ ip_system.K.T)
    assert traj.states.shape == (501, 4)
    assert traj.process_noise.shape == (500, 4)


def test_noise_index_is_one_based(rng):
    traj = simulate(system_model("rotation"), NoiseModel.isotropic(2, 0.01), 10, rng)
    np.testing.assert_array_equal(traj.noise_at(1), traj.process_noise[0])
    with pytest.raises(TimeIndexError):
        traj.noise_at(0)
    with pytest.raises(TimeIndexError):
        traj.noise_at(11)


def test_same_stream_key_reproduces_run():
    sys = system_model("rotation")
    noise = NoiseModel.isotropic(2, 0.01)
    a = simulate(sys, noise, 100, make_rng(7, 0, 3))
    b = simulate(sys, noise, 100, make_rng(7, 0, 3))
    c = simulate(sys, noise, 100, make_rng(7, 0, 4))
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_long_run_second_moment(rng):
    sigma = 0.01
    traj = simulate(system_model("rotation"), NoiseModel.isotropic(2, sigma), 20_000, rng)
    second_moment = np.mean(np.sum(traj.states[100:] ** 2, axis=1))
    assert second_moment <= sigma * 2 / (1 - 0.25) * 1.1
    assert second_moment == pytest.approx(np.trace(stationary_covariance(ROTATION, sigma * np.eye(2))), rel=0.1)


def test_stationary_covariance_of_rotation():
    S = stationary_covariance(ROTATION, 0.01 * np.eye(2))
    np.testing.assert_allclose(S, 0.01 / 0.75 * np.eye(2))


def test_stationary_covariance_needs_stability():
    with pytest.raises(NumericalError):
        stationary_covariance(np.eye(2), np.eye(2))


# ── Doob decomposition ────────────────────────────────────────────────────────

def test_noise_free_decomposition_is_purely_predictable(rng):
    sys = system_model("rotation")
    traj = simulate(sys, NoiseModel.isotropic(2, 0.0), 10, rng, x0=[1.0, 0.0])
    for t in range(2, 11):
        parts = doob_decompose(traj, t, sys.closed_loop)
        assert not parts.m.any()
        np.testing.assert_allclose(parts.p, traj.states[t] - traj.states[t - 2], atol=1e-12)


def test_identity_dynamics_decomposition(rng):
    sys = system_model("identity")
    traj = simulate(sys, NoiseModel.isotropic(2, 0.01), 5, rng, x0=[0.3, -0.2])
    parts = doob_decompose(traj, 2, sys.closed_loop)
    np.testing.assert_allclose(parts.m, traj.noise_at(1) + traj.noise_at(2))
    assert not parts.p.any()
    np.testing.assert_array_equal(parts.base, traj.states[0])


def test_decomposition_reconstructs_state(ip_system, rng):
    traj = simulate(ip_system, NoiseModel.isotropic(4, 0.001), 300, rng, sigma0=0.01)
    A_K = ip_system.closed_loop
    for t in range(2, 301):
        m, p, base = doob_decompose(traj, t, A_K)
        x = traj.states[t]
        assert np.linalg.norm(m + p + base - x) <= 1e-10 * max(np.linalg.norm(x), 1e-12)


def test_decomposition_time_range(rng):
    traj = simulate(system_model("rotation"), NoiseModel.isotropic(2, 0.01), 10, rng)
    with pytest.raises(TimeIndexError):
        doob_decompose(traj, 1, ROTATION)
    with pytest.raises(TimeIndexError):
        doob_decompose(traj, 11, ROTATION)


def test_martingale_terms_from_trajectory(rng):
    traj = simulate(system_model("rotation"), NoiseModel.isotropic(2, 0.01), 10, rng)
    terms = martingale_terms(traj, 5, ROTATION)
    m_prev = traj.noise_at(3) + traj.noise_at(4)
    m_cur = traj.noise_at(4) + traj.noise_at(5)
    np.testing.assert_allclose(terms.d_bar, 0.5 * ROTATION @ m_prev - 0.5 * m_cur)
    np.testing.assert_allclose(terms.b_bar, -terms.d_bar)
    with pytest.raises(TimeIndexError):
        martingale_terms(traj, 2, ROTATION)


def test_martingale_sample_covariance_matches_exact(rng):
    Sigma_w = 0.01 * np.eye(2)
    samples = martingale_samples(ROTATION, NoiseModel(Sigma_w), 200_000, rng)
    exact = martingale_covariances(ROTATION, Sigma_w)
    for name in ("d", "d_bar"):
        x = getattr(samples, name)
        np.testing.assert_allclose(x.T @ x / x.shape[0], exact[name], atol=1e-4)
    np.testing.assert_allclose(exact["d_bar"], 0.00625 * np.eye(2))


def test_rotation_martingale_variance_within_constant():
    c = analysis_constants(ROTATION, 0.01)
    cov = martingale_covariances(ROTATION, 0.01 * np.eye(2))
    assert op_norm(cov["d"]) <= c.sigma_dt / 4
    assert op_norm(cov["d_bar"]) <= c.sigma_bar


@pytest.mark.parametrize("key", ["rotation", "half_identity", "identity", "zero", "observed"])
def test_sampled_martingale_covariances_within_constants(key):
    A_K, sigma_w = closed_loop(key), 0.01
    c = analysis_constants(A_K, sigma_w)
    samples = martingale_samples(A_K, NoiseModel.isotropic(A_K.shape[0], sigma_w), 20_000, make_rng(2, 7))
    cov = {name: np.cov(getattr(samples, name), rowvar=False) for name in ("d_bar", "b_bar")}
    np.testing.assert_allclose(cov["b_bar"], cov["d_bar"], atol=1e-12)
    assert op_norm(cov["d_bar"]) <= c.sigma_bar
    assert op_norm(cov["b_bar"]) <= sigma_w * c.M_bar


# ── Analysis constants ────────────────────────────────────────────────────────

def test_constants_for_zero_closed_loop():
    c = analysis_constants(np.zeros((2, 2)), 0.01)
    assert (c.M, c.M_bar, c.h_bar) == pytest.approx((2.0, 4.5, 2.0))
    assert c.sigma_dt == pytest.approx(0.02)
    assert c.sigma_bar == pytest.approx(0.045)


def test_constants_for_identity_closed_loop():
    c = analysis_constants(np.eye(3), 0.001)
    assert c.M == pytest.approx(5.0)
    assert c.M_bar == pytest.approx(6.25)
    assert c.h_bar == 0.0


def test_constants_for_half_identity():
    assert analysis_constants(closed_loop("half_identity"), 0.001).h_bar == pytest.approx(1.25)


def test_constants_reject_negative_noise():
    with pytest.raises(ConfigurationError):
        analysis_constants(ROTATION, -1.0)


def test_state_cov_bound_deadbeat():
    sigma = state_cov_bound(np.zeros((2, 2)), 0.0, 0.01, 10)
    assert sigma[0] == 0.0
    np.testing.assert_allclose(sigma[1:], 0.01)


def test_state_cov_bound_two_steps():
    np.testing.assert_allclose(state_cov_bound([[0.5]], 1.0, 0.1, 2), [1.0, 0.35, 0.1875])


def test_state_cov_bound_dominates_monte_carlo(rng):
    sigma_w = 0.01
    states, _ = simulate_ensemble(ROTATION, NoiseModel.isotropic(2, sigma_w), 30, 10_000, rng)
    bound = state_cov_bound(ROTATION, 0.0, sigma_w, 30)
    for t in range(1, 31):
        x = states[:, t]
        assert op_norm(x.T @ x / x.shape[0]) <= bound[t] * 1.1


def test_asymptotic_state_cov():
    assert asymptotic_state_cov(ROTATION, 0.01) == pytest.approx(0.01 / 0.75)
    assert asymptotic_state_cov(np.eye(2), 0.01) == math.inf


# ── Stability certificate ─────────────────────────────────────────────────────

def test_certificate_half_identity():
    cert = stability_certificate(0.5 * np.eye(2), np.eye(2))
    assert isinstance(cert, StabilityCertificate)
    assert cert.gamma == pytest.approx(0.25)
    assert cert.K_radius == pytest.approx(8.0)
    assert cert.beta == pytest.approx(4.0 + math.sqrt(2.0))


def test_certificate_diagonal():
    cert = stability_certificate(np.diag([0.6, 0.2]), 0.01 * np.eye(2))
    assert cert.gamma == pytest.approx(0.1)
    assert cert.K_radius == pytest.approx(2.0)
    assert cert.beta == pytest.approx(1.2 + math.sqrt(0.02))


@pytest.mark.parametrize("A_K", [np.eye(2), np.zeros((2, 2))])
def test_certificate_unavailable(A_K):
    assert isinstance(stability_certificate(A_K, np.eye(2)), CertificateUnavailable)

import logging

import numpy as np
import pandas as pd
import pytest

from attack_models import (
    AttackKind,
    AttackSchedule,
    AttackTrace,
    DeceptionParams,
    ReplayAttack,
    apply_attack,
    burst_mask,
    cumulative_adversarial_input,
    custom_sequence,
    deception_step,
    generate_deception,
    generate_intermittent,
    honesty_flags,
    is_w_step_honest,
    load_trace,
    no_attack,
    save_trace,
    synthesize_assumption2_attack,
)
from errors import ConfigurationError, DataError, TimeIndexError
from tests.scenarios import closed_loop


def constant_trace(c, schedule: AttackSchedule, n: int) -> AttackTrace:
    v = np.zeros((n, len(c)))
    v[schedule.mask(n)] = c
    return custom_sequence(v, schedule)


# ── Schedule and trace ────────────────────────────────────────────────────────

def test_schedule_window():
    s = AttackSchedule(300, 800)
    assert s.delta == 500
    assert s.active(300) and s.active(799)
    assert not s.active(299) and not s.active(800)
    assert s.mask(1000).sum() == 500


def test_schedule_rejects_reversed_window():
    with pytest.raises(ConfigurationError):
        AttackSchedule(10, 5)


def test_schedule_past_horizon():
    with pytest.raises(ConfigurationError):
        AttackSchedule(10, 50).check_horizon(40)


def test_trace_must_vanish_outside_window():
    v = np.zeros((20, 1))
    v[3] = 1.0
    with pytest.raises(DataError):
        AttackTrace(v, AttackSchedule(5, 10), AttackKind.CUSTOM_SEQUENCE)


def test_no_attack_trace():
    trace = no_attack(50, 3)
    assert trace.kind is AttackKind.NONE
    assert trace.v.shape == (50, 3)
    assert not trace.v.any()
    assert honesty_flags(trace, 2).all()


# ── Deception ─────────────────────────────────────────────────────────────────

def test_silent_deception_is_zero(rng):
    params = DeceptionParams(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
    trace = generate_deception(params, AttackSchedule(10, 40), 50, rng)
    assert not trace.v.any()


def test_noiseless_unit_gain_persists(rng):
    params = DeceptionParams(np.eye(2), np.zeros((2, 2)), 0.0)
    v = np.array([0.3, -1.2])
    for _ in range(5):
        v_next = deception_step(params, v, rng)
        np.testing.assert_array_equal(v_next, v)
        v = v_next


def test_deception_stationary_variance(rng):
    a, sigma_a = 0.5, 0.04
    n = 100_000
    trace = generate_deception(DeceptionParams.isotropic(1, sigma_a, a), AttackSchedule(0, n), n, rng)
    assert np.var(trace.v[1000:, 0]) == pytest.approx(sigma_a / (1 - a * a), rel=0.1)


def test_deception_confined_to_window(rng):
    schedule = AttackSchedule(30, 60)
    trace = generate_deception(DeceptionParams.isotropic(2, 0.1), schedule, 100, rng)
    assert trace.kind is AttackKind.DECEPTION
    assert not trace.v[~schedule.mask(100)].any()
    assert np.all(np.any(trace.v[30:60] != 0.0, axis=1))


def test_burst_pattern():
    mask = burst_mask(AttackSchedule(10, 50), 60, on=5, off=10)
    expected = np.zeros(60, dtype=bool)
    for start in (10, 25, 40):
        expected[start:start + 5] = True
    np.testing.assert_array_equal(mask, expected)


def test_burst_pattern_rejects_empty_bursts():
    with pytest.raises(ConfigurationError):
        burst_mask(AttackSchedule(0, 10), 10, on=0, off=3)


def test_intermittent_only_inside_bursts(rng):
    schedule = AttackSchedule(10, 80)
    trace = generate_intermittent(DeceptionParams.isotropic(1, 0.1), schedule, 100, rng, on=4, off=8)
    mask = burst_mask(schedule, 100, 4, 8)
    assert trace.kind is AttackKind.INTERMITTENT
    assert not trace.v[~mask].any()
    assert np.all(trace.v[mask] != 0.0)


# ── Replay and stored sequences ───────────────────────────────────────────────

def test_replay_needs_a_recording():
    with pytest.raises(ConfigurationError):
        ReplayAttack(AttackSchedule(10, 40), lag=20)


def test_replay_source_loops_the_recording():
    replay = ReplayAttack(AttackSchedule(100, 200), lag=30)
    assert [replay.source(t) for t in (100, 129, 130, 165)] == [70, 99, 70, 105 - 30]


def test_replay_injection_is_zero_outside_window():
    outputs = np.arange(40.0).reshape(20, 2)
    replay = ReplayAttack(AttackSchedule(10, 15), lag=5)
    assert not replay.injection(9, outputs).any()
    np.testing.assert_array_equal(replay.injection(12, outputs), outputs[7] - outputs[12])


def test_custom_sequence_must_respect_window():
    with pytest.raises(DataError):
        custom_sequence(np.ones((10, 1)), AttackSchedule(2, 5))


def test_saved_trace_reloads(tmp_path, rng):
    schedule = AttackSchedule(5, 25)
    trace = generate_deception(DeceptionParams.isotropic(2, 0.1), schedule, 30, rng)
    path = tmp_path / "attack.csv"
    save_trace(trace, str(path))
    loaded = load_trace(str(path), schedule, 30, 2)
    assert loaded.kind is AttackKind.REPLAY_FILE
    np.testing.assert_array_equal(loaded.v, trace.v)


def test_sparse_file_fills_missing_steps_and_drops_rows_outside(tmp_path, caplog):
    path = tmp_path / "sparse.csv"
    pd.DataFrame({"t": [2, 6, 7], "v_1": [9.0, 1.0, 2.0]}).to_csv(path, index=False)
    with caplog.at_level(logging.WARNING):
        trace = load_trace(str(path), AttackSchedule(5, 10), 12, 1, AttackKind.CUSTOM_SEQUENCE)
    expected = np.zeros(12)
    expected[[6, 7]] = [1.0, 2.0]
    np.testing.assert_array_equal(trace.v[:, 0], expected)
    assert "outside" in caplog.text


def test_file_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    pd.DataFrame({"t": [1], "v_1": [1.0]}).to_csv(path, index=False)
    with pytest.raises(DataError):
        load_trace(str(path), AttackSchedule(0, 5), 5, 2)


def test_file_not_found(tmp_path):
    with pytest.raises(ConfigurationError):
        load_trace(str(tmp_path / "missing.csv"), AttackSchedule(0, 5), 5, 1)


# ── Injection ─────────────────────────────────────────────────────────────────

def test_no_attack_leaves_outputs(rng):
    y = rng.standard_normal((30, 2))
    np.testing.assert_array_equal(apply_attack(y, no_attack(30, 2)), y)


def test_constant_injection(rng):
    schedule = AttackSchedule(10, 20)
    y = rng.standard_normal((30, 2))
    c = np.array([0.5, -0.25])
    diff = apply_attack(y, constant_trace(c, schedule, 30)) - y
    np.testing.assert_allclose(diff[10:20], np.tile(c, (10, 1)), atol=1e-15)
    assert not diff[:10].any() and not diff[20:].any()


def test_injection_shape_mismatch():
    with pytest.raises(DataError):
        apply_attack(np.zeros((30, 2)), no_attack(29, 2))


# ── Honesty ───────────────────────────────────────────────────────────────────

def test_single_step_attack_breaks_honesty_for_w_steps():
    trace = constant_trace([1.0], AttackSchedule(10, 11), 30)
    W = 3
    assert is_w_step_honest(trace, 10, W)
    assert [is_w_step_honest(trace, t, W) for t in (11, 12, 13)] == [False, False, False]
    assert is_w_step_honest(trace, 14, W)


def test_honesty_needs_a_full_window():
    with pytest.raises(TimeIndexError):
        is_w_step_honest(no_attack(10, 1), 2, 3)


def test_honesty_flags_match_scan(rng):
    schedule = AttackSchedule(20, 180)
    trace = generate_intermittent(DeceptionParams.isotropic(1, 0.1), schedule, 200, rng, on=3, off=12)
    W = 5
    flags = honesty_flags(trace, W)
    assert flags.shape == (200 - W,)
    scan = [is_w_step_honest(trace, t, W) for t in range(W, 200)]
    np.testing.assert_array_equal(flags, scan)
    assert flags.any() and not flags.all()


# ── Cumulative adversarial input ──────────────────────────────────────────────

def test_zeta_vanishes_without_attack():
    A_K = closed_loop("rotation")
    assert not cumulative_adversarial_input(no_attack(10, 2), A_K, 5).any()


def test_zeta_of_a_fresh_injection():
    c = np.array([0.4, -0.2])
    trace = constant_trace(c, AttackSchedule(5, 6), 10)
    np.testing.assert_allclose(cumulative_adversarial_input(trace, closed_loop("rotation"), 5), -0.5 * c)


def test_zeta_with_identity_dynamics(rng):
    v = np.zeros((10, 2))
    v[3:8] = rng.standard_normal((5, 2))
    trace = custom_sequence(v, AttackSchedule(3, 8))
    zeta = cumulative_adversarial_input(trace, np.eye(2), 6)
    np.testing.assert_allclose(zeta, 0.5 * (v[5] - v[6]))


def test_zeta_argument_checks():
    trace = no_attack(10, 2)
    with pytest.raises(ConfigurationError):
        cumulative_adversarial_input(trace, np.eye(3), 5)
    with pytest.raises(TimeIndexError):
        cumulative_adversarial_input(trace, np.eye(2), 1)


def test_synthesised_attack_clears_zeta_threshold():
    A_K = closed_loop("rotation")
    schedule = AttackSchedule(10, 60)
    bars = np.linspace(0.2, 0.4, 80)
    trace = synthesize_assumption2_attack([1.0, 1.0], schedule, 80, A_K, bars, margin=1.05)
    assert trace.kind is AttackKind.ASSUMPTION2
    for t in range(10, 60):
        assert np.linalg.norm(cumulative_adversarial_input(trace, A_K, t)) >= bars[t]
    assert np.linalg.norm(trace.v, axis=1).max() == pytest.approx(2 * 1.05 * bars[59])


def test_synthesised_attack_argument_checks():
    A_K = closed_loop("rotation")
    with pytest.raises(ConfigurationError):
        synthesize_assumption2_attack([0.0, 0.0], AttackSchedule(2, 5), 10, A_K, 1.0)
    with pytest.raises(ConfigurationError):
        synthesize_assumption2_attack([1.0, 0.0], AttackSchedule(2, 5), 10, A_K, 1.0, margin=0.5)

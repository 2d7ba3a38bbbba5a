import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spincount.errors import ConfigError, EstimatorInputError
from spincount.protocol import (
    EstimatorPolicy,
    RampSchedule,
    SystemSpec,
    estimate_from_counts,
    estimate_S,
    expected_counts,
    first_run,
    run_protocol,
    run_protocol_ensemble,
    universal_prediction,
    windows_for,
)
from spincount.trajectories import CountRecord


def synthetic_record(counts, schedule, **meta):
    edges = schedule.edges[: len(counts) + 1]
    jumps = []
    for a, b, n in zip(edges[:-1], edges[1:], counts):
        jumps.extend(np.linspace(a, b, int(n) + 2)[1:-1])
    return CountRecord.from_jumps(jumps, edges, seed=0, meta=meta)


def test_ladder_prediction_example():
    s = RampSchedule.ladder(1.0, 10.0, 10)
    u = universal_prediction(s, 1.0, 1.0)
    assert u.means[3] == pytest.approx(160.0)
    assert u.sigmas[3] == pytest.approx(math.sqrt(160.0))
    assert np.all(universal_prediction(s, 0.0).means == 0)


def test_linear_prediction_first_window():
    s = RampSchedule.linear(2.0, 0.5, 4)
    u = universal_prediction(s, 0.7, 1.5)
    assert u.means[0] == pytest.approx(0.7 * 4.0 * 0.5**3 / (3 * 1.5))


@given(st.floats(min_value=0.1, max_value=3), st.floats(min_value=0.1, max_value=2), st.integers(1, 30))
def test_linear_prediction_integrates_the_ramp(alpha, dt, n):
    # the window mean is the integral of eta (alpha t)^2 / kappa over the window
    s = RampSchedule.linear(alpha, dt, n)
    t0, t1 = (n - 1) * dt, n * dt
    exact = alpha**2 * (t1**3 - t0**3) / 3
    assert universal_prediction(s, 1.0).means[-1] == pytest.approx(exact, rel=1e-10)


def test_schedule_parsing_and_resolution():
    s = RampSchedule.parse("ladder:dw=2,dt=5", 8)
    assert s.kind == "ladder" and s.rate == 2 and s.resolution == 2
    assert RampSchedule.parse(s.spec(), 8) == s
    lin = RampSchedule.parse("linear:alpha=1,dt=0.5", 8)
    assert lin.resolution == 0.5
    for bad in ("ladder:dw=1", "cubic:dw=1,dt=1", "ladder:dw=x,dt=1", "ladder:dw=-1,dt=1"):
        with pytest.raises(ConfigError):
            RampSchedule.parse(bad, 3)


def test_schedule_is_monotone():
    for s in (RampSchedule.ladder(1.5, 2.0, 6), RampSchedule.linear(0.7, 1.0, 6)):
        d = s.drive()
        assert np.all(np.diff(d.omegas) >= 0)
        assert d.T == pytest.approx(s.duration)


def test_record_on_universal_mean_is_not_detected():
    s = RampSchedule.ladder(1.0, 10.0, 20)
    u = universal_prediction(s, 1.0)
    est = estimate_S(synthetic_record(np.round(u.means), s, eta=1.0, kappa=1.0), s, 1.0)
    assert not est.detected and est.S_hat is None


def test_constructed_change_point():
    s = RampSchedule.ladder(1.0, 10.0, 20)
    counts = np.round(universal_prediction(s, 1.0).means)
    counts[11:] = np.round(0.1 * counts[11:])
    est = estimate_S(synthetic_record(counts, s), s, 1.0)
    assert est.detected and est.S_hat == 12 and est.n_star == 12
    assert est.t_c == pytest.approx(110.0)
    assert est.z_scores[11] < -3


def test_consecutive_and_one_sided_rules():
    s = RampSchedule.ladder(1.0, 10.0, 20)
    counts = np.round(universal_prediction(s, 1.0).means)
    counts[8] *= 2  # a single upward outlier
    counts[14:] = 0
    assert estimate_from_counts(counts, s, 1.0).S_hat == 9
    assert estimate_from_counts(counts, s, 1.0, policy=EstimatorPolicy(two_sided=False)).S_hat == 15
    assert estimate_from_counts(counts, s, 1.0, policy=EstimatorPolicy(consecutive=2)).S_hat == 15
    assert first_run(np.array([1, 0, 1, 1, 1], bool), 3) == 2


def test_recalibration_hook():
    s = RampSchedule.ladder(1.0, 10.0, 20)
    counts = np.round(universal_prediction(s, 1.0).means)
    counts[11:] = 0
    est = estimate_from_counts(counts, s, 1.0, policy=EstimatorPolicy(recalibrate=lambda x: x + 1))
    assert est.S_hat == 13


def test_resolution_law():
    for dw in (1.0, 2.0):
        s = RampSchedule.ladder(dw, 10.0, 20)
        counts = np.round(universal_prediction(s, 1.0).means)
        counts[6:] = 0
        est = estimate_from_counts(counts, s, 1.0)
        assert est.resolution == dw and est.S_hat == 7 * dw


def test_estimate_never_exceeds_final_drive():
    s = RampSchedule.ladder(1.0, 1.0, 5)
    rng = np.random.default_rng(0)
    for _ in range(50):
        est = estimate_from_counts(rng.poisson(30, 5), s, 1.0)
        assert not est.detected or est.S_hat <= s.window_omega(5)


def test_null_false_positive_rate():
    """Exact universal means with m >= 50: per-window false alarms stay below 0.5%."""
    rng = np.random.default_rng(2024)
    s = RampSchedule.ladder(1.0, 10.0, 1000)
    u = universal_prediction(s, 1.0)
    policy = EstimatorPolicy()
    flags = []
    for _ in range(100):
        counts = rng.poisson(u.means)
        flags.append(policy.flags(counts, u.means)[u.means >= 50])
    rate = np.mean(np.concatenate(flags))
    assert np.concatenate(flags).size >= 1e5 * 0.99
    assert rate <= 0.005


def test_small_means_use_poisson_tails():
    policy = EstimatorPolicy()
    # m = 1: the normal band would flag 5 counts (z = 4); the Poisson tail does too, but 4 counts is allowed
    assert not policy.flags([4], [1.0])[0]
    assert policy.flags([7], [1.0])[0]
    assert not policy.flags([0], [1.0])[0]
    assert policy.flags([1], [0.0])[0]


def test_estimator_input_checks():
    s = RampSchedule.ladder(1.0, 10.0, 5)
    rec = synthetic_record([10, 40], s, eta=0.5, kappa=1.0)
    with pytest.raises(EstimatorInputError):
        estimate_S(rec, s, 1.0)
    with pytest.raises(EstimatorInputError):
        estimate_S(rec, RampSchedule.ladder(1.0, 5.0, 5), 0.5)
    with pytest.raises(EstimatorInputError):
        estimate_from_counts(np.zeros(6), s, 1.0)


def test_system_spec_validation():
    assert SystemSpec("sector", S=3).sz_value == -3
    assert SystemSpec("superpose", S1=4, S2=2).sz_value == 0
    for kw in (dict(kind="sector"), dict(kind="superpose", S1=3, S2=3), dict(kind="superpose", S1="3/2", S2=1),
               dict(kind="dicke", N=4, S=3), dict(kind="sector", S=2, gamma=0.1), dict(kind="blob")):
        with pytest.raises((ConfigError, ValueError)):
            SystemSpec(**kw)
    assert windows_for(SystemSpec("sector", S=10), "ladder", 1.0, 10.0) == 15


def test_expected_counts_methods_agree():
    spec = SystemSpec("sector", S=4)
    s = RampSchedule.ladder(1.0, 3.0, 7)
    a, obs = expected_counts(spec, s, 0.8, observables=["sz"])
    b, _ = expected_counts(spec, s, 0.8, method="bdf")
    np.testing.assert_allclose(a, b, rtol=1e-6)
    assert obs["sz"][0] == pytest.approx(-4.0) and obs["sz"].size == 8
    # the overdamped windows follow the universal curve
    u = universal_prediction(s, 0.8)
    assert abs(a[1] - u.means[1]) < 3 * u.sigmas[1]


def test_linear_ramp_protocol_runs():
    spec = SystemSpec("sector", S=3)
    s = RampSchedule.linear(1.0, 1.0, 6, substeps=4)
    res = run_protocol(spec, s, 1.0, seed=1)
    assert res.record.edges.size == 7
    assert res.estimate.resolution == 1.0


def test_protocol_ensemble_reproducible_and_stoppable():
    spec = SystemSpec("sector", S=4)
    s = RampSchedule.ladder(1.0, 5.0, windows_for(spec, "ladder", 1.0, 5.0))
    a = run_protocol_ensemble(spec, s, 1.0, 3, range(4))
    b = run_protocol_ensemble(spec, s, 1.0, 3, range(4), stop_after_detection=True)
    for x, y in zip(a, b):
        assert x.estimate.S_hat == y.estimate.S_hat
    assert all(r.trajectory.stopped_at is not None for r in b if r.estimate.detected)


def test_mixed_superposition_uses_density_sampler():
    spec = SystemSpec("superpose", S1=2, S2=1, mixed=True)
    s = RampSchedule.ladder(1.0, 2.0, 4)
    res = run_protocol(spec, s, 0.5, seed=0)
    assert res.record.scheme == "bernoulli"
    assert set(res.weights.weights) == {4, 2}

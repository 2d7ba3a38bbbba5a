import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
import scipy.linalg as sla
from scipy import stats

from spincount.dynamics import evolve, stationary_state
from spincount.errors import DomainError, StepSizeError
from spincount.generator import DickeSystem, SectorSystem, dicke_sector_state, sector_ket_state
from spincount.spinspace import SectorBasis, HalfInt
from spincount.trajectories import (
    CountRecord,
    Drive,
    SectorWeights,
    bin_counts,
    ensemble_mean,
    freezing_stats,
    read_records,
    run_ensemble,
    run_pi_sme,
    run_sme,
    run_sse,
    stationary_pure_sampler,
    trajectory_rng,
    write_records,
)

times = st.lists(st.floats(min_value=0.0, max_value=10.0, allow_nan=False), max_size=30, unique=True)


@given(times, st.integers(min_value=1, max_value=8))
def test_binning_conserves_clicks(jumps, n):
    edges = np.linspace(0.0, 10.0, n + 1)
    counts = bin_counts(sorted(jumps), edges)
    assert counts.sum() == sum(1 for t in jumps if t > 0.0)
    rec = CountRecord.from_jumps(sorted(jumps), edges, seed=1, index=2, meta={"eta": 0.5})
    back = CountRecord.from_json(json.loads(json.dumps(rec.to_json())))
    np.testing.assert_array_equal(back.jumps, rec.jumps)
    np.testing.assert_array_equal(back.counts, rec.counts)
    assert back.meta == rec.meta and back.index == 2


def test_clicks_on_edges_belong_to_left_window():
    assert bin_counts([1.0, 2.0], [0.0, 1.0, 2.0]).tolist() == [1, 1]


def test_count_record_validation():
    with pytest.raises(DomainError):
        CountRecord([2.0, 1.0], [0, 3], [2], seed=0)
    with pytest.raises(DomainError):
        CountRecord([0.5], [0, 1], [2], seed=0)
    with pytest.raises(DomainError):
        CountRecord.from_json({"seed": 0, "windows": [{"t0": 0, "t1": 1, "dN": 0}, {"t0": 2, "t1": 3, "dN": 0}]})


def test_records_file_roundtrip(tmp_path):
    recs = [CountRecord.from_jumps([0.3, 1.7], [0, 1, 2], seed=4, index=i) for i in (1, 0)]
    write_records(tmp_path / "r.jsonl", recs)
    back = read_records(tmp_path / "r.jsonl")
    assert [r.index for r in back] == [0, 1]


def test_streams_are_keyed_by_seed_and_index():
    system = SectorSystem((1,))
    psi = {1: SectorBasis(HalfInt(2)).ket(-1)}
    drive = Drive.constant(1.0, 5.0)
    full = run_ensemble(system, psi, drive, seed=11, indices=range(6))
    again = run_ensemble(system, psi, drive, seed=11, indices=range(6))
    assert all(np.array_equal(a.record.jumps, b.record.jumps) for a, b in zip(full, again))
    # another batch composition changes only the rounding of the batched linear algebra
    alone = run_sse(system, psi, drive, seed=11, index=4)
    assert alone.record.jumps.size == full[4].record.jumps.size
    np.testing.assert_allclose(full[4].record.jumps, alone.record.jumps, rtol=1e-12)
    assert trajectory_rng(11, 4).random() == trajectory_rng(11, 4).random()
    assert trajectory_rng(11, 4).random() != trajectory_rng(11, 5).random()


def test_results_independent_of_thread_count():
    system = SectorSystem((1,))
    rho = sector_ket_state(system.layout, 1, -1)
    drive = Drive.constant(1.0, 2.0)
    kw = dict(eta=0.5, scheme="bernoulli", sample_times=[0, 2])
    a = run_ensemble(system, rho, drive, 3, range(260), threads=1, **kw)
    b = run_ensemble(system, rho, drive, 3, range(260), threads=3, **kw)
    assert all(np.array_equal(x.record.jumps, y.record.jumps) for x, y in zip(a, b))


def test_single_emitter_waiting_times_are_exponential():
    # an excited two-level system with no drive emits once at rate kappa
    system = SectorSystem(("1/2",), kappa=2.0)
    res = run_ensemble(system, {"1/2": [1.0, 0.0]}, Drive.constant(0.0, 40.0), seed=5, indices=range(1500))
    first = np.array([r.record.jumps[0] for r in res])
    assert all(r.record.jumps.size == 1 for r in res)
    assert stats.kstest(first, "expon", args=(0, 0.5)).pvalue > 1e-3


@pytest.mark.parametrize("scheme", ["bernoulli", "waiting"])
def test_density_schemes_average_to_master_equation(scheme):
    system = SectorSystem((1,))
    rho = sector_ket_state(system.layout, 1, -1)
    t = np.linspace(0, 4, 5)
    res = run_ensemble(system, rho, Drive.constant(1.5, 4.0), seed=2, indices=range(600), eta=0.5,
                       scheme=scheme, sample_times=t)
    m, se = ensemble_mean(res, "sz")
    ref = evolve(system.liouvillian(1.5), rho, t).expect(["sz"])["sz"]
    assert np.all(np.abs(m - ref) <= 4 * np.maximum(se, 1e-3))


def test_pure_scheme_average_to_master_equation():
    system = SectorSystem((2,))
    t = np.linspace(0, 3, 4)
    res = run_ensemble(system, {2: SectorBasis(HalfInt(4)).ket(-2)}, Drive.constant(2.5, 3.0), seed=9,
                       indices=range(600), sample_times=t)
    m, se = ensemble_mean(res, "spsm")
    ref = evolve(system.liouvillian(2.5), sector_ket_state(system.layout, 2, -2), t).expect(["spsm"])["spsm"]
    assert np.all(np.abs(m - ref) <= 4 * np.maximum(se, 1e-3))


def test_local_decay_trajectories_average_to_master_equation():
    system = DickeSystem(3, 1.0, 0.3)
    rho = dicke_sector_state(3, "3/2", "1/2")
    t = np.linspace(0, 3, 4)
    res = run_pi_sme(system, rho, 0.7, Drive.constant(1.0, 3.0), seed=1, sample_times=t)
    assert res.weights.exhaustive
    ens = run_ensemble(system, rho, Drive.constant(1.0, 3.0), 1, range(500), eta=0.7, scheme="waiting",
                       sample_times=t)
    m, se = ensemble_mean(ens, "sz")
    ref = evolve(system.liouvillian(1.0), rho, t).expect(["sz"])["sz"]
    assert np.all(np.abs(m - ref) <= 4 * np.maximum(se, 1e-3))


def test_weights_conserved_without_local_decay():
    system = SectorSystem((3,))
    res = run_sme(system, sector_ket_state(system.layout, 3, 0), 0.8, Drive.constant(2.0, 5.0), seed=0,
                  sample_times=np.linspace(0, 5, 11))
    assert np.max(np.abs(res.weights.weights[6] - 1)) < 1e-8


def test_coarse_step_is_rejected():
    system = SectorSystem((5,))
    with pytest.raises(StepSizeError):
        run_sme(system, sector_ket_state(system.layout, 5, 5), 1.0, Drive.constant(1.0, 1.0), seed=0, dt=0.1)


def test_stop_rule_freezes_trajectory():
    system = SectorSystem((2,))
    drive = Drive((0, 1, 2, 3), (2.0, 2.0, 2.0))
    res = run_sse(system, {2: SectorBasis(HalfInt(4)).ket(-2)}, drive, seed=0, stop_rule=lambda c: c.size >= 1)
    assert res.stopped_at == pytest.approx(1.0)
    assert np.all(res.record.jumps <= 1.0)


def test_stationary_sampler_reproduces_stationary_state():
    system = SectorSystem((2,))
    draw = stationary_pure_sampler(system, 1.0)
    rng = np.random.default_rng(0)
    psis = [draw(rng) for _ in range(4000)]
    rho = np.mean([np.outer(p, p.conj()) for p in psis], axis=0)
    L = system.liouvillian(1.0)
    ref = L.layout.unvec(stationary_state(L).rho)[(4, 4)]
    np.testing.assert_allclose(rho, ref, atol=0.03)


def test_freezing_stats_and_weights_lookup():
    w1 = SectorWeights(np.array([0.0, 1.0]), {4: np.array([0.5, 1.0]), 2: np.array([0.5, 0.0])})
    w2 = SectorWeights(np.array([0.0, 1.0]), {4: np.array([0.5, 0.0]), 2: np.array([0.5, 1.0])})
    st_ = freezing_stats([w1, w2], 1.0)
    assert st_.mean[4] == 0.5 and st_.std[4] == 0.5 and st_.n == 2
    with pytest.raises(DomainError):
        w1.at(0.5)
    with pytest.raises(DomainError):
        freezing_stats([], 1.0)


def test_drive_validation():
    with pytest.raises(DomainError):
        Drive((0, 1), (1.0, 2.0))
    with pytest.raises(DomainError):
        Drive((0, 1), (-1.0,))
    d = Drive((0, 1, 2), (1.0, 3.0))
    assert d.omega_at(1.0) == 1.0 and d.omega_at(1.5) == 3.0


def test_pure_scheme_requires_unit_efficiency():
    with pytest.raises(DomainError):
        run_ensemble(SectorSystem((1,)), {1: [0, 0, 1]}, Drive.constant(1.0, 1.0), 0, [0], eta=0.5, scheme="sse")



class _FixedUniforms:
    def __init__(self, u):
        self.u = u

    def random(self, n):
        return np.full(n, self.u)


def test_bernoulli_step_average_is_exact_one_step_map(monkeypatch):
    import spincount.trajectories as tr

    # two bright sectors with different click rates
    system = SectorSystem((HalfInt.of(3), HalfInt.of(1)))
    rho0 = 0.5 * (sector_ket_state(system.layout, 3, 0) + sector_ket_state(system.layout, 1, 0))
    omega, eta, h = 4.0, 0.5, 0.004
    # index 0 never clicks (u = 0), index 1 always clicks (u -> 1)
    monkeypatch.setattr(tr, "trajectory_rng", lambda seed, index: _FixedUniforms(0.0 if index == 0 else 1 - 1e-15))
    no, yes = run_ensemble(system, rho0, Drive.constant(omega, h), seed=0, indices=[0, 1], eta=eta, scheme="bernoulli",
                           dt=h, sample_times=[], observables=(), keep_final=True)
    assert len(no.record.jumps) == 0 and len(yes.record.jumps) == 1
    L = system.liouvillian(omega).matrix.toarray()
    J = system.jump.matrix.toarray()
    p_no = (system.layout.trace_functional @ sla.expm((L - eta * J) * h) @ rho0).real
    average = p_no * no.final_state + (1 - p_no) * yes.final_state
    np.testing.assert_allclose(average, sla.expm(L * h) @ rho0, atol=1e-13)


class _CyclingUniforms:
    def __init__(self, values):
        self.values = np.asarray(values)

    def random(self, n):
        return np.resize(self.values, n)


def test_clicks_in_ill_conditioned_eigenbasis_keep_increasing_times(monkeypatch):
    import spincount.trajectories as tr

    system = SectorSystem((HalfInt.of(45),))
    seg = tr._PureModel(system).segment(20.0)
    assert seg.eigen and seg.cond > 1e10
    rng = np.random.default_rng(5)
    psi = rng.normal(size=(50, seg.H.shape[0])) + 1j * rng.normal(size=(50, seg.H.shape[0]))
    psi /= np.linalg.norm(psi, axis=1)[:, None]
    C, _ = seg.jump(seg.advance(seg.to_coeffs(psi), np.full(50, 0.01)))
    np.testing.assert_allclose(seg.norm2(C), 1.0, atol=1e-13)
    # a uniform just below one waits -log r / rate up to the rounding of |psi|^2
    tau = tr._solve_waiting(seg, C, np.full(50, 1.0), np.full(50, -1e-10))
    _, dn = seg.norm2_and_rate(C)
    assert np.all(tau >= 0) and np.all(tau < 1e-6 / -dn)
    # uniforms near one mixed into a run still give one click per draw at increasing times
    monkeypatch.setattr(tr, "trajectory_rng", lambda seed, index: _CyclingUniforms([0.5, 1 - 1e-12, 1 - 1e-15]))
    psi0 = np.zeros(seg.H.shape[0], dtype=complex)
    psi0[0] = 1.0
    res = run_sse(system, psi0, Drive.constant(20.0, 0.05), seed=0, sample_times=[], observables=())
    jumps = np.asarray(res.record.jumps)
    assert jumps.size > 30 and np.all(np.diff(jumps) > 0)

import math

import numpy as np
import pytest

from llspin.analysis import eigenmode_rate, fit_exponential, fit_inversion_recovery
from llspin.relaxation import RelaxationModel, assemble_liouvillian, liouvillian
from llspin.seqlang import parse_sequence, serialize_sequence
from llspin.sequences import (
    PHASE_MX,
    PHASE_X,
    PHASE_Y,
    Acquire,
    Delay,
    Filter,
    HardPulse,
    Lock,
    Propagator,
    SequenceProgram,
    SequenceRunner,
    TimingSet,
    apply_filter,
    apply_hard_pulse,
    apply_lock,
    compute_m2s_timings,
    default_timing_ranges,
    evolve_interval,
    half_period_m2s_timings,
    inversion_recovery_program,
    lock_generator,
    optimize_timings,
    preparation_events,
    preparation_objective,
    run_sequence,
    singlet_locking_program,
    tip_program,
)
from llspin.spin import (
    SpinSystem,
    coherent_hamiltonian,
    maximally_mixed,
    pcba_system,
    single_spin_operator,
    singlet_pair_population,
    singlet_pair_state,
    thermal_state,
    total_spin_operator,
)
from oracles import preparation_grid_oracle

PAIRS = ((0, 1), (3, 2))


@pytest.fixture(scope="module")
def coherent(pcba):
    return Propagator(assemble_liouvillian(coherent_hamiltonian(pcba)))


def expect(rho, op):
    return np.trace(rho @ op)


def purity(rho):
    return np.trace(rho @ rho).real


# ------------------------------------------------------------------ pulses


def test_zero_angle_pulse_is_identity(pcba):
    rho = thermal_state(pcba, 1e-3).matrix
    np.testing.assert_array_equal(apply_hard_pulse(rho, HardPulse(0.0, 1.3)), rho)


def test_pi_pulse_inverts_z(pcba):
    rho = thermal_state(pcba, 1e-3)
    iz = total_spin_operator(pcba, "z")
    out = apply_hard_pulse(rho, HardPulse(math.pi, PHASE_X))
    assert expect(out, iz).real == pytest.approx(-rho.expect(iz).real, abs=1e-15)


def test_thirty_degree_tip(pcba):
    rho = thermal_state(pcba, 1e-3)
    iz = total_spin_operator(pcba, "z")
    out = apply_hard_pulse(rho, HardPulse(math.pi / 6, PHASE_X))
    transverse = abs(expect(out, total_spin_operator(pcba, "+")))
    assert abs(transverse - 0.5 * rho.expect(iz).real) < 1e-12


def test_pulse_phase_convention(pcba):
    # x pulse turns +z to -y, y pulse turns +z to +x
    rho = thermal_state(pcba, 0.1).matrix
    out = apply_hard_pulse(rho, HardPulse(math.pi / 2, PHASE_X))
    assert expect(out, total_spin_operator(pcba, "y")).real < -0.1
    out = apply_hard_pulse(rho, HardPulse(math.pi / 2, PHASE_Y))
    assert expect(out, total_spin_operator(pcba, "x")).real > 0.1


def test_pulse_preserves_spectrum(pcba):
    rho = singlet_pair_state(pcba, PAIRS, 0.4).matrix
    out = apply_hard_pulse(rho, HardPulse(1.1, 0.7))
    np.testing.assert_allclose(np.linalg.eigvalsh(out), np.linalg.eigvalsh(rho), atol=1e-14)


@pytest.mark.parametrize("bad", [dict(angle=math.inf, phase=0.0), dict(angle=1.0, phase=math.nan)])
def test_pulse_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        HardPulse(**bad)


# --------------------------------------------------------------- evolution


def test_zero_time_is_identity(pcba, coherent):
    rho = thermal_state(pcba, 1e-3).matrix
    np.testing.assert_array_equal(evolve_interval(rho, coherent, 0.0), rho)


def test_negative_time_rejected(pcba, coherent):
    with pytest.raises(ValueError):
        evolve_interval(thermal_state(pcba, 1e-3), coherent, -1e-3)


def test_single_quantum_precession_at_190_hz():
    s = SpinSystem(2, (0.0, 190.0), ((0.0, 0.0), (0.0, 0.0)))
    l = assemble_liouvillian(coherent_hamiltonian(s))
    ix = single_spin_operator(s, 1, "x")
    rho = np.eye(4) / 4 + ix
    for t, want in ((1 / (4 * 190), 0.0), (1 / 190, 1.0), (1 / 380, -1.0), (0.37e-3, math.cos(2 * math.pi * 190 * 0.37e-3))):
        out = evolve_interval(rho, l, t)
        assert abs(expect(out, ix).real / expect(rho, ix).real - want) < 1e-9


def test_semigroup(pcba, omega0):
    l = liouvillian(pcba, RelaxationModel(4e-11, 0.02, omega0))
    rho = thermal_state(pcba, 1e-2).matrix
    a = evolve_interval(evolve_interval(rho, l, 0.013), l, 0.4)
    b = evolve_interval(rho, l, 0.413)
    assert np.max(np.abs(a - b)) < 1e-9


def test_trace_and_spectrum_without_relaxation(pcba, coherent):
    rho = singlet_pair_state(pcba, PAIRS, 0.5).matrix
    rho = apply_hard_pulse(rho, HardPulse(0.8, 0.2))
    out = evolve_interval(rho, coherent, 0.137)
    assert abs(np.trace(out) - 1) < 1e-10
    np.testing.assert_allclose(np.linalg.eigvalsh(out), np.linalg.eigvalsh(rho), atol=1e-10)


# -------------------------------------------------------------------- lock


def test_zero_amplitude_lock_is_free_evolution(pcba, omega0):
    l = liouvillian(pcba, RelaxationModel(4e-11, 0.02, omega0))
    rho = thermal_state(pcba, 1e-3).matrix
    np.testing.assert_allclose(apply_lock(rho, l, Lock(0.0, PHASE_X, 0.3)), evolve_interval(rho, l, 0.3), atol=1e-15)


def test_lock_preserves_trace(thermal_experiment):
    e = thermal_experiment
    rho = singlet_pair_state(e.system, PAIRS, 0.3).matrix
    out = apply_lock(rho, e.free_liouvillian, Lock(2000.0, PHASE_X, 3.0, 95.0))
    assert abs(np.trace(out) - 1) < 1e-10


def test_lock_offset_frame_is_exact(pcba):
    # without relaxation, lock-frame evolution plus unrotation equals a rotating-frame expm
    from scipy.linalg import expm

    from llspin.sequences import rf_operator

    h0 = coherent_hamiltonian(pcba)
    lock = Lock(300.0, PHASE_Y, 0.021, 95.0)
    rho = apply_hard_pulse(thermal_state(pcba, 0.01), HardPulse(1.0, 0.3))
    got = apply_lock(rho, assemble_liouvillian(h0), lock)
    # lab-like check: RF rotating at the offset in the original frame, stepped finely
    n_steps = 4000
    dt = lock.duration / n_steps
    out = rho.copy()
    for k in range(n_steps):
        t = (k + 0.5) * dt
        h = h0 + 2 * math.pi * lock.amplitude * rf_operator(4, lock.phase + 2 * math.pi * lock.offset * t)
        u = expm(-1j * h * dt)
        out = u @ out @ u.conj().T
    # midpoint stepping error is O(dt^2), about 2e-5 relative here
    assert np.max(np.abs(got - out)) < 1e-4 * np.max(np.abs(rho - np.eye(16) / 16))


def test_lock_decay_is_mono_exponential(thermal_experiment):
    e = thermal_experiment
    rho = e.initial_state(1e-3).matrix
    for ev in preparation_events(e.timings()):
        rho = apply_hard_pulse(rho, ev) if isinstance(ev, HardPulse) else evolve_interval(rho, e.free_liouvillian, ev.duration)
    lk = Propagator(lock_generator(e.free_liouvillian, 2000.0, PHASE_X, e.scenario.lock_offset))
    ts = np.linspace(0, 15 * math.log(1000), 40)
    y = np.array([singlet_pair_population(e.system, PAIRS, lk.apply(rho, t)) - 0.25 for t in ts])
    assert y[-1] / y[0] < 1.1e-3  # three decades
    c = np.polyfit(ts, np.log(y), 1)
    fit = np.polyval(c, ts)
    r2 = 1 - np.sum((np.log(y) - fit) ** 2) / np.sum((np.log(y) - np.log(y).mean()) ** 2)
    assert r2 > 0.999
    assert np.max(np.abs(y / np.exp(fit) - 1)) < 0.01


def test_lock_validation():
    with pytest.raises(ValueError):
        Lock(-1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        Lock(1.0, 0.0, -1.0)
    with pytest.raises(ValueError):
        Delay(-1e-3)
    with pytest.raises(ValueError):
        Acquire(0, 1e-4)


# ------------------------------------------------------------------ filter


def test_filter_keeps_singlet_order_and_drops_zeeman(pcba):
    sp = singlet_pair_state(pcba, PAIRS, 0.3).matrix
    np.testing.assert_allclose(apply_filter(sp, Filter()), sp, atol=1e-13)
    th = thermal_state(pcba, 0.1).matrix
    np.testing.assert_allclose(apply_filter(th, Filter()), np.eye(16) / 16, atol=1e-13)


def test_filter_is_a_projection(pcba):
    rng = np.random.default_rng(5)
    a = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    once = apply_filter(a, Filter())
    np.testing.assert_allclose(apply_filter(once, Filter()), once, atol=1e-12)


def test_unknown_filter_kind():
    with pytest.raises(ValueError):
        Filter("t11")


# ---------------------------------------------------------------- timings


def test_formula_timings():
    t = compute_m2s_timings(8.0, 190.0)
    assert t.t1 == 0.03125
    assert t.t2 == pytest.approx(0.03651, abs=5e-6)
    assert t.t3 == pytest.approx(0.00263, abs=5e-6)


def test_timing_scaling():
    a, b = compute_m2s_timings(8.0, 190.0), compute_m2s_timings(16.0, 380.0)
    for k in ("t1", "t2", "t3"):
        assert getattr(b, k) == pytest.approx(getattr(a, k) / 2, rel=1e-15)


@pytest.mark.parametrize("args", [(0.0, 190.0), (8.0, -1.0), (-8.0, 190.0)])
def test_timings_reject_non_positive(args):
    with pytest.raises(ValueError):
        compute_m2s_timings(*args)
    with pytest.raises(ValueError):
        half_period_m2s_timings(*args)


def test_timing_set_validation():
    with pytest.raises(ValueError):
        TimingSet(0.0, 1.0, 1.0)


def test_formula_timings_encode_almost_nothing(pcba, coherent):
    # the full-period echo refocuses the shift difference
    rho = thermal_state(pcba, 1e-3)
    assert abs(preparation_objective(pcba, coherent, compute_m2s_timings(8, 190), rho)) < 1e-6
    assert preparation_objective(pcba, coherent, half_period_m2s_timings(8, 190), rho) > 0.49e-3


def test_optimizer_degenerate_range(pcba, coherent):
    t = compute_m2s_timings(8.0, 190.0)
    res = optimize_timings(pcba, coherent, thermal_state(pcba, 1e-3), [(t.t1, t.t1), (t.t2, t.t2), (t.t3, t.t3)])
    assert res.timings == t


def test_optimizer_rejects_empty_range(pcba, coherent):
    with pytest.raises(ValueError):
        optimize_timings(pcba, coherent, thermal_state(pcba, 1e-3), [(0.03, 0.02), (0.03, 0.04), (1e-3, 2e-3)])


def test_optimizer_beats_formula_and_grid_oracle(pcba, coherent):
    rho = thermal_state(pcba, 1e-3)
    ranges = default_timing_ranges(8.0, 190.0)
    formula = compute_m2s_timings(8.0, 190.0)
    res = optimize_timings(pcba, coherent, rho, ranges, formula)
    assert res.objective >= preparation_objective(pcba, coherent, formula, rho)
    assert res.objective == pytest.approx(preparation_objective(pcba, coherent, res.timings, rho), rel=1e-12)
    oracle = preparation_grid_oracle(4, pcba.offsets_hz, pcba.j_hz, PAIRS, ranges, 31, 1e-3)
    assert res.objective >= 0.999 * oracle


@pytest.mark.parametrize("phi", [0.4, math.pi / 2, 2.5])
def test_objective_invariant_under_global_phase(pcba, coherent, phi):
    rho = thermal_state(pcba, 1e-3)
    t = half_period_m2s_timings(8, 190)
    base = preparation_objective(pcba, coherent, t, rho)
    assert preparation_objective(pcba, coherent, t, rho, phase_offset=phi) == pytest.approx(base, rel=1e-10)


# ----------------------------------------------------------------- programs


def test_locking_program_layout():
    t = half_period_m2s_timings(8, 190)
    prog = singlet_locking_program(t, lock_duration=2.0, lock_offset=95.0)
    kinds = [type(e).__name__ for e in prog.events]
    assert kinds == ["HardPulse", "Delay", "HardPulse", "Delay", "HardPulse", "Delay", "Lock",
                     "Delay", "HardPulse", "Delay", "HardPulse", "Delay", "Acquire"]
    pre = sum(e.duration for e in prog.events[:6] if isinstance(e, Delay))
    assert pre == pytest.approx(t.t1 + t.t2 + t.t3, rel=1e-15)
    assert prog.duration == pytest.approx(2 * (t.t1 + t.t2 + t.t3) + 2.0, rel=1e-15)
    assert [e.phase for e in prog.events if isinstance(e, HardPulse)][:3] == [PHASE_X, PHASE_Y, PHASE_MX]


def test_filter_inserted_after_lock():
    prog = singlet_locking_program(half_period_m2s_timings(8, 190), t00_filter=True)
    i = next(k for k, e in enumerate(prog.events) if isinstance(e, Lock))
    assert isinstance(prog.events[i + 1], Filter)


@pytest.mark.parametrize("filt", [False, True])
def test_locking_program_round_trips_through_dsl(filt):
    prog = singlet_locking_program(half_period_m2s_timings(8, 190), lock_duration=1.5, lock_offset=95.0, t00_filter=filt)
    back = parse_sequence(serialize_sequence(prog))
    assert back.events == prog.events


def test_unitary_round_trip(pcba, coherent):
    rho = thermal_state(pcba, 1e-3)
    runner = SequenceRunner(coherent.generator)
    ref = runner.run(SequenceProgram((HardPulse(math.pi / 2, PHASE_X), Acquire(1, 1e-4))), rho).first
    got = runner.run(singlet_locking_program(half_period_m2s_timings(8, 190), lock_duration=0.0), rho).first
    assert abs(got) / abs(ref) >= 0.98


def test_inversion_recovery_limits(pcba, thermal_experiment):
    l = assemble_liouvillian(coherent_hamiltonian(pcba))
    rho = thermal_state(pcba, 1e-3)
    eq = run_sequence(pcba, l, SequenceProgram((HardPulse(math.pi / 2, PHASE_X), Acquire(1, 1e-4))), rho).first
    inv = run_sequence(pcba, l, inversion_recovery_program(0.0), rho).first
    assert abs(inv / eq + 1) < 1e-12
    e = thermal_experiment
    eq = e.runner.run(SequenceProgram((HardPulse(math.pi / 2, PHASE_X), Acquire(1, 1e-4))), e.equilibrium_state()).first
    late = e.runner.run(inversion_recovery_program(200.0), e.equilibrium_state()).first
    assert abs(late / eq - 1) < 1e-6


def test_inversion_recovery_fit_matches_eigenmode(thermal_experiment):
    e = thermal_experiment
    grid = np.linspace(0, 30, 31)
    curve = e.sweep("ir_delay", grid)
    t1_fit = fit_inversion_recovery(curve).lifetime
    t1_mode = eigenmode_rate(e.free_liouvillian, total_spin_operator(e.system, "z")).rate
    t1_mode = 1 / t1_mode
    assert t1_fit == pytest.approx(t1_mode, rel=0.01)


def test_lock_series_slower_than_recovery(thermal_experiment):
    e = thermal_experiment
    ts = fit_exponential(e.sweep("lock_duration", np.linspace(0, 60, 31))).lifetime
    t1 = fit_inversion_recovery(e.sweep("ir_delay", np.linspace(0, 30, 31))).lifetime
    assert ts > t1


def test_encoding_linear_in_polarization(pcba, coherent):
    t = half_period_m2s_timings(8, 190)
    vals = [preparation_objective(pcba, coherent, t, thermal_state(pcba, p)) / p for p in (1e-4, 1e-3, 1e-2)]
    assert min(vals) > 0
    assert (max(vals) - min(vals)) / np.mean(vals) < 0.01


# ------------------------------------------------------------------ runner


def test_empty_program(pcba, coherent):
    rho = thermal_state(pcba, 1e-3).matrix
    res = run_sequence(pcba, coherent.generator, SequenceProgram(()), rho)
    np.testing.assert_array_equal(res.final, rho)
    assert res.samples.size == 0
    with pytest.raises(ValueError):
        res.first


def test_two_delays_equal_one(pcba, omega0):
    l = liouvillian(pcba, RelaxationModel(4e-11, 0.02, omega0))
    rho = apply_hard_pulse(thermal_state(pcba, 1e-3), HardPulse(1.0, 0.0))
    a = run_sequence(pcba, l, SequenceProgram((Delay(0.07), Delay(0.07))), rho).final
    b = run_sequence(pcba, l, SequenceProgram((Delay(0.14),)), rho).final
    assert np.max(np.abs(a - b)) < 1e-10


def test_thirty_degree_readout_ratio(pcba, coherent):
    rho = thermal_state(pcba, 1e-3)
    s30 = run_sequence(pcba, coherent.generator, tip_program(30.0), rho).first
    s90 = run_sequence(pcba, coherent.generator, tip_program(90.0), rho).first
    assert abs(s30 / s90 - 0.5) < 1e-12


def test_multiple_acquires_rejected():
    with pytest.raises(ValueError):
        SequenceProgram((Acquire(1, 1e-4), Acquire(1, 1e-4)))


def test_dimension_mismatch(pcba, coherent):
    with pytest.raises(ValueError):
        run_sequence(pcba, coherent.generator, SequenceProgram(()), np.eye(4) / 4)
    small = SpinSystem(2, (0.0, 1.0), ((0, 0), (0, 0)))
    with pytest.raises(ValueError):
        run_sequence(small, coherent.generator, SequenceProgram(()), np.eye(16) / 16)


def test_acquire_dwell_grid(pcba, coherent):
    rho = apply_hard_pulse(thermal_state(pcba, 1e-3), HardPulse(math.pi / 2, PHASE_Y))
    res = run_sequence(pcba, coherent.generator, SequenceProgram((Acquire(8, 2e-4),)), rho)
    np.testing.assert_allclose(res.times, np.arange(8) * 2e-4)
    assert res.samples.shape == (8,)


def test_purity_conserved_without_relaxation(pcba, coherent):
    rho = thermal_state(pcba, 0.2).matrix
    prog = singlet_locking_program(half_period_m2s_timings(8, 190), lock_duration=0.5, lock_offset=95.0)
    out = SequenceRunner(coherent.generator).run(prog, rho).final
    assert abs(purity(out) - purity(rho)) < 1e-9


def test_runs_are_bit_identical(thermal_experiment):
    grid = [0.0, 5.0, 10.0]
    a = thermal_experiment.sweep("lock_duration", grid)
    b = thermal_experiment.sweep("lock_duration", grid)
    np.testing.assert_array_equal(a.amplitudes, b.amplitudes)


def test_mixed_state_baseline(pcba):
    assert singlet_pair_population(pcba, PAIRS, maximally_mixed(pcba).matrix) == pytest.approx(0.25, abs=1e-15)
    assert pcba_system().n_spins == 4

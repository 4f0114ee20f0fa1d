import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from seqmon import analytics
from seqmon.errors import DimensionMismatch, InvalidParam, NumericalError
from seqmon.model import GaussianModel, HypothesisPair, build_extended, preset_frequency_scaled
from seqmon.solvers import riccati_steady_state
from seqmon.trajectory import (FilterStepper, GaussianLlrStepper, InitPolicy, NoiseStream, filter_from_record,
                               filter_step, fixed_batch, gap_is_deterministic, initial_state,
                               llr_clock_increments, load_record, make_stepper, simulate_fixed, simulate_sprt,
                               sprt_batch, step, synthesize_record)

from conftest import scalar_model


def test_noise_stream_reproducible_and_scaled():
    a = NoiseStream(3, 7, 0.01).increments(20000, 2)
    b = NoiseStream(3, 7, 0.01).increments(20000, 2)
    np.testing.assert_array_equal(a, b)
    assert np.var(a) == pytest.approx(0.01, rel=0.03)
    assert not np.array_equal(a, NoiseStream(3, 8, 0.01).increments(20000, 2))


def test_expeuler_matches_direct_exponential():
    mod = scalar_model(a=-2.0, b=0.7)
    sig = riccati_steady_state(mod)
    dt = 0.3
    P, K, c = filter_step(mod, sig, dt)
    F = mod.A - mod.chi(sig) @ mod.C
    np.testing.assert_allclose(P, expm(F * dt), rtol=1e-12)
    # integral of e^{Fs} ds for diagonal F
    f = F[0, 0]
    integ = (math.exp(f * dt) - 1) / f
    np.testing.assert_allclose(c, [integ * 0.7, 0.0], rtol=1e-12)
    np.testing.assert_allclose(K, integ / dt * mod.chi(sig), rtol=1e-12)


def test_euler_and_expeuler_agree_for_small_dt(damping):
    mod = damping.model1
    sig = riccati_steady_state(mod)
    e = filter_step(mod, sig, 1e-7, "euler")
    x = filter_step(mod, sig, 1e-7, "expeuler")
    for u, v in zip(e, x):
        np.testing.assert_allclose(u, v, rtol=1e-4, atol=1e-12)
    with pytest.raises(InvalidParam):
        filter_step(mod, sig, 1e-3, "rk45")


def test_single_step_api_matches_batch_kernel(damping):
    dt, n = 1e-4, 300
    sys = build_extended(damping, 1)
    noise = NoiseStream(11, 2, dt)
    state = initial_state(sys)
    dw = noise.increments(n, damping.C.shape[0])
    for i in range(n):
        state = step(state, sys, dt, dw[i])
    _, ells = simulate_fixed(sys, n * dt, [n * dt], dt, noise)
    assert state.ell == pytest.approx(ells[0], rel=1e-12)
    assert state.t == pytest.approx(n * dt)


def test_step_rejects_bad_noise(damping):
    sys = build_extended(damping, 0)
    with pytest.raises(DimensionMismatch):
        step(initial_state(sys), sys, 1e-4, [0.0])


def test_results_independent_of_batching(damping):
    dt = 1e-4
    st = make_stepper(damping, 1, dt, 20000)
    streams = [NoiseStream(5, i, dt) for i in range(12)]
    whole = sprt_batch(st, 3.0, 3.0, 2.0, streams)
    parts = [sprt_batch(st, 3.0, 3.0, 2.0, streams[i:i + 5]) for i in (0, 5, 10)]
    for f in ("tau", "decision", "ell_final"):
        np.testing.assert_array_equal(getattr(whole, f), np.concatenate([getattr(p, f) for p in parts]))


def test_label_swap_negates_llr_exactly(damping):
    dt, T = 1e-4, 0.3
    times = np.linspace(0.01, T, 30)
    streams = [NoiseStream(9, i, dt) for i in range(8)]
    _, a, _ = fixed_batch(make_stepper(damping, 1, dt, 3000), T, times, streams)
    _, b, _ = fixed_batch(make_stepper(damping.swapped(), 0, dt, 3000), T, times, streams)
    np.testing.assert_array_equal(a, -b)


def test_record_round_trip(damping):
    dt, n = 1e-4, 4000
    noise = NoiseStream(4, 1, dt)
    rec = synthesize_record(damping, 1, dt, n, noise)
    ell = filter_from_record(damping, rec, dt)
    times = np.arange(1, n + 1) * dt
    _, direct = simulate_fixed(build_extended(damping, 1), n * dt, times, dt, noise)
    np.testing.assert_allclose(ell[1:], direct, rtol=1e-8, atol=1e-10)


def test_sprt_outcome_fields(damping):
    out = simulate_sprt(build_extended(damping, 1), (4.6, 4.6), 1e-4, 10.0, NoiseStream(0, 3, 1e-4))
    assert out.hit in ("upper", "lower")
    assert out.decision == (1 if out.hit == "upper" else 0)
    assert 0 <= out.overshoot < 0.5
    assert abs(out.ell_final) >= 4.6


def test_crossing_time_interpolated_within_step(damping):
    dt = 1e-3
    res = sprt_batch(make_stepper(damping, 1, dt, 10000), 2.0, 2.0, 10.0, [NoiseStream(1, i, dt) for i in range(50)])
    # tau is not forced onto the grid
    assert np.any(np.abs(res.tau / dt - np.round(res.tau / dt)) > 1e-6)


def test_timeout_reports_undecided(damping):
    dt = 1e-4
    res = sprt_batch(make_stepper(damping, 1, dt, 100), 50.0, 50.0, 0.01, [NoiseStream(0, 0, dt)])
    assert res.decision[0] == -1 and res.tau[0] == pytest.approx(0.01)
    assert np.isfinite(res.ell_final[0])


def test_transient_init_runs_and_differs(damping):
    dt, T = 1e-4, 0.05
    streams = [NoiseStream(2, i, dt) for i in range(4)]
    _, a, _ = fixed_batch(make_stepper(damping, 1, dt, 500, InitPolicy.TRANSIENT), T, [T], streams)
    _, b, _ = fixed_batch(make_stepper(damping, 1, dt, 500), T, [T], streams)
    assert np.all(np.isfinite(a)) and not np.array_equal(a, b)


def test_blow_up_is_flagged_not_raised():
    # plain Euler with omega^2 dt >> gamma is unstable for this preset
    pair = preset_frequency_scaled()
    st = make_stepper(pair, 1, 2e-3, 5000, scheme="euler")
    _, out, failed = fixed_batch(st, 10.0, [10.0], [NoiseStream(0, 0, 2e-3)])
    assert failed[0]


def test_make_stepper_selection(damping, force):
    assert isinstance(make_stepper(force, 1, 0.05, 10), GaussianLlrStepper)
    assert isinstance(make_stepper(force, 1, 1e-4, 10, scheme="expeuler"), FilterStepper)
    assert isinstance(make_stepper(damping, 1, 1e-4, 10), FilterStepper)
    with pytest.raises(InvalidParam):
        make_stepper(damping, 1, 1e-4, 10, scheme="gaussian")
    with pytest.raises(InvalidParam):
        make_stepper(damping, 1, 1e-4, 10, scheme="bogus")


def test_unstable_unobservable_model_raises():
    # no readout and an unstable A: the filter covariance has no steady state
    unstable = GaussianModel(A=np.eye(2), b=np.zeros(2), C=np.zeros((1, 2)), D=np.eye(2), Gamma=np.zeros((2, 1)))
    pair = HypothesisPair(unstable, GaussianModel(A=2 * np.eye(2), b=np.zeros(2), C=np.zeros((1, 2)),
                                                  D=np.eye(2), Gamma=np.zeros((2, 1))))
    with pytest.raises(NumericalError):
        make_stepper(pair, 1, 1e-3, 10, scheme="expeuler")


def test_gap_detection(damping, force):
    assert gap_is_deterministic(force) and not gap_is_deterministic(damping)
    with pytest.raises(InvalidParam):
        llr_clock_increments(damping, 1e-3, 10)


def test_clock_matches_ode_integral(force):
    # oracle: integrate the gap ODE and 1/2 |C gap|^2 with an adaptive solver
    mod = force.model0
    sig = riccati_steady_state(mod)
    F = mod.A - mod.chi(sig) @ mod.C
    db = force.model1.b - force.model0.b
    CtC = mod.C.T @ mod.C

    def rhs(t, y):
        g = y[:2]
        return np.concatenate([F @ g + db, [0.5 * g @ CtC @ g]])

    T = 0.02
    sol = solve_ivp(rhs, (0, T), np.zeros(3), rtol=1e-12, atol=1e-16)
    clock = llr_clock_increments(force, 1e-3, 20)
    assert clock.sum() == pytest.approx(sol.y[2, -1], rel=1e-8)


def test_clock_step_independent_and_tends_to_drift(force):
    coarse = llr_clock_increments(force, 1.0, 50)
    fine = llr_clock_increments(force, 0.05, 1000).reshape(50, 20).sum(axis=1)
    np.testing.assert_allclose(coarse, fine, rtol=1e-10)
    assert coarse[-1] == pytest.approx(analytics.llr_drift(force, 1), rel=1e-9)


def test_load_record_formats(tmp_path):
    dt = 0.01
    t = np.arange(5) * dt
    dy = np.arange(10.0).reshape(5, 2)
    arr = np.column_stack([t, dy])
    np.savetxt(tmp_path / "r.csv", arr, delimiter=",", header="t,a,b")
    np.save(tmp_path / "r.npy", arr)
    for name in ("r.csv", "r.npy"):
        got, got_dt = load_record(tmp_path / name)
        np.testing.assert_allclose(got, dy)
        assert got_dt == pytest.approx(dt)
    bad = arr.copy()
    bad[3, 0] = 0.5
    np.save(tmp_path / "bad.npy", bad)
    with pytest.raises(InvalidParam):
        load_record(tmp_path / "bad.npy")


def test_filter_from_record_checks_columns(damping):
    with pytest.raises(DimensionMismatch):
        filter_from_record(damping, np.zeros((10, 3)), 1e-3)
    assert filter_from_record(damping, np.zeros((0, 2)), 1e-3).tolist() == [0.0]

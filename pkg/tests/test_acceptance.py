"""End-to-end acceptance checks.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers,
then asserts.  Runtime is a few minutes on one core.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate

from seqmon import analytics, montecarlo as mc
from seqmon.model import build_extended, preset_damping, preset_force, preset_frequency_scaled
from seqmon.testing import SprtConfig, wald_error_bounds
from seqmon.trajectory import NoiseStream, filter_from_record, fixed_batch, make_stepper, synthesize_record

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok
    return emit


def _seq_vs_det(pair, dt, seed, n=4000, eps=1e-2):
    """Pooled SPRT mean time and the fixed-horizon time reaching the same error."""
    mu = analytics.asymptotic_drift(pair)
    cfg = SprtConfig.strong(eps)
    t_max = 20 * max(analytics.mean_stopping_time(mu, cfg.a0, cfg.a1))
    st = mc.run_sprt_ensemble(pair, cfg, n, dt, t_max, seed)
    tbar = st.tau_mean_pooled
    times = np.linspace(0, 5 * tbar, 101)[1:]
    pts = mc.deterministic_sweep(pair, times, n, dt, seed + 1)
    t_det = mc.det_time_to_error(pts, eps)
    return st, tbar, t_det


# 1 ---------------------------------------------------------------------------

def test_iid_advantage_factor(report):
    t0 = time.perf_counter()
    mu, eps, n = 0.5, 1e-3, 20000
    a = math.log((1 - eps) / eps)
    st = mc.iid_sprt_ensemble(mu, a, a, n, 1e-3, 200.0, 101)
    tbar = st.tau_mean_pooled
    pred = -math.log(eps) / mu
    times = np.arange(1, 1201) * 0.05
    t_det = mc.det_time_to_error(mc.iid_deterministic_sweep(mu, times, n, 0.05, 102), eps)
    runtime = time.perf_counter() - t0
    ok_tau = abs(tbar - pred) <= 0.10 * pred
    ok_det = abs(t_det - 4 * tbar) <= 0.20 * 4 * tbar
    ok_rt = runtime < 60
    report(1, ok_tau and ok_det and ok_rt,
           f"tau_bar={tbar:.3f} vs -log(eps)/mu={pred:.3f} ({'ok' if ok_tau else 'off'} at 10%); "
           f"T_det={t_det:.2f} vs 4*tau_bar={4 * tbar:.2f} ({'ok' if ok_det else 'off'} at 20%, "
           f"exact finite-eps ratio {analytics.iid_summary(analytics.IidGaussianSpec.from_mu(mu), eps)['ratio_exact']:.3f}); "
           f"runtime {runtime:.1f}s")
    assert ok_tau and ok_rt
    assert ok_det


# 2 ---------------------------------------------------------------------------

def test_damping_drift_agreement(report):
    pair = preset_damping()
    mu = analytics.asymptotic_drift(pair)
    dt, n, T = 1e-4, 4000, 1.0
    times = np.linspace(0.2, T, 17)
    slopes, ok_mc = [], True
    for k in (0, 1):
        st = make_stepper(pair, k, dt, 10000)
        _, ells, failed = fixed_batch(st, T, times, [NoiseStream(202, i, dt) for i in range(n)])
        slope = abs(np.polyfit(times, ells[~failed].mean(axis=0), 1)[0])
        slopes.append(slope)
        ok_mc &= abs(slope - mu[k]) <= 0.05 * mu[k]
    cf = analytics.damping_closed_forms()
    rel = abs(cf.mu1 - mu[1]) / mu[1]
    ok_cf = rel <= 1e-6
    report(2, ok_mc and ok_cf,
           f"MC slopes ({slopes[0]:.4f}, {slopes[1]:.4f}) vs mu ({mu[0]:.4f}, {mu[1]:.4f}) at 5%; "
           f"closed-form mu1 rel diff {rel:.2e}")
    assert ok_mc and ok_cf


# 3 ---------------------------------------------------------------------------

def test_sequential_vs_deterministic_damping(report):
    t0 = time.perf_counter()
    st, tbar, t_det = _seq_vs_det(preset_damping(), 1e-4, 303)
    ratio = t_det / tbar
    ok = 2.5 <= ratio <= 4.0
    report(3, ok, f"tau_bar={tbar:.4f}s, P_err={st.p_err.point:.4f}, T_det(1e-2)={t_det:.4f}s, "
                  f"ratio={ratio:.3f} (target [2.5, 4.0]); runtime {time.perf_counter() - t0:.0f}s")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_certification(report):
    pair = preset_damping()
    parts, ok = [], True
    for i, eps in enumerate((0.05, 0.01)):
        cfg = SprtConfig.strong(eps)
        st = mc.run_sprt_ensemble(pair, cfg, 4000, 1e-4, 30.0, 404 + i)
        pred0, pred1 = wald_error_bounds(cfg.a0, cfg.a1)
        ok_cert = st.p_err.ci_lo <= eps
        ok_a0 = st.alpha0.ci_lo <= pred0 <= st.alpha0.ci_hi
        ok_a1 = st.alpha1.ci_lo <= pred1 <= st.alpha1.ci_hi
        ok &= ok_cert and ok_a0 and ok_a1
        parts.append(f"eps={eps}: P_err={st.p_err.point:.4f} [{st.p_err.ci_lo:.4f}, {st.p_err.ci_hi:.4f}], "
                     f"alpha0={st.alpha0.point:.4f} [{st.alpha0.ci_lo:.4f}, {st.alpha0.ci_hi:.4f}] "
                     f"alpha1={st.alpha1.point:.4f} [{st.alpha1.ci_lo:.4f}, {st.alpha1.ci_hi:.4f}] "
                     f"vs predicted {pred0:.4f}")
    report(4, ok, "; ".join(parts))
    assert ok


# 5 and 6 share the Monte Carlo variance rates ------------------------------------

@pytest.fixture(scope="module")
def damping_nu():
    pair = preset_damping()
    return tuple(analytics.variance_rate(pair, k, 3.0, N=2000, seed=505 + k, dt=1e-4, t_start=0.5)[0]
                 for k in (0, 1))


def test_stopping_time_law(report, damping_nu):
    pair = preset_damping()
    mu = analytics.asymptotic_drift(pair)
    cfg = SprtConfig.strong(1e-2)
    st = mc.run_sprt_ensemble(pair, cfg, 20000, 1e-4, 30.0, 515, hypotheses=(1,))
    _, ks = mc.stopping_histogram(st, (mu[1], damping_nu[1], cfg.a1))
    ok = ks < 0.05
    report(5, ok, f"h1 ensemble n={st.decided_tau(1).size}, KS={ks:.4f} vs IG(mu1={mu[1]:.4f}, "
                  f"sigma2=nu1={damping_nu[1]:.4f}, a={cfg.a1:.4f}) (limit 0.05)")
    assert ok


def test_gaussian_llr_violation(report, damping_nu):
    mu = analytics.asymptotic_drift(preset_damping())
    damp = analytics.gaussian_llr_consistency(mu[0], mu[1], *damping_nu)
    spec = analytics.IidGaussianSpec.from_mu(0.5)
    iid = analytics.gaussian_llr_consistency(spec.mu, spec.mu, spec.nu, spec.nu)
    gap = damp.details["mu_gap_rel"]
    ok = (not damp.consistent) and gap > 0.01 and iid.consistent
    report(6, ok, f"damping {'Consistent' if damp else 'Violated'} (|mu0-mu1|/max={gap:.3f}, "
                  f"nu=({damping_nu[0]:.3f}, {damping_nu[1]:.3f}) vs 2mu=({2 * mu[0]:.3f}, {2 * mu[1]:.3f})); "
                  f"iid {'Consistent' if iid else 'Violated'}")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_martingale_and_symmetry(report):
    pair = preset_damping()
    dt, T, n = 1e-4, 0.5, 4000
    st = make_stepper(pair, 1, dt, 5000)
    _, ells, _ = fixed_batch(st, T, [T], [NoiseStream(707, i, dt) for i in range(n)])
    w = np.exp(-ells[:, 0])
    sem = w.std(ddof=1) / math.sqrt(n)
    ok_mart = abs(w.mean() - 1.0) <= 5 * sem

    times = np.linspace(0.01, T, 50)
    streams = [NoiseStream(708, i, dt) for i in range(64)]
    _, a, _ = fixed_batch(make_stepper(pair, 1, dt, 5000), T, times, streams)
    _, b, _ = fixed_batch(make_stepper(pair.swapped(), 0, dt, 5000), T, times, streams)
    ok_swap = np.array_equal(a, -b)

    noise = NoiseStream(709, 0, dt)
    rec = synthesize_record(pair, 1, dt, 5000, noise)
    from_rec = filter_from_record(pair, rec, dt)[1:]
    grid = np.arange(1, 5001) * dt
    _, direct, _ = fixed_batch(make_stepper(pair, 1, dt, 5000), T, grid, [noise])
    rel = float(np.max(np.abs(from_rec - direct[0])) / np.max(np.abs(direct[0])))
    ok_rec = rel <= 1e-8
    report(7, ok_mart and ok_swap and ok_rec,
           f"E[exp(-l_T)]={w.mean():.4f} +/- {sem:.4f} (|dev|/SEM={abs(w.mean() - 1) / sem:.2f}); "
           f"label swap exact={ok_swap}; record vs simulate max rel diff {rel:.1e}")
    assert ok_mart and ok_swap and ok_rec


# 8 ---------------------------------------------------------------------------

def test_first_passage_series(report):
    mu, s2, a = 2.0, 4.0, 3.0
    t = np.linspace(0.02, 6.0, 300)
    ser = analytics.first_passage_series(t, mu, math.sqrt(s2), 500.0, a)
    ig = analytics.inverse_gaussian_pdf(t / a, mu, s2, a) / a
    dev = float(np.max(np.abs(ser - ig)))
    f = lambda u: analytics.first_passage_series(u, 1.0, 1.5, 2.0, 3.0)
    total = integrate.quad(f, 0, 1, limit=200)[0] + integrate.quad(f, 1, np.inf, limit=200)[0]
    ok = dev <= 1e-8 and abs(total - 1) <= 1e-4
    report(8, ok, f"single-barrier max |series - IG|={dev:.1e}; two-barrier density integral={total:.10f}")
    assert ok


# 9 ---------------------------------------------------------------------------

@pytest.mark.parametrize("name,pair_fn,dt", [("frequency_scaled", preset_frequency_scaled, 1e-5),
                                             ("force", preset_force, 0.05)])
def test_other_scenarios_advantage(report, name, pair_fn, dt):
    t0 = time.perf_counter()
    st, tbar, t_det = _seq_vs_det(pair_fn(), dt, 909)
    ratio = t_det / tbar
    ok = ratio > 2 and st.n_failed == (0, 0)
    report(9, ok, f"{name}: tau_bar={tbar:.4g}s, P_err={st.p_err.point:.4f}, T_det(1e-2)={t_det:.4g}s, "
                  f"ratio={ratio:.3f} (> 2); runtime {time.perf_counter() - t0:.0f}s")
    assert ok

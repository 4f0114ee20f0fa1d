import math

import numpy as np
import pytest
from scipy import stats

from seqmon import analytics, montecarlo as mc
from seqmon.errors import InvalidParam, TooFewSamples
from seqmon.testing import SprtConfig, wald_error_bounds


def test_derive_seed_stable_and_distinct():
    assert mc.derive_seed(1, 0) == mc.derive_seed(1, 0)
    assert len({mc.derive_seed(1, i) for i in range(50)}) == 50
    assert mc.derive_seed(1, 0) != mc.derive_seed(2, 0)


def test_default_threads_env(monkeypatch):
    monkeypatch.setenv("SEQMON_THREADS", "3")
    assert mc.default_threads() == 3
    monkeypatch.setenv("SEQMON_THREADS", "many")
    with pytest.raises(InvalidParam):
        mc.default_threads()
    monkeypatch.delenv("SEQMON_THREADS")
    assert mc.default_threads() == 1


def test_ensemble_bitwise_independent_of_threads(damping):
    cfg = SprtConfig.strong(0.05)
    a = mc.run_sprt_ensemble(damping, cfg, 40, 1e-4, 3.0, 7, parallelism=1)
    b = mc.run_sprt_ensemble(damping, cfg, 40, 1e-4, 3.0, 7, parallelism=3)
    assert a.equals(b)
    c = mc.run_sprt_ensemble(damping, cfg, 40, 1e-4, 3.0, 8)
    assert not a.equals(c)


def test_ensemble_error_indexing(damping):
    st = mc.run_sprt_ensemble(damping, SprtConfig.strong(0.2), 200, 1e-4, 3.0, 1)
    wrong_h0 = int(np.sum(st.raw[0].decision == 1))
    wrong_h1 = int(np.sum(st.raw[1].decision == 0))
    assert st.alpha1.n_errors == wrong_h0
    assert st.alpha0.n_errors == wrong_h1
    assert st.p_err.n_errors == wrong_h0 + wrong_h1
    d = st.to_dict()
    assert d["alpha0"]["n_errors"] == wrong_h1 and len(d["tau_mean"]) == 2


def test_ensemble_rejects_odd_n(damping):
    with pytest.raises(InvalidParam):
        mc.run_sprt_ensemble(damping, SprtConfig.strong(0.1), 3, 1e-4, 1.0, 0)


def test_iid_sprt_matches_wald():
    mu, a = 0.5, math.log(99)
    st = mc.iid_sprt_ensemble(mu, a, a, 4000, 1e-3, 200.0, 3)
    e = analytics.mean_stopping_time((mu, mu), a, a)[1]
    tau = np.concatenate([st.decided_tau(0), st.decided_tau(1)])
    assert abs(tau.mean() - e) < 4 * tau.std() / math.sqrt(tau.size)
    assert st.p_err.ci_lo <= wald_error_bounds(a, a)[0] <= st.p_err.ci_hi


def test_iid_fixed_sweep_matches_exact():
    mu = 0.5
    times = np.array([1.0, 4.0, 10.0])
    pts = mc.iid_deterministic_sweep(mu, times, 20000, 0.05, 2)
    exact = analytics.iid_fixed_errors(times, 0.0, mu)[0]
    for p, e in zip(pts, exact):
        # pooled over both hypotheses, ties at 0 have probability zero
        assert p.error.ci_lo <= e <= p.error.ci_hi


def test_stopping_histogram_against_numpy_wald():
    # oracle sampler: numpy's inverse Gaussian, not the engine
    mu, s2, a = 4.0, 8.0, 4.6
    rng = np.random.default_rng(0)
    tau = a * rng.wald(1 / mu, a / s2, size=20000)
    hist, ks = mc.stopping_histogram(tau, (mu, s2, a))
    assert ks < 0.02
    assert np.sum(hist.density * np.diff(hist.bin_edges)) == pytest.approx(1.0)
    _, ks_wrong = mc.stopping_histogram(tau, (mu, 4 * s2, a))
    assert ks_wrong > 0.05


def test_stopping_histogram_needs_samples():
    with pytest.raises(TooFewSamples):
        mc.stopping_histogram(np.ones(10), (1.0, 2.0, 1.0))


def test_sweep_argument_checks(damping):
    with pytest.raises(InvalidParam):
        mc.sequential_sweep(damping, [0.01, 0.05], 20, 1e-4, 0)
    with pytest.raises(InvalidParam):
        mc.deterministic_sweep(damping, [0.2, 0.1], 20, 1e-4, 0)


def test_sequential_sweep_structure(force):
    pts = mc.sequential_sweep(force, [0.1, 0.05], 200, 0.5, 1)
    assert [p.control for p in pts] == pytest.approx([-math.log(0.1), -math.log(0.05)])
    assert pts[1].time > pts[0].time
    assert pts[0].extra["epsilon"] == 0.1


def test_slice_histogram_gaussian_bulk(force):
    mu = analytics.llr_drift(force, 1)
    out = mc.llr_slice_histogram(force, [500.0, 2000.0], 4000, 0.5, 5, nu=2 * mu)
    for s in out:
        assert abs(s.mean - s.predicted_mean) < 5 * s.sem + 0.02 * s.predicted_mean
        assert abs(s.var - s.predicted_var) < 5 * s.var_se + 0.02 * s.predicted_var


def test_det_time_to_error():
    from seqmon.testing import error_estimate
    pts = [mc.SweepPoint(t, t, error_estimate(n, 100)) for t, n in ((1.0, 40), (2.0, 10), (3.0, 1))]
    assert mc.det_time_to_error(pts, 0.1) == pytest.approx(2.0)

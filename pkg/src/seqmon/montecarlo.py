"""Ensembles of trajectories and the sweep experiments built on them.

Trajectory ``i`` of an ensemble always uses the noise stream ``(seed, i)``:
the first ``N/2`` streams run under h0 and the rest under h1.  Work is split
into contiguous blocks for a thread pool and reassembled in stream order, so
every statistic is identical for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import math
import os

import numpy as np
from scipy import stats as _st

from . import analytics
from .errors import EmptyEnsemble, InvalidParam, TooFewSamples
from .model import HypothesisPair
from .testing import ErrorEstimate, SprtConfig, UndecidedPolicy, deterministic_decide, error_estimate
from .trajectory import (GaussianLlrStepper, InitPolicy, NoiseStream, SprtBatchResult, fixed_batch,
                         make_stepper, n_steps_for, sprt_batch)

DEFAULT_DT = {"damping": 1e-4, "frequency": 1e-7, "frequency_scaled": 1e-5, "force": 0.05, "iid": 1e-3}


def default_threads() -> int:
    env = os.environ.get("SEQMON_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidParam(f"SEQMON_THREADS must be an integer, got {env!r}") from None
    return 1


def derive_seed(seed: int, *key: int) -> int:
    """Independent child seed for sweep point ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def _blocks(n: int, parallelism: int):
    p = max(1, min(int(parallelism), n)) if n else 1
    edges = np.linspace(0, n, p + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(p) if edges[i + 1] > edges[i]]


def _map_blocks(fn, n: int, parallelism: int):
    blocks = _blocks(n, parallelism)
    if len(blocks) <= 1:
        return [fn(lo, hi) for lo, hi in blocks]
    with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
        return list(pool.map(lambda b: fn(*b), blocks))


def _sprt_parallel(stepper, a0, a1, t_max, seed, ids, parallelism) -> SprtBatchResult:
    dt = stepper.dt

    def run(lo, hi):
        return sprt_batch(stepper, a0, a1, t_max, [NoiseStream(seed, int(i), dt) for i in ids[lo:hi]])

    parts = _map_blocks(run, len(ids), parallelism)
    if not parts:
        z = np.zeros(0)
        return SprtBatchResult(z, z.astype(int), z, z, z.astype(bool))
    return SprtBatchResult(*(np.concatenate([getattr(p, f) for p in parts])
                             for f in ("tau", "decision", "ell_final", "overshoot", "failed")))


def _fixed_parallel(stepper, T, times, seed, ids, parallelism):
    dt = stepper.dt

    def run(lo, hi):
        return fixed_batch(stepper, T, times, [NoiseStream(seed, int(i), dt) for i in ids[lo:hi]])

    parts = _map_blocks(run, len(ids), parallelism)
    return np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts])


# ---------------------------------------------------------------------------
# SPRT ensembles


@dataclass(eq=False)
class EnsembleStats:
    n_per_hypothesis: int
    alpha0: ErrorEstimate | None     # decide 0 under h1
    alpha1: ErrorEstimate | None     # decide 1 under h0
    p_err: ErrorEstimate | None
    tau_mean: tuple
    tau_sem: tuple
    tau_var: tuple
    n_undecided: tuple
    n_failed: tuple
    histogram: tuple
    thresholds: tuple
    priors: tuple
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def tau_mean_pooled(self) -> float:
        taus = np.concatenate([self.decided_tau(k) for k in (0, 1)])
        return float(taus.mean()) if taus.size else float("nan")

    def decided_tau(self, k: int) -> np.ndarray:
        r = self.raw[k]
        return r.tau[(r.decision >= 0) & ~r.failed]

    def equals(self, other: "EnsembleStats") -> bool:
        return all(np.array_equal(getattr(self.raw[k], f), getattr(other.raw[k], f), equal_nan=True)
                   for k in (0, 1) for f in ("tau", "decision", "ell_final", "failed"))

    def to_dict(self) -> dict:
        def est(e):
            return None if e is None else e.to_dict()
        return {
            "n_per_hypothesis": self.n_per_hypothesis,
            "thresholds": list(self.thresholds),
            "priors": list(self.priors),
            "alpha0": est(self.alpha0), "alpha1": est(self.alpha1), "p_err": est(self.p_err),
            "tau_mean": list(self.tau_mean), "tau_sem": list(self.tau_sem), "tau_var": list(self.tau_var),
            "n_undecided": list(self.n_undecided), "n_failed": list(self.n_failed),
            "histogram": {"bin_edges": self.histogram[0].tolist(), "counts": self.histogram[1].tolist()},
        }


def _moments(x):
    if x.size == 0:
        return float("nan"), float("nan"), float("nan")
    var = float(np.var(x, ddof=1)) if x.size > 1 else 0.0
    return float(x.mean()), math.sqrt(var / x.size), var


def _pooled(e0: ErrorEstimate | None, e1: ErrorEstimate | None, priors) -> ErrorEstimate | None:
    """``P_err = pi0 * alpha1 + pi1 * alpha0``."""
    if e0 is None or e1 is None:
        return e0 or e1
    p0, p1 = priors
    if p0 == p1 and e0.n_trials == e1.n_trials:
        return error_estimate(e0.n_errors + e1.n_errors, e0.n_trials + e1.n_trials)
    point = p0 * e1.point + p1 * e0.point
    return ErrorEstimate(point=point, ci_lo=p0 * e1.ci_lo + p1 * e0.ci_lo, ci_hi=p0 * e1.ci_hi + p1 * e0.ci_hi,
                         n_trials=e0.n_trials + e1.n_trials, n_errors=e0.n_errors + e1.n_errors)


def summarize(res: dict, thresholds, priors, policy=UndecidedPolicy.EXCLUDE) -> EnsembleStats:
    policy = UndecidedPolicy(policy)
    errs, mom, und, fail = {}, {}, [], []
    for k in (0, 1):
        r = res[k]
        ok = ~r.failed
        dec = r.decision[ok]
        if policy is UndecidedPolicy.SIGN:
            dec = np.where(dec < 0, deterministic_decide(np.nan_to_num(r.ell_final[ok]), 0.0), dec)
        decided = dec >= 0
        n_dec = int(decided.sum())
        errs[k] = error_estimate(int(np.sum(dec[decided] != k)), n_dec) if n_dec else None
        mom[k] = _moments(r.tau[ok][r.decision[ok] >= 0])
        und.append(int(np.sum(r.decision[ok] < 0)))
        fail.append(int(r.failed.sum()))
    taus = np.concatenate([r.tau[(r.decision >= 0) & ~r.failed] for r in (res[0], res[1])])
    if taus.size >= 2:
        counts, edges = np.histogram(taus, bins="fd")
    else:
        counts, edges = np.histogram(taus, bins=1)
    return EnsembleStats(
        n_per_hypothesis=len(res[0].tau),
        alpha0=errs[1], alpha1=errs[0], p_err=_pooled(errs[1], errs[0], priors),
        tau_mean=(mom[0][0], mom[1][0]), tau_sem=(mom[0][1], mom[1][1]), tau_var=(mom[0][2], mom[1][2]),
        n_undecided=tuple(und), n_failed=tuple(fail), histogram=(edges, counts),
        thresholds=tuple(thresholds), priors=tuple(priors), raw=res,
    )


def run_sprt_ensemble(pair: HypothesisPair, config: SprtConfig, N: int, dt: float, t_max: float, seed: int,
                      parallelism: int = 1, init=InitPolicy.STEADY_STATE, scheme: str = "auto",
                      policy=UndecidedPolicy.EXCLUDE, hypotheses=(0, 1)) -> EnsembleStats:
    """N/2 SPRT trajectories under each hypothesis."""
    if N <= 0 or N % 2:
        raise InvalidParam("N must be a positive even number")
    half = N // 2
    res = {}
    for k in (0, 1):
        ids = np.arange(k * half, (k + 1) * half)
        if k not in hypotheses:
            ids = ids[:0]
        stepper = make_stepper(pair, k, dt, n_steps_for(t_max, dt), init, scheme)
        res[k] = _sprt_parallel(stepper, config.a0, config.a1, t_max, seed, ids, parallelism)
    return summarize(res, config.thresholds, pair.priors, policy)


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepPoint:
    control: float
    time: float
    error: ErrorEstimate
    extra: dict = field(default_factory=dict)


def _fixed_errors(ells0, ells1, a, priors):
    """Per-slice pooled error estimates of the decision ``l_t >= a``."""
    out = []
    for j in range(ells0.shape[1]):
        e1 = error_estimate(int(np.sum(deterministic_decide(ells0[:, j], a) == 1)), ells0.shape[0])
        e0 = error_estimate(int(np.sum(deterministic_decide(ells1[:, j], a) == 0)), ells1.shape[0])
        out.append(_pooled(e0, e1, priors))
    return out


def deterministic_sweep(pair: HypothesisPair, times, N: int, dt: float, seed: int, parallelism: int = 1,
                        a: float = 0.0, init=InitPolicy.STEADY_STATE, scheme: str = "auto"):
    """Fixed-horizon error at each time, from one shared ensemble.

    Slices come from the same trajectories and are therefore correlated.
    """
    times = np.asarray(times, dtype=float)
    if times.size and np.any(np.diff(times) <= 0):
        raise InvalidParam("times must be strictly increasing")
    if N <= 0 or N % 2:
        raise InvalidParam("N must be a positive even number")
    T = float(times[-1]) if times.size else 0.0
    half = N // 2
    ells = {}
    for k in (0, 1):
        stepper = make_stepper(pair, k, dt, max(n_steps_for(T, dt), 1), init, scheme)
        e, failed = _fixed_parallel(stepper, T, times, seed, np.arange(k * half, (k + 1) * half), parallelism)
        ells[k] = e[~failed]
    if ells[0].shape[0] == 0 or ells[1].shape[0] == 0:
        raise EmptyEnsemble("every trajectory failed")
    errs = _fixed_errors(ells[0], ells[1], a, pair.priors)
    return [SweepPoint(control=float(t), time=float(t), error=e, extra={"n": N, "correlated_slices": True})
            for t, e in zip(times, errs)]


def sequential_sweep(pair: HypothesisPair, eps_list, N: int, dt: float, seed: int, t_max: float | None = None,
                     parallelism: int = 1, init=InitPolicy.STEADY_STATE, scheme: str = "auto"):
    """Symmetric SPRT at each ``eps``; control is ``-log eps``."""
    eps = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise InvalidParam("eps_list must be strictly decreasing")
    if t_max is None:
        mu = analytics.asymptotic_drift(pair)
        a_min = math.log((1 - eps[-1]) / eps[-1])
        t_max = 20 * max(analytics.mean_stopping_time(mu, a_min, a_min))
    out = []
    for i, e in enumerate(eps):
        cfg = SprtConfig.strong(e, e, 0.5)
        st = run_sprt_ensemble(pair, cfg, N, dt, t_max, derive_seed(seed, i), parallelism, init, scheme)
        taus = np.concatenate([st.decided_tau(0), st.decided_tau(1)])
        mean, sem, _ = _moments(taus)
        out.append(SweepPoint(control=-math.log(e), time=mean, error=st.p_err, extra={
            "epsilon": e, "a": cfg.a1, "n": N, "n_undecided": int(sum(st.n_undecided)), "tau_sem": sem,
            "t_max": t_max}))
    return out


# ---------------------------------------------------------------------------
# histograms


@dataclass(frozen=True, eq=False)
class Histogram:
    bin_edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray


def _fd_histogram(x) -> Histogram:
    counts, edges = np.histogram(x, bins="fd")
    width = np.diff(edges)
    return Histogram(edges, counts / (counts.sum() * width), counts)


def stopping_histogram(samples, ig_param, min_samples: int = 100):
    """Normalised histogram of tau and the KS distance to the IG law.

    ``samples`` is an array of stopping times or an :class:`EnsembleStats`
    (its decided h1 times).  ``ig_param`` is ``(mu, sigma2, a)``.
    """
    if isinstance(samples, EnsembleStats):
        samples = samples.decided_tau(1)
    x = np.asarray(samples, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < min_samples:
        raise TooFewSamples(f"need at least {min_samples} decided stopping times, got {x.size}")
    mu, s2, a = ig_param
    ks = _st.kstest(x / a, lambda u: analytics.inverse_gaussian_cdf(u, mu, s2, a)).statistic
    return _fd_histogram(x), float(ks)


@dataclass(frozen=True, eq=False)
class SliceHistogram:
    t: float
    hist: Histogram | None
    mean: float
    sem: float
    var: float
    var_se: float
    predicted_mean: float
    predicted_var: float | None


def llr_slice_histogram(pair: HypothesisPair, t_slices, N: int, dt: float, seed: int, k: int = 1,
                        nu: float | None = None, parallelism: int = 1, scheme: str = "auto"):
    """LLR histograms at fixed times under h_k with the Gaussian-bulk overlay."""
    t_slices = np.asarray(t_slices, dtype=float)
    T = float(t_slices.max()) if t_slices.size else 0.0
    stepper = make_stepper(pair, k, dt, max(n_steps_for(T, dt), 1), scheme=scheme)
    ells, failed = _fixed_parallel(stepper, T, t_slices, seed, np.arange(N), parallelism)
    ells = ells[~failed]
    mu = analytics.llr_drift(pair, k)
    sgn = 1.0 if k == 1 else -1.0
    out = []
    for j, t in enumerate(t_slices):
        x = ells[:, j]
        n = x.size
        var = float(np.var(x, ddof=1)) if n > 1 else 0.0
        # var of the sample variance, from the fourth central moment
        m4 = float(np.mean((x - x.mean()) ** 4)) if n > 1 else 0.0
        var_se = math.sqrt(max(m4 - var * var * (n - 3) / (n - 1), 0.0) / n) if n > 3 else float("nan")
        hist = _fd_histogram(x) if np.ptp(x) > 0 else None
        out.append(SliceHistogram(t=float(t), hist=hist, mean=float(x.mean()), sem=math.sqrt(var / n),
                                  var=var, var_se=var_se, predicted_mean=sgn * mu * t,
                                  predicted_var=None if nu is None else nu * t))
    return out


# ---------------------------------------------------------------------------
# IID Gaussian observations, sampled directly


def iid_sprt_ensemble(mu: float, a0: float, a1: float, N: int, dt: float, t_max: float, seed: int,
                      parallelism: int = 1) -> EnsembleStats:
    """SPRT on ``l_t = +-mu t + sqrt(2 mu) W_t`` with exact increments."""
    if N <= 0 or N % 2:
        raise InvalidParam("N must be a positive even number")
    half = N // 2
    n = n_steps_for(t_max, dt)
    res = {k: _sprt_parallel(GaussianLlrStepper.constant_rate(mu, k, dt, n), a0, a1, t_max, seed,
                             np.arange(k * half, (k + 1) * half), parallelism) for k in (0, 1)}
    return summarize(res, (a0, a1), (0.5, 0.5))


def iid_deterministic_sweep(mu: float, times, N: int, dt: float, seed: int, a: float = 0.0, parallelism: int = 1):
    times = np.asarray(times, dtype=float)
    if N <= 0 or N % 2:
        raise InvalidParam("N must be a positive even number")
    T = float(times[-1])
    half = N // 2
    n = max(n_steps_for(T, dt), 1)
    ells = {k: _fixed_parallel(GaussianLlrStepper.constant_rate(mu, k, dt, n), T, times, seed,
                               np.arange(k * half, (k + 1) * half), parallelism)[0] for k in (0, 1)}
    errs = _fixed_errors(ells[0], ells[1], a, (0.5, 0.5))
    return [SweepPoint(control=float(t), time=float(t), error=e, extra={"n": N, "correlated_slices": True})
            for t, e in zip(times, errs)]


def det_time_to_error(points, target: float) -> float:
    """Time at which a deterministic sweep's pooled error first reaches ``target``."""
    return analytics.det_time_for_error([p.time for p in points], [p.error.point for p in points], target)

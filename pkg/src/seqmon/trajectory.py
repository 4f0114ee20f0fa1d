"""SDE engine for the coupled filters and the log-likelihood ratio.

Every scheme drives both conditional filters with one shared measurement
increment ``dy = C r_k dt + dw`` generated by the true hypothesis ``k``.

* ``expeuler`` (default): exponential Euler.  Filter j advances as
  ``r <- e^{F dt} r + (Psi/dt) chi dy + Psi b`` with ``F = A - chi C`` and
  ``Psi = int_0^dt e^{F s} ds``, so lightly damped rotations stay stable at
  any step.  The LLR uses the Ito sum ``(+-)1/2 |C dr|^2 dt + C dr . dw``.
* ``euler``: plain Euler-Maruyama, the same update with ``e^{F dt}``
  replaced by ``I + F dt``.
* ``gaussian``: exact scheme for pairs that differ only in the drive ``b``.
  The gap ``r1 - r0`` then obeys a noise-free ODE, so the LLR is a Brownian
  motion on the deterministic clock ``I(t) = 1/2 int |C (r1 - r0)|^2``::

      l(t) = (-1)^(k+1) I(t) + W(2 I(t))

  and increments over any step are drawn exactly.

Per-trajectory randomness comes from a counter-based Philox stream keyed by
``(seed, stream_id)``.  The compiled loops handle one trajectory at a time
with a fixed summation order, so a path never depends on batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import enum
import math

import numpy as np
from scipy.linalg import expm

from . import _kernels as _k
from .errors import DimensionMismatch, InvalidParam, NonFinite, NotHurwitz
from .model import ExtendedSystem, HypothesisPair, block_diag, build_extended
from .solvers import riccati_steady_state, stability_check, unconditional_covariance, with_steady_state

CHUNK = 512


class InitPolicy(str, enum.Enum):
    STEADY_STATE = "steady_state"
    TRANSIENT = "transient"


@dataclass(frozen=True)
class NoiseStream:
    seed: int
    stream_id: int
    dt: float

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed % 2**64, self.stream_id % 2**64]))

    def increments(self, n_steps: int, m: int) -> np.ndarray:
        """First ``n_steps`` Wiener increments (variance ``dt`` per entry)."""
        return math.sqrt(self.dt) * self.generator().standard_normal((n_steps, m))


@dataclass(frozen=True, eq=False)
class FilterState:
    t: float
    X: np.ndarray
    Sigma: np.ndarray
    ell: float


@dataclass(frozen=True, eq=False)
class TrajectoryOutcome:
    tau: float
    decision: int | None
    ell_final: float
    hit: str
    overshoot: float = 0.0
    samples: list = field(default_factory=list)


class _Batch:
    """Mutable per-batch state: filter means, LLR and shared covariances."""

    def __init__(self, r0, r1, ell, sigmas):
        self.r0, self.r1, self.ell, self.sigmas = r0, r1, ell, sigmas

    def take(self, keep):
        return _Batch(self.r0[keep], self.r1[keep], self.ell[keep], self.sigmas)

    def finite(self):
        return np.isfinite(self.ell) & np.all(np.isfinite(self.r0), axis=1) & np.all(np.isfinite(self.r1), axis=1)


METHODS = ("expeuler", "euler")


def filter_step(model, sigma, dt: float, method: str = "expeuler"):
    """Step matrices ``(P, K, c)`` with ``r <- P r + K dy + c``."""
    chi = model.chi(sigma)
    F = model.A - chi @ model.C
    k = model.dim
    if method == "euler":
        return np.eye(k) + F * dt, chi.copy(), model.b * dt
    if method != "expeuler":
        raise InvalidParam(f"unknown filter method {method!r}")
    blk = np.zeros((2 * k, 2 * k))
    blk[:k, :k] = F
    blk[:k, k:] = np.eye(k)
    E = expm(blk * dt)
    Phi, Psi = E[:k, :k], E[:k, k:]
    return Phi, (Psi / dt) @ chi, Psi @ model.b


def _riccati_rk4(model, s, h):
    f = model.riccati_rhs
    k1 = f(s)
    k2 = f(s + 0.5 * h * k1)
    k3 = f(s + 0.5 * h * k2)
    k4 = f(s + h * k3)
    out = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return 0.5 * (out + out.T)


class _Tracks:
    """Step matrices for both filters, constant or per step."""

    def __init__(self, models, dt, method, init):
        self.models, self.dt, self.method, self.init = models, dt, method, InitPolicy(init)
        if self.init is InitPolicy.STEADY_STATE:
            sig = [riccati_steady_state(mod) for mod in models]
            self.const = [filter_step(mod, s, dt, method) for mod, s in zip(models, sig)]
        else:
            self.const = None
        self.sigma0 = tuple(unconditional_covariance(mod) for mod in models)

    def chunk(self, sigmas, K):
        """Per-model ``(P, K, c)`` stacks for ``K`` steps, and the advanced covariances."""
        if self.const is not None:
            return [tuple(np.broadcast_to(a, (K,) + a.shape) for a in trio) for trio in self.const], sigmas
        out = [([], [], []) for _ in self.models]
        sig = list(sigmas)
        for _ in range(K):
            for j, mod in enumerate(self.models):
                for slot, arr in zip(out[j], filter_step(mod, sig[j], self.dt, self.method)):
                    slot.append(arr)
                sig[j] = _riccati_rk4(mod, sig[j], self.dt)
        return [tuple(np.array(a) for a in o) for o in out], tuple(sig)


def _flat(mats):
    (P0, K0, c0), (P1, K1, c1) = mats
    return P0, P1, K0, K1, c0, c1


class FilterStepper:
    """Both filters plus the LLR under hypothesis ``true_k``."""

    def __init__(self, pair: HypothesisPair, true_k: int, dt: float, init=InitPolicy.STEADY_STATE,
                 method: str = "expeuler"):
        if dt <= 0:
            raise InvalidParam("dt must be positive")
        if true_k not in (0, 1):
            raise InvalidParam("true_k must be 0 or 1")
        self.scheme = method
        self.dt, self.k = float(dt), true_k
        self.half_sdt = (1.0 if true_k == 1 else -1.0) * 0.5 * self.dt
        self.C = pair.C
        self.m = pair.C.shape[0]
        self.n_noise = self.m
        self.dim = pair.model0.dim
        self.tracks = _Tracks(pair.models(), self.dt, method, init)

    def start(self, n: int) -> _Batch:
        return _Batch(np.zeros((n, self.dim)), np.zeros((n, self.dim)), np.zeros(n), self.tracks.sigma0)

    def run_chunk(self, batch, Z, step0, lo, hi, done, tau, ell_hit, rec_col, rec_out):
        mats, batch.sigmas = self.tracks.chunk(batch.sigmas, Z.shape[1])
        _k.filter_chunk(batch.r0, batch.r1, batch.ell, Z, math.sqrt(self.dt), self.dt, self.k, self.half_sdt,
                        self.C, *_flat(mats), lo, hi, step0, done, tau, ell_hit, rec_col, rec_out)


def gap_is_deterministic(pair: HypothesisPair) -> bool:
    """True when r1 - r0 carries no noise: shared A, D, Gamma (and C)."""
    m0, m1 = pair.model0, pair.model1
    return (np.array_equal(m0.A, m1.A) and np.array_equal(m0.D, m1.D)
            and np.array_equal(m0.Gamma, m1.Gamma))


def llr_clock_increments(pair: HypothesisPair, dt: float, n_steps: int) -> np.ndarray:
    """Exact increments of ``I(t) = 1/2 int_0^t |C (r1 - r0)|^2`` on a grid.

    Requires :func:`gap_is_deterministic`.  The gap solves
    ``d(dr) = (A - chi C) dr dt + (b1 - b0) dt`` from ``dr(0) = 0`` under
    either hypothesis; quadratic-form integrals over each step come from the
    Van Loan block exponential.
    """
    if not gap_is_deterministic(pair):
        raise InvalidParam("the LLR clock is deterministic only when the models differ in b alone")
    mod = pair.model0
    sigma = riccati_steady_state(mod)
    F_gap = mod.A - mod.chi(sigma) @ mod.C
    db = pair.model1.b - pair.model0.b
    k = mod.dim
    F = np.zeros((k + 1, k + 1))
    F[:k, :k] = F_gap
    F[:k, k] = db
    Q = np.zeros((k + 1, k + 1))
    Q[:k, :k] = mod.C.T @ mod.C
    VL = np.zeros((2 * (k + 1), 2 * (k + 1)))
    VL[: k + 1, : k + 1] = -F.T
    VL[: k + 1, k + 1:] = Q
    VL[k + 1:, k + 1:] = F
    # the -F^T block grows like e^{|F| h}: evaluate on a small substep, then
    # double with Gram(2h) = Gram(h) + Phi(h)^T Gram(h) Phi(h)
    n_double = max(0, int(math.ceil(math.log2(max(np.linalg.norm(F, 2) * dt, 1e-300) / 0.5))))
    h = dt / 2**n_double
    G = expm(VL * h)
    Phi = G[k + 1:, k + 1:]
    Gram = Phi.T @ G[: k + 1, k + 1:]
    for _ in range(n_double):
        Gram = Gram + Phi.T @ Gram @ Phi
        Phi = Phi @ Phi
    Gram = 0.5 * (Gram + Gram.T)
    z = np.zeros(k + 1)
    z[k] = 1.0
    out = np.empty(n_steps)
    for n in range(n_steps):
        out[n] = 0.5 * z @ Gram @ z
        z = Phi @ z
        if n > 8 and abs(out[n] - out[n - 1]) <= 1e-15 * out[n]:
            out[n + 1:] = out[n]
            break
    return np.maximum(out, 0.0)


class GaussianLlrStepper:
    """Exact LLR increments ``s dI + sqrt(2 dI) Z`` on a deterministic clock."""

    scheme = "gaussian"
    n_noise = 1

    def __init__(self, clock: np.ndarray, true_k: int, dt: float):
        self.dI = np.asarray(clock, dtype=float)
        self.s = 1.0 if true_k == 1 else -1.0
        self.dt = float(dt)
        self.sd = np.sqrt(2.0 * self.dI)

    @classmethod
    def for_pair(cls, pair: HypothesisPair, true_k: int, dt: float, n_steps: int):
        return cls(llr_clock_increments(pair, dt, n_steps), true_k, dt)

    @classmethod
    def constant_rate(cls, mu: float, true_k: int, dt: float, n_steps: int):
        return cls(np.full(n_steps, mu * dt), true_k, dt)

    def start(self, n: int) -> _Batch:
        return _Batch(np.zeros((n, 0)), np.zeros((n, 0)), np.zeros(n), ())

    def run_chunk(self, batch, Z, step0, lo, hi, done, tau, ell_hit, rec_col, rec_out):
        if step0 + Z.shape[1] > self.dI.size:
            raise InvalidParam("clock shorter than the requested horizon")
        _k.gaussian_chunk(batch.ell, Z, self.s, self.dI, self.sd, step0, lo, hi, self.dt,
                          done, tau, ell_hit, rec_col, rec_out)


def make_stepper(pair: HypothesisPair, true_k: int, dt: float, n_steps: int,
                 init=InitPolicy.STEADY_STATE, scheme: str = "auto"):
    """Pick the integrator.  ``auto`` uses the exact scheme when it applies."""
    init = InitPolicy(init)
    if scheme not in ("auto", "gaussian") + METHODS:
        raise InvalidParam(f"unknown scheme {scheme!r}")
    exact_ok = gap_is_deterministic(pair) and init is InitPolicy.STEADY_STATE and not pair.identical
    if scheme == "gaussian" or (scheme == "auto" and exact_ok):
        if not exact_ok:
            raise InvalidParam("the exact Gaussian scheme needs models differing only in b, steady-state init")
        return GaussianLlrStepper.for_pair(pair, true_k, dt, n_steps)
    if init is InitPolicy.STEADY_STATE and not pair.identical:
        sys = with_steady_state(build_extended(pair, true_k))
        s = stability_check(sys.drift())
        if s >= 0:
            raise NotHurwitz(f"extended drift not stable (spectral abscissa {s:.3g})")
    return FilterStepper(pair, true_k, dt, init, "expeuler" if scheme == "auto" else scheme)


# ---------------------------------------------------------------------------
# batched drivers


def _draw(gens, n_steps, width):
    """(n_traj, n_steps, width) standard normals, one Philox stream per row."""
    return np.stack([g.standard_normal((n_steps, width)) for g in gens], axis=0)


@dataclass(eq=False)
class SprtBatchResult:
    tau: np.ndarray
    decision: np.ndarray      # 1, 0 or -1 (undecided)
    ell_final: np.ndarray
    overshoot: np.ndarray
    failed: np.ndarray        # non-finite blow-ups


def n_steps_for(t: float, dt: float) -> int:
    return int(math.ceil(t / dt - 1e-9))


def sprt_batch(stepper, a0: float, a1: float, t_max: float, streams) -> SprtBatchResult:
    """Integrate each stream until the LLR leaves ``(-a0, a1)`` or ``t_max``."""
    if not (a0 > 0 and a1 > 0):
        raise InvalidParam("thresholds must be positive")
    dt = stepper.dt
    n_tot = len(streams)
    n_max = n_steps_for(t_max, dt)
    tau = np.full(n_tot, float(t_max))
    ell_hit = np.full(n_tot, np.nan)
    failed = np.zeros(n_tot, dtype=bool)
    gens = [s.generator() for s in streams]
    ids = np.arange(n_tot)
    batch = stepper.start(n_tot)
    done_all = np.zeros(n_tot, dtype=bool)
    no_rec = np.full(CHUNK, -1, dtype=np.int64)
    dummy = np.zeros((n_tot, 1))
    step0 = 0
    while step0 < n_max and len(ids):
        K = min(CHUNK, n_max - step0)
        Z = _draw([gens[i] for i in ids], K, stepper.n_noise)
        done = np.zeros(len(ids), dtype=bool)
        t_loc = np.empty(len(ids))
        e_loc = np.empty(len(ids))
        stepper.run_chunk(batch, Z, step0, float(a0), float(a1), done, t_loc, e_loc, no_rec[:K], dummy)
        tau[ids[done]] = t_loc[done]
        ell_hit[ids[done]] = e_loc[done]
        bad = ~batch.finite() & ~done
        failed[ids[bad]] = True
        done |= bad
        done_all[ids[done]] = True
        step0 += K
        if done.any():
            batch = batch.take(~done)
            ids = ids[~done]
    decision = np.full(n_tot, -1, dtype=int)
    up = done_all & ~failed & (ell_hit >= a1)
    lo_ = done_all & ~failed & (ell_hit <= -a0)
    decision[up] = 1
    decision[lo_] = 0
    ell_final = ell_hit.copy()
    if len(ids):
        ell_final[ids] = batch.ell
    ell_final[failed] = np.nan
    overshoot = np.zeros(n_tot)
    overshoot[up] = ell_hit[up] - a1
    overshoot[lo_] = -a0 - ell_hit[lo_]
    return SprtBatchResult(tau, decision, ell_final, overshoot, failed)


def fixed_batch(stepper, T: float, sample_times, streams):
    """LLR values at ``sample_times`` (no stopping).  Returns (times, ells, failed)."""
    dt = stepper.dt
    times = np.asarray(sample_times, dtype=float).reshape(-1)
    if times.size and (times.min() < 0 or times.max() > T + 1e-12):
        raise InvalidParam("sample times must lie in [0, T]")
    idx = np.rint(times / dt).astype(np.int64)
    uniq, inverse = np.unique(idx, return_inverse=True)
    n_tot = len(streams)
    rec = np.zeros((n_tot, max(uniq.size, 1)))
    n_max = n_steps_for(T, dt) if T > 0 else 0
    gens = [s.generator() for s in streams]
    batch = stepper.start(n_tot)
    inf = math.inf
    done = np.zeros(n_tot, dtype=bool)
    scratch = np.empty(n_tot)
    step0 = 0
    while step0 < n_max:
        K = min(CHUNK, n_max - step0)
        Z = _draw(gens, K, stepper.n_noise)
        rec_col = np.full(K, -1, dtype=np.int64)
        for col, n in enumerate(uniq):
            if step0 < n <= step0 + K:
                rec_col[n - step0 - 1] = col
        stepper.run_chunk(batch, Z, step0, inf, inf, done, scratch, scratch, rec_col, rec)
        step0 += K
    out = rec[:, inverse] if times.size else np.zeros((n_tot, 0))
    out[:, idx[...] == 0] = 0.0
    failed = ~np.all(np.isfinite(out), axis=1) | ~np.isfinite(batch.ell)
    return times, out, failed


# ---------------------------------------------------------------------------
# single-trajectory API


def step(state: FilterState, sys: ExtendedSystem, dt: float, dw, pinned: bool = True,
         method: str = "expeuler") -> FilterState:
    """Advance ``(X, Sigma, l)`` by one step with physical noise ``dw`` (length m)."""
    dw = np.asarray(dw, dtype=float).reshape(-1)
    if dw.shape[0] != sys.m:
        raise DimensionMismatch(f"dw must have length m={sys.m}")
    if dt <= 0:
        raise InvalidParam("dt must be positive")
    k = sys.model0.dim
    sig = (state.Sigma[:k, :k], state.Sigma[k:, k:])
    r = (state.X[:k], state.X[k:])
    C = sys.model0.C
    Cr = (C @ r[0], C @ r[1])
    v = Cr[1] - Cr[0]
    sgn = 1.0 if sys.true_k == 1 else -1.0
    ell = state.ell + (sgn * 0.5 * dt * float(v @ v) + float(v @ dw))
    dy = Cr[sys.true_k] * dt + dw
    new_r, new_sig = [], []
    for j, mod in enumerate(sys.models):
        P, K, c = filter_step(mod, sig[j], dt, method)
        new_r.append(P @ r[j] + K @ dy + c)
        new_sig.append(sig[j] if pinned else _riccati_rk4(mod, sig[j], dt))
    X = np.concatenate(new_r)
    Sigma = state.Sigma.copy() if pinned else block_diag(*new_sig)
    if not (np.all(np.isfinite(X)) and math.isfinite(ell) and np.all(np.isfinite(Sigma))):
        raise NonFinite(f"state blew up at t={state.t + dt:.6g}")
    return FilterState(t=state.t + dt, X=X, Sigma=Sigma, ell=ell)


def initial_state(sys: ExtendedSystem, init=InitPolicy.STEADY_STATE) -> FilterState:
    init = InitPolicy(init)
    if init is InitPolicy.STEADY_STATE:
        Sigma = with_steady_state(sys).Sigma_ss.copy()
    else:
        Sigma = block_diag(*(unconditional_covariance(mod) for mod in sys.models))
    return FilterState(t=0.0, X=np.zeros(sys.dim), Sigma=Sigma, ell=0.0)


def _pair_of(sys: ExtendedSystem) -> HypothesisPair:
    return HypothesisPair(sys.model0, sys.model1)


def simulate_sprt(sys: ExtendedSystem, thresholds, dt: float, t_max: float, noise: NoiseStream,
                  init=InitPolicy.STEADY_STATE, scheme: str = "expeuler") -> TrajectoryOutcome:
    a0, a1 = (float(a) for a in thresholds)
    if noise.dt != dt:
        noise = NoiseStream(noise.seed, noise.stream_id, dt)
    stepper = make_stepper(_pair_of(sys), sys.true_k, dt, n_steps_for(t_max, dt), init, scheme)
    res = sprt_batch(stepper, a0, a1, t_max, [noise])
    if res.failed[0]:
        raise NonFinite("trajectory blew up")
    dec = int(res.decision[0])
    hit = {1: "upper", 0: "lower", -1: "timeout"}[dec]
    return TrajectoryOutcome(tau=float(res.tau[0]), decision=None if dec < 0 else dec,
                             ell_final=float(res.ell_final[0]), hit=hit,
                             overshoot=float(res.overshoot[0]))


def simulate_fixed(sys: ExtendedSystem, T: float, sample_times, dt: float, noise: NoiseStream,
                   init=InitPolicy.STEADY_STATE, scheme: str = "expeuler"):
    """LLR path of one trajectory at ``sample_times``; returns (times, ells)."""
    if noise.dt != dt:
        noise = NoiseStream(noise.seed, noise.stream_id, dt)
    stepper = make_stepper(_pair_of(sys), sys.true_k, dt, max(n_steps_for(T, dt), 1), init, scheme)
    times, out, failed = fixed_batch(stepper, T, sample_times, [noise])
    if failed[0]:
        raise NonFinite("trajectory blew up")
    return times, out[0]


def filter_from_record(pair: HypothesisPair, record, dt: float, init=InitPolicy.STEADY_STATE,
                       method: str = "expeuler") -> np.ndarray:
    """Run both filters on measured increments ``dy`` (shape n x m).

    Never refers to the true hypothesis.  Returns the LLR path of length
    n + 1 starting from 0.
    """
    dy = np.asarray(record, dtype=float)
    if dy.size == 0:
        return np.zeros(1)
    if dy.ndim == 1:
        dy = dy.reshape(-1, 1)
    m = pair.C.shape[0]
    if dy.ndim != 2 or dy.shape[1] != m:
        raise DimensionMismatch(f"record increments must have {m} columns, got shape {dy.shape}")
    if dt <= 0:
        raise InvalidParam("dt must be positive")
    tracks = _Tracks(pair.models(), float(dt), method, init)
    mats, _ = tracks.chunk(tracks.sigma0, dy.shape[0])
    ell = _k.record_filter(np.ascontiguousarray(dy), float(dt), pair.C, *_flat(mats))
    bad = ~np.isfinite(ell)
    if bad.any():
        raise NonFinite(f"filter blew up at step {int(np.argmax(bad)) - 1}")
    return ell


def synthesize_record(pair: HypothesisPair, true_k: int, dt: float, n_steps: int, noise: NoiseStream,
                      init=InitPolicy.STEADY_STATE, method: str = "expeuler") -> np.ndarray:
    """Measurement increments ``dy = C r_k dt + dw`` generated under h_k."""
    mod = pair.models()[true_k]
    tracks = _Tracks((mod,), float(dt), method, init)
    [(P, K, c)], _ = tracks.chunk(tracks.sigma0, n_steps)
    dw = NoiseStream(noise.seed, noise.stream_id, dt).increments(n_steps, mod.m)
    C = mod.C
    r = np.zeros(mod.dim)
    out = np.empty((n_steps, mod.m))
    for n in range(n_steps):
        out[n] = C @ r * dt + dw[n]
        r = P[n] @ r + K[n] @ out[n] + c[n]
    return out


def load_record(path) -> tuple[np.ndarray, float]:
    """Read a record with columns (t, dy_1..dy_m) from CSV or ``.npy``.

    Returns the increments and the (uniform) sampling step.
    """
    path = str(path)
    if path.endswith(".npy"):
        arr = np.load(path)
    else:
        arr = np.genfromtxt(path, delimiter=",", comments="#", names=None)
        if arr.ndim == 2 and np.isnan(arr[0]).all():
            arr = arr[1:]
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    if arr.shape[1] < 2:
        raise DimensionMismatch("record needs a time column and at least one increment column")
    t = arr[:, 0]
    if t.size < 2:
        raise DimensionMismatch("record needs at least two rows to infer dt")
    steps = np.diff(t)
    dt = float(steps.mean())
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise InvalidParam("record times must be uniformly spaced and increasing")
    return arr[:, 1:], dt

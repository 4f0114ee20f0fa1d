"""Closed-form and asymptotic predictions.

Error probabilities are indexed by the *wrong decision*: ``alpha0`` is the
probability of deciding 0 when h1 holds, ``alpha1`` of deciding 1 under h0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import erfc, erfcinv, log_ndtr

from .errors import InvalidParam, TooFewSamples, ZeroDrift
from .model import HypothesisPair, build_extended
from .solvers import stationary_stats, with_steady_state
from .testing import wald_error_bounds


@dataclass(frozen=True)
class AsymptoticPrediction:
    mu: tuple
    nu: tuple | None
    mean_tau: tuple
    ig_params: tuple  # ((mu_k, sigma2_k, a_k) for k = 0, 1)
    thresholds: tuple = ()


@dataclass(frozen=True)
class IidGaussianSpec:
    m0: float
    m1: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidParam("sigma must be positive")

    @classmethod
    def from_mu(cls, mu: float) -> "IidGaussianSpec":
        if mu < 0:
            raise InvalidParam("mu must be non-negative")
        return cls(0.0, math.sqrt(2.0 * mu), 1.0)

    @property
    def mu(self) -> float:
        return (self.m1 - self.m0) ** 2 / (2.0 * self.sigma**2)

    @property
    def nu(self) -> float:
        return 2.0 * self.mu


# ---------------------------------------------------------------------------
# drift


def llr_drift(pair: HypothesisPair, true_k: int) -> float:
    if pair.identical:
        return 0.0
    sys = with_steady_state(build_extended(pair, true_k))
    st = stationary_stats(sys)
    L = sys.llr_gain
    return float(0.5 * np.trace(L.T @ L @ st.W_tilde))


def asymptotic_drift(pair: HypothesisPair):
    """Stationary LLR drift rates ``(mu0, mu1)`` from the Lyapunov statistics."""
    return llr_drift(pair, 0), llr_drift(pair, 1)


def variance_rate(pair: HypothesisPair, k: int, T_fit: float, N: int = 2000, seed: int = 0,
                  dt: float = 1e-4, t_start: float | None = None, n_points: int = 20,
                  n_boot: int = 200, scheme: str = "auto"):
    """Slope of the ensemble variance of l_t over ``[t_start, T_fit]``.

    Returns ``(nu, standard_error)``; the error is a bootstrap over
    trajectories.
    """
    from .trajectory import NoiseStream, fixed_batch, make_stepper, n_steps_for

    if pair.identical:
        return 0.0, 0.0
    if N < 4:
        raise TooFewSamples("need at least 4 trajectories")
    t_start = T_fit / 2 if t_start is None else t_start
    times = np.linspace(t_start, T_fit, n_points)
    stepper = make_stepper(pair, k, dt, n_steps_for(T_fit, dt), scheme=scheme)
    _, ells, failed = fixed_batch(stepper, T_fit, times, [NoiseStream(seed, i, dt) for i in range(N)])
    ells = ells[~failed]
    nu = _var_slope(times, ells)
    rng = np.random.Generator(np.random.Philox(key=[seed, 2**63]))
    boots = [_var_slope(times, ells[rng.integers(0, len(ells), len(ells))]) for _ in range(n_boot)]
    return nu, float(np.std(boots, ddof=1))


def _var_slope(times, ells):
    v = np.var(ells, axis=0, ddof=1)
    return float(np.polyfit(times, v, 1)[0])


# ---------------------------------------------------------------------------
# stopping times


def mean_stopping_time(mu, a0: float, a1: float):
    """Wald mean stopping time per hypothesis, ``(E0[tau], E1[tau])``."""
    mu0, mu1 = (float(m) for m in mu)
    if mu0 <= 0 or mu1 <= 0:
        raise ZeroDrift("mean stopping time needs strictly positive drifts")
    al0, al1 = wald_error_bounds(a0, a1)
    e0 = (a0 * (1 - al1) - a1 * al1) / mu0
    e1 = (a1 * (1 - al0) - a0 * al0) / mu1
    return e0, e1


def inverse_gaussian_pdf(t, mu: float, sigma2: float, a: float):
    """Density of the normalised stopping time ``t~ = tau / a``.

    For l = mu t + sigma W first reaching ``a``; mean ``1/mu``.
    """
    t = np.asarray(t, dtype=float)
    s = sigma2 / a
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.exp(-((1 - mu * t) ** 2) / (2 * s * t)) / (np.sqrt(2 * np.pi * s) * t**1.5)
    p = np.where(t > 0, p, 0.0)
    return p if p.ndim else float(p)


def inverse_gaussian_cdf(t, mu: float, sigma2: float, a: float):
    """CDF matching :func:`inverse_gaussian_pdf` (closed form, log-space)."""
    t = np.asarray(t, dtype=float)
    m, lam = 1.0 / mu, a / sigma2
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(lam / t)
        first = np.exp(log_ndtr(r * (t / m - 1)))
        second = np.exp(2 * lam / m + log_ndtr(-r * (t / m + 1)))
    out = np.where(t > 0, np.clip(first + second, 0.0, 1.0), 0.0)
    return out if out.ndim else float(out)


def ig_params(mu, nu, a0: float, a1: float):
    """``(mu_k, sigma2_k, a_k)`` per hypothesis, with ``sigma2 = nu``."""
    return ((float(mu[0]), float(nu[0]), float(a0)), (float(mu[1]), float(nu[1]), float(a1)))


def first_passage_series(t, mu: float, sigma: float, a0: float, a1: float, n_terms: int | None = None,
                         split: bool = False):
    """Exit-time density of ``mu t + sigma W`` from ``(-a0, a1)`` by images.

    Returns the total density, or ``(lower, upper)`` with ``split=True``.
    ``n_terms=None`` sums image pairs until the newest pair is below 1e-12 of
    the running sum (cap 10^4 pairs).
    """
    if a0 <= 0 or a1 <= 0 or sigma <= 0:
        raise InvalidParam("barriers and sigma must be positive")
    if n_terms is not None and n_terms < 1:
        raise InvalidParam("n_terms must be >= 1")
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    pos = t > 0
    tp = np.where(pos, t, 1.0)
    L = a0 + a1
    s2 = sigma * sigma
    norm = sigma * np.sqrt(2 * np.pi * tp**3)

    def images(x):
        def term(k):
            y = x + 2 * k * L
            return y / norm * np.exp(-(y * y) / (2 * s2 * tp))

        total = term(0)
        cap = 10_000 if n_terms is None else n_terms - 1
        for k in range(1, cap + 1):
            pair = term(k) + term(-k)
            total = total + pair
            if n_terms is None and np.all(np.abs(pair) <= 1e-12 * np.abs(total) + 1e-300):
                break
        return total

    upper = np.exp(mu * a1 / s2 - mu * mu * tp / (2 * s2)) * images(a1)
    lower = np.exp(-mu * a0 / s2 - mu * mu * tp / (2 * s2)) * images(a0)
    upper = np.where(pos, upper, 0.0)
    lower = np.where(pos, lower, 0.0)
    if split:
        return (float(lower[0]), float(upper[0])) if scalar else (lower, upper)
    total = lower + upper
    return float(total[0]) if scalar else total


# ---------------------------------------------------------------------------
# IID Gaussian observations


def iid_fixed_errors(t, a: float, mu: float):
    """Fixed-horizon errors ``(alpha0, alpha1)`` for l_t ~ N(+-mu t, 2 mu t)."""
    if mu <= 0:
        raise ZeroDrift("mu must be positive")
    t = np.asarray(t, dtype=float)
    root = 2 * np.sqrt(mu * t)
    alpha0 = 0.5 * erfc((t * mu - a) / root)
    alpha1 = 0.5 * erfc((t * mu + a) / root)
    return alpha0, alpha1


def iid_rates(mu: float, xi):
    """Asymptotic exponents ``(R0, R1)`` for the threshold ``a = xi t``."""
    xi = np.asarray(xi, dtype=float)
    return (mu + xi) ** 2 / (4 * mu), (mu - xi) ** 2 / (4 * mu)


def iid_det_time(mu: float, eps: float) -> float:
    """Exact horizon where the symmetric fixed-horizon error equals ``eps``."""
    if not 0 < eps < 0.5:
        raise InvalidParam("eps must lie in (0, 1/2)")
    return float((2 * erfcinv(2 * eps)) ** 2 / mu)


def iid_summary(spec: IidGaussianSpec, eps: float) -> dict:
    mu = spec.mu
    if mu <= 0:
        raise ZeroDrift("identical means")
    if not 0 < eps < 0.5:
        raise InvalidParam("eps must lie in (0, 1/2)")
    a = math.log((1 - eps) / eps)
    tau_asym = -math.log(eps) / mu
    t_exact = iid_det_time(mu, eps)
    tau_wald = a * (1 - 2 * eps) / mu
    return {
        "mu": mu, "nu": spec.nu, "R_sym": mu / 4, "stein": (mu, mu),
        "mean_tau_asymptotic": tau_asym, "mean_tau_wald": tau_wald,
        "T_det_asymptotic": 4 * tau_asym, "T_det_exact": t_exact,
        "ratio_asymptotic": 4.0, "ratio_exact": t_exact / tau_wald,
    }


def iid_rate_regions(mu: float, n: int = 51):
    """Boundary of the fixed-horizon exponent region and the sequential corner."""
    xi = np.linspace(-mu, mu, n)
    r0, r1 = iid_rates(mu, xi)
    return {"xi": xi, "det_R0": r0, "det_R1": r1, "seq_corner": (mu, mu)}


# ---------------------------------------------------------------------------
# damping closed forms


@dataclass(frozen=True)
class DampingClosedForms:
    sigma0: float
    sigma1: float
    mu0: float
    mu1: float


def damping_sigma(gamma: float, kappa: float, eta: float, sigma_uc: float) -> float:
    """Positive root of ``-gamma s + gamma sigma_uc - 4 eta kappa s^2 = 0``.

    ``D`` here is ``gamma * sigma_uc``.
    """
    if gamma <= 0 or kappa <= 0 or not 0 < eta <= 1:
        raise InvalidParam("need gamma > 0, kappa > 0, 0 < eta <= 1")
    q = 16 * eta * kappa * sigma_uc / gamma
    # sqrt(1+q)-1 = q/(sqrt(1+q)+1), stable for small q
    return gamma / (8 * eta * kappa) * q / (math.sqrt(1 + q) + 1)


def _damping_mu(c, g_true, g_other, chi_true, chi_other):
    """Drift under the hypothesis with damping ``g_true``."""
    x0, x1, g0, g1 = chi_other, chi_true, g_other, g_true
    num = (x0 * x0 * g1 * g1 + 2 * c * g1 * x0 * (x0 - x1) ** 2 + x1 * x1 * g0 * g0
           + g0 * g1 * (x0 * x0 - 4 * x0 * x1 + x1 * x1))
    den = g1 * (g0 + 2 * c * x0) * (g0 + g1 + 2 * c * x0)
    return c * c * num / den


def damping_closed_forms(gamma0=100.0, gamma1=440.0, kappa=10.0, eta=1.0, nbar=1.0) -> DampingClosedForms:
    if gamma0 <= 0 or gamma1 <= 0:
        raise InvalidParam("damping rates must be positive")
    s_uc0 = nbar + 0.5 + kappa / gamma0
    s_uc1 = nbar + 0.5 + kappa / gamma1
    s0 = damping_sigma(gamma0, kappa, eta, s_uc0)
    s1 = damping_sigma(gamma1, kappa, eta, s_uc1)
    c = -math.sqrt(4 * eta * kappa)
    x0, x1 = c * s0, c * s1
    mu1 = _damping_mu(c, gamma1, gamma0, x1, x0)
    mu0 = _damping_mu(c, gamma0, gamma1, x0, x1)
    return DampingClosedForms(sigma0=s0, sigma1=s1, mu0=mu0, mu1=mu1)


# ---------------------------------------------------------------------------
# Gaussian-LLR constraint


@dataclass(frozen=True)
class LlrConsistency:
    consistent: bool
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.consistent


def gaussian_llr_consistency(mu0: float, mu1: float, nu0: float, nu1: float, tol: float = 0.05) -> LlrConsistency:
    """A Gaussian LLR needs ``mu0 = mu1`` and ``nu_k = 2 mu_k``."""
    mmax = max(abs(mu0), abs(mu1))
    mu_gap = abs(mu0 - mu1)
    nu_gaps = (abs(nu0 - 2 * mu0), abs(nu1 - 2 * mu1))
    ok_mu = mu_gap <= tol * mmax
    ok_nu = nu_gaps[0] <= tol * abs(nu0) and nu_gaps[1] <= tol * abs(nu1)
    details = {
        "mu_gap": mu_gap,
        "mu_gap_rel": mu_gap / mmax if mmax > 0 else 0.0,
        "nu_gaps": nu_gaps,
        "mu_equal": ok_mu,
        "nu_twice_mu": ok_nu,
    }
    return LlrConsistency(bool(ok_mu and ok_nu), details)


# ---------------------------------------------------------------------------
# bundle


def predict(pair: HypothesisPair, a0: float, a1: float, nu=None) -> AsymptoticPrediction:
    mu = asymptotic_drift(pair)
    tau = mean_stopping_time(mu, a0, a1)
    nu_used = tuple(nu) if nu is not None else (2 * mu[0], 2 * mu[1])
    return AsymptoticPrediction(mu=mu, nu=None if nu is None else tuple(nu), mean_tau=tau,
                                ig_params=ig_params(mu, nu_used, a0, a1), thresholds=(a0, a1))


def det_time_for_error(times, errors, target: float):
    """First time where a (noisy, decreasing) error curve reaches ``target``.

    Log-linear interpolation between the bracketing grid points; ``nan`` if
    never reached.
    """
    times = np.asarray(times, dtype=float)
    errors = np.asarray(errors, dtype=float)
    below = np.nonzero(errors <= target)[0]
    if below.size == 0:
        return float("nan")
    i = int(below[0])
    if i == 0:
        return float(times[0])
    e_hi, e_lo = errors[i - 1], errors[i]
    if e_lo <= 0:
        return float(times[i - 1] + (times[i] - times[i - 1]) * (e_hi - target) / (e_hi - e_lo))
    w = (math.log(e_hi) - math.log(target)) / (math.log(e_hi) - math.log(e_lo))
    return float(times[i - 1] + w * (times[i] - times[i - 1]))


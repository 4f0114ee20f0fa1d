"""Threshold construction, Wald error relations and empirical error rates."""

from __future__ import annotations

from dataclasses import dataclass
import enum
import math

import numpy as np

from .errors import EmptyEnsemble, InvalidParam, NoConvergence, NonPositiveThreshold

Z95 = 1.959963984540054


class Mode(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"
    DIRECT = "direct"


class UndecidedPolicy(str, enum.Enum):
    EXCLUDE = "exclude"
    SIGN = "sign"


@dataclass(frozen=True)
class SprtConfig:
    a0: float
    a1: float
    mode: Mode = Mode.DIRECT
    targets: tuple = ()

    def __post_init__(self):
        if not (math.isfinite(self.a0) and math.isfinite(self.a1)) or self.a0 <= 0 or self.a1 <= 0:
            raise NonPositiveThreshold(f"thresholds must be positive and finite, got ({self.a0}, {self.a1})")
        object.__setattr__(self, "mode", Mode(self.mode))

    @classmethod
    def strong(cls, eps0: float, eps1: float | None = None, pi0: float = 0.5) -> "SprtConfig":
        eps1 = eps0 if eps1 is None else eps1
        a0, a1 = thresholds_from_strong(eps0, eps1, pi0)
        return cls(a0, a1, Mode.STRONG, (eps0, eps1, pi0))

    @classmethod
    def weak(cls, alpha0: float, alpha1: float | None = None) -> "SprtConfig":
        alpha1 = alpha0 if alpha1 is None else alpha1
        a0, a1 = thresholds_from_weak(alpha0, alpha1)
        return cls(a0, a1, Mode.WEAK, (alpha0, alpha1))

    @classmethod
    def direct(cls, a0: float, a1: float) -> "SprtConfig":
        return cls(float(a0), float(a1), Mode.DIRECT, ())

    @property
    def thresholds(self):
        return self.a0, self.a1


@dataclass(frozen=True)
class ErrorEstimate:
    point: float
    ci_lo: float
    ci_hi: float
    n_trials: int
    n_errors: int

    def to_dict(self) -> dict:
        return {"point": self.point, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi,
                "n_trials": self.n_trials, "n_errors": self.n_errors}


def _check_prob(name, p, lo=0.0, hi=1.0):
    if not (lo < p < hi):
        raise InvalidParam(f"{name} must lie in ({lo}, {hi}), got {p}")


def thresholds_from_strong(eps0: float, eps1: float, pi0: float = 0.5):
    """Thresholds certifying posterior error at most ``eps_k`` at decision time."""
    _check_prob("eps0", eps0)
    _check_prob("eps1", eps1)
    _check_prob("pi0", pi0)
    pi1 = 1.0 - pi0
    a0 = math.log((1 - eps0) / eps0 * pi0 / pi1)
    a1 = math.log((1 - eps1) / eps1 * pi1 / pi0)
    if a0 <= 0 or a1 <= 0:
        raise NonPositiveThreshold(f"targets and priors give non-positive thresholds ({a0:.4g}, {a1:.4g})")
    return a0, a1


def wald_error_bounds(a0: float, a1: float):
    """Type I/II errors of an SPRT without overshoot."""
    if a0 <= 0 or a1 <= 0:
        raise NonPositiveThreshold("thresholds must be positive")
    # expm1 form keeps precision for small and large a
    den = -math.expm1(-(a0 + a1))  # 1 - e^{-(a0+a1)}
    alpha0 = -math.expm1(-a1) * math.exp(-a0) / den
    alpha1 = -math.expm1(-a0) * math.exp(-a1) / den
    return alpha0, alpha1


def thresholds_from_weak(alpha0: float, alpha1: float, tol: float = 1e-12, max_iter: int = 100):
    """Invert :func:`wald_error_bounds` by damped Newton in (a0, a1)."""
    _check_prob("alpha0", alpha0, 0.0, 0.5)
    _check_prob("alpha1", alpha1, 0.0, 0.5)
    target = np.array([alpha0, alpha1])
    # decoupled seed: alpha_k ~ 1/(1 + e^{a_{k+1}}) when the other threshold is large
    a = np.array([math.log(1 / alpha1 - 1), math.log(1 / alpha0 - 1)])

    def resid(x):
        return np.log(np.array(wald_error_bounds(*x))) - np.log(target)

    r = resid(a)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            return float(a[0]), float(a[1])
        h = 1e-7
        J = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h * max(1.0, a[j])
            J[:, j] = (resid(a + e) - resid(a - e)) / (2 * e[j])
        step = np.linalg.solve(J, -r)
        lam = 1.0
        while lam > 1e-6:
            trial = a + lam * step
            if np.all(trial > 0):
                rt = resid(trial)
                if np.max(np.abs(rt)) < np.max(np.abs(r)):
                    a, r = trial, rt
                    break
            lam *= 0.5
        else:
            break
    if np.max(np.abs(r)) < tol:
        return float(a[0]), float(a[1])
    raise NoConvergence(f"weak-error inversion stalled, residual {np.max(np.abs(r)):.3g}")


def deterministic_decide(ell_T, a: float = 0.0):
    """Fixed-horizon decision: 1 iff l >= a (ties go to h1)."""
    out = np.asarray(ell_T) >= a
    return out.astype(int) if out.ndim else int(out)


def wilson_interval(n_errors: int, n_trials: int, z: float = Z95):
    if n_trials <= 0:
        raise EmptyEnsemble("no trials")
    p = n_errors / n_trials
    z2 = z * z
    den = 1 + z2 / n_trials
    centre = (p + z2 / (2 * n_trials)) / den
    half = z * math.sqrt(p * (1 - p) / n_trials + z2 / (4 * n_trials**2)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


def error_estimate(n_errors: int, n_trials: int) -> ErrorEstimate:
    lo, hi = wilson_interval(n_errors, n_trials)
    p = n_errors / n_trials
    return ErrorEstimate(point=p, ci_lo=min(lo, p), ci_hi=max(hi, p), n_trials=int(n_trials), n_errors=int(n_errors))


def estimate_error(decisions, true_k: int, policy=UndecidedPolicy.EXCLUDE, ell_final=None) -> ErrorEstimate:
    """Empirical error fraction with a 95% Wilson interval.

    ``decisions`` holds 0, 1, or ``None``/-1 for undecided trajectories.  With
    ``policy="sign"`` undecided ones are decided by the sign of ``ell_final``.
    """
    if true_k not in (0, 1):
        raise InvalidParam("true_k must be 0 or 1")
    policy = UndecidedPolicy(policy)
    d = np.array([-1 if x is None else x for x in decisions], dtype=int)
    undecided = d < 0
    if undecided.any() and policy is UndecidedPolicy.SIGN:
        if ell_final is None:
            raise InvalidParam("sign policy needs ell_final")
        d = d.copy()
        d[undecided] = deterministic_decide(np.asarray(ell_final, dtype=float)[undecided], 0.0)
        undecided = np.zeros_like(undecided)
    d = d[~undecided]
    if d.size == 0:
        raise EmptyEnsemble("every trajectory is undecided")
    return error_estimate(int(np.sum(d != true_k)), int(d.size))

"""Deterministic matrix machinery for the filters and the extended system."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NoConvergence, NotHurwitz, SingularSystem
from .model import ExtendedSystem, GaussianModel, block_diag


@dataclass(frozen=True, eq=False)
class StationaryStats:
    """Stationary law of X: mean ``d``, covariance ``W``, second moment ``W_tilde``."""

    d: np.ndarray
    W: np.ndarray
    W_tilde: np.ndarray


def stability_check(M) -> float:
    """Spectral abscissa (largest real part of the eigenvalues)."""
    M = np.asarray(M, dtype=float)
    return float(np.max(np.linalg.eigvals(M).real))


def _require_hurwitz(M, what="matrix"):
    s = stability_check(M)
    if s >= 0:
        raise NotHurwitz(f"{what} is not Hurwitz (spectral abscissa {s:.3g})")
    return s


def lyapunov_solve(M, Q, tol: float = 1e-9) -> np.ndarray:
    """Solve ``M W + W M^T + Q = 0`` by vectorisation.

    Intended for k <= 16; the Kronecker system is k^2 x k^2.
    """
    M = np.asarray(M, dtype=float)
    Q = np.asarray(Q, dtype=float)
    k = M.shape[0]
    _require_hurwitz(M)
    eye = np.eye(k)
    K = np.kron(eye, M) + np.kron(M, eye)
    try:
        w = np.linalg.solve(K, -Q.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    W = w.reshape((k, k), order="F")
    W = 0.5 * (W + W.T)
    res = np.linalg.norm(M @ W + W @ M.T + Q)
    scale = max(np.linalg.norm(Q), np.linalg.norm(M) * np.linalg.norm(W), 1e-300)
    if res > tol * scale:
        raise SingularSystem(f"Lyapunov residual {res:.3g} too large (ill-conditioned system)")
    return W


def stationary_mean(M, B) -> np.ndarray:
    """Fixed point of ``dX = (M X + B) dt``, i.e. ``d = -M^{-1} B``."""
    M = np.asarray(M, dtype=float)
    B = np.asarray(B, dtype=float)
    _require_hurwitz(M)
    return -np.linalg.solve(M, B)


def unconditional_covariance(model: GaussianModel) -> np.ndarray:
    """Steady state of the unmonitored covariance, ``A s + s A^T + D = 0``."""
    return lyapunov_solve(model.A, model.D)


def _riccati_seed(model: GaussianModel) -> np.ndarray:
    if stability_check(model.A) < 0:
        return unconditional_covariance(model)
    return np.eye(model.dim)


def riccati_steady_state(model: GaussianModel, tol: float = 1e-10, max_time: float | None = None,
                         seed: np.ndarray | None = None, window: int = 10) -> np.ndarray:
    """Integrate the covariance Riccati ODE until it stops moving.

    Classical RK4 with a step tied to the fastest rate of the linearised
    flow.  Converged once ``||dsigma/dt||_F < tol ||D||_F`` on ``window``
    consecutive steps.
    """
    sigma = np.array(_riccati_seed(model) if seed is None else seed, dtype=float)
    blowup = 1e12 * max(1.0, np.linalg.norm(sigma))
    D_norm = max(np.linalg.norm(model.D), np.linalg.norm(model.C) ** 2, 1e-300)
    f = model.riccati_rhs

    def rate_bound(s):
        chi = model.chi(s)
        return np.linalg.norm(model.A, 2) + np.linalg.norm(chi, 2) * np.linalg.norm(model.C, 2) + 1.0

    rate = rate_bound(sigma)
    h = 0.2 / rate
    if max_time is None:
        max_time = 2e5 / rate
    t, calm = 0.0, 0
    while t < max_time:
        k1 = f(sigma)
        if np.linalg.norm(k1) < tol * D_norm:
            calm += 1
            if calm >= window:
                return 0.5 * (sigma + sigma.T)
        else:
            calm = 0
        k2 = f(sigma + 0.5 * h * k1)
        k3 = f(sigma + 0.5 * h * k2)
        k4 = f(sigma + h * k3)
        sigma = sigma + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        sigma = 0.5 * (sigma + sigma.T)
        t += h
        if not np.all(np.isfinite(sigma)) or np.linalg.norm(sigma) > blowup:
            raise NoConvergence(f"Riccati flow diverged at t={t:.3g}")
        new_rate = rate_bound(sigma)
        if new_rate > 1.5 * rate or new_rate < rate / 1.5:
            rate = new_rate
            h = 0.2 / rate
    res = np.linalg.norm(f(sigma))
    raise NoConvergence(f"Riccati residual {res:.3g} after t={max_time:.3g}")


def riccati_residual(model: GaussianModel, sigma) -> float:
    """``||A s + s A^T + D - chi chi^T||_F / ||D||_F``."""
    return float(np.linalg.norm(model.riccati_rhs(np.asarray(sigma, dtype=float))) / max(np.linalg.norm(model.D), 1e-300))


def with_steady_state(sys: ExtendedSystem, tol: float = 1e-10) -> ExtendedSystem:
    """Return ``sys`` with ``Sigma_ss = sigma0 (+) sigma1`` filled in."""
    if sys.Sigma_ss is not None:
        return sys
    s0 = riccati_steady_state(sys.model0, tol=tol)
    s1 = s0 if sys.model1.equals(sys.model0) else riccati_steady_state(sys.model1, tol=tol)
    Sigma = block_diag(s0, s1)
    Sigma.setflags(write=False)
    return replace(sys, Sigma_ss=Sigma)


def stationary_stats(sys: ExtendedSystem) -> StationaryStats:
    """Stationary mean and covariance of X with the covariance pinned."""
    sys = with_steady_state(sys)
    M = sys.drift()
    _require_hurwitz(M, "extended drift")
    G = sys.noise_gain()
    W = lyapunov_solve(M, G @ G.T)
    d = stationary_mean(M, sys.B)
    return StationaryStats(d=d, W=W, W_tilde=W + np.outer(d, d))

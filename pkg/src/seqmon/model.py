"""Gaussian hypothesis models and the extended two-filter system.

A hypothesis is a linear Gaussian model for the conditional first moment
``r`` and covariance ``sigma`` of an ``n``-mode system read out through ``m``
homodyne channels::

    dr     = (A r + b) dt + chi(sigma) (dy - C r dt)
    dsigma = (A sigma + sigma A^T + D - chi chi^T) dt
    dy     = C r dt + dw,        chi(sigma) = sigma C^T - Gamma

Testing h0 against h1 means running both filters on the *same* record.
Stacking ``X = (r0, r1)`` gives a single linear SDE driven by the innovation
of whichever hypothesis generated the record; :class:`ExtendedSystem` holds
its block matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import DimensionMismatch, InvalidParam, NonFinite, NonSymmetricD

TOL_PSD = 1e-10


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim == 0 and ndim == 2:
        arr = arr.reshape(1, 1)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def block_diag(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[: a.shape[0], : a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


@dataclass(frozen=True, eq=False)
class GaussianModel:
    """Coefficients of one hypothesis (SI units, rates in 1/s).

    ``C`` has units of s^-1/2 so that ``C r dt`` and ``dw`` are commensurate.
    """

    A: np.ndarray
    b: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A, 2, "A"))
        object.__setattr__(self, "b", _frozen(self.b, 1, "b"))
        object.__setattr__(self, "C", _frozen(self.C, 2, "C"))
        object.__setattr__(self, "D", _frozen(self.D, 2, "D"))
        object.__setattr__(self, "Gamma", _frozen(self.Gamma, 2, "Gamma"))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def n_modes(self) -> int:
        return self.A.shape[0] // 2

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def chi(self, sigma: np.ndarray) -> np.ndarray:
        return sigma @ self.C.T - self.Gamma

    def riccati_rhs(self, sigma: np.ndarray) -> np.ndarray:
        chi = self.chi(sigma)
        return self.A @ sigma + sigma @ self.A.T + self.D - chi @ chi.T

    def equals(self, other: "GaussianModel") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("A", "b", "C", "D", "Gamma")
        )

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in ("A", "b", "C", "D", "Gamma")}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianModel":
        dim = np.asarray(d["A"]).shape[0]
        C = np.asarray(d["C"], dtype=float)
        m = C.shape[0] if C.ndim == 2 else 1
        return cls(
            A=d["A"],
            b=d.get("b", np.zeros(dim)),
            C=d["C"],
            D=d["D"],
            Gamma=d.get("Gamma", np.zeros((dim, m))),
        )


def validate_model(model: GaussianModel, tol_psd: float = TOL_PSD) -> GaussianModel:
    """Return ``model`` unchanged if it is internally consistent, else raise."""
    A, b, C, D, G = model.A, model.b, model.C, model.D, model.Gamma
    k = A.shape[0]
    if A.shape != (k, k) or k == 0 or k % 2:
        raise DimensionMismatch(f"A must be square of even size 2n, got {A.shape}")
    if b.shape != (k,):
        raise DimensionMismatch(f"b must have length {k}, got {b.shape}")
    if C.ndim != 2 or C.shape[1] != k or C.shape[0] == 0:
        raise DimensionMismatch(f"C must be m x {k}, got {C.shape}")
    m = C.shape[0]
    if D.shape != (k, k):
        raise DimensionMismatch(f"D must be {k} x {k}, got {D.shape}")
    if G.shape != (k, m):
        raise DimensionMismatch(f"Gamma must be {k} x {m}, got {G.shape}")
    for name in ("A", "b", "C", "D", "Gamma"):
        if not np.all(np.isfinite(getattr(model, name))):
            raise NonFinite(f"{name} has non-finite entries")
    scale = max(float(np.max(np.abs(D))), 1e-300)
    if np.max(np.abs(D - D.T)) > tol_psd * scale:
        raise NonSymmetricD("D is not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (D + D.T))
    if eig.min() < -tol_psd * max(np.max(np.abs(eig)), 1e-300):
        raise NonSymmetricD(f"D is not positive semi-definite (min eigenvalue {eig.min():.3g})")
    return model


@dataclass(frozen=True, eq=False)
class HypothesisPair:
    model0: GaussianModel
    model1: GaussianModel
    priors: tuple = (0.5, 0.5)

    def __post_init__(self):
        validate_model(self.model0)
        validate_model(self.model1)
        m0, m1 = self.model0, self.model1
        if m0.dim != m1.dim or m0.m != m1.m:
            raise DimensionMismatch("models must share the number of modes and channels")
        if not np.array_equal(m0.C, m1.C):
            raise DimensionMismatch("models must share the measurement matrix C")
        p0, p1 = (float(p) for p in self.priors)
        if not (0.0 <= p0 <= 1.0 and 0.0 <= p1 <= 1.0) or abs(p0 + p1 - 1.0) > 1e-12:
            raise InvalidParam(f"priors must be probabilities summing to 1, got {self.priors}")
        object.__setattr__(self, "priors", (p0, p1))

    @property
    def C(self) -> np.ndarray:
        return self.model0.C

    def models(self):
        return (self.model0, self.model1)

    def swapped(self) -> "HypothesisPair":
        return HypothesisPair(self.model1, self.model0, (self.priors[1], self.priors[0]))

    @property
    def identical(self) -> bool:
        return self.model0.equals(self.model1)


def selector(true_k: int, m: int) -> np.ndarray:
    """The 2m x 2m block matrix Pi_k.

    Row block j of ``Pi_k calC X`` is ``C (r_j - r_k)``: the amount by which
    filter j's prediction misses the true signal.  It vanishes for j = k.
    """
    eye, zero = np.eye(m), np.zeros((m, m))
    if true_k == 0:
        return np.block([[zero, zero], [-eye, eye]])
    if true_k == 1:
        return np.block([[eye, -eye], [zero, zero]])
    raise InvalidParam(f"true_k must be 0 or 1, got {true_k}")


@dataclass(frozen=True, eq=False)
class ExtendedSystem:
    """Coupled filters ``X = (r0, r1)`` under hypothesis ``true_k``.

    With ``chi = Sigma calC^T - GammaTilde`` the stacked moments obey::

        dX = (calA - chi Pi_k calC) X dt + B dt + chi Q dw,    Q = (1, 1)^T

    and the log-likelihood ratio obeys::

        dl = (-1)^(k+1)/2 |Delta^T calC X|^2 dt + (Delta^T calC X) . dw

    with ``Delta^T calC X = C (r1 - r0)``.
    """

    true_k: int
    model0: GaussianModel
    model1: GaussianModel
    calA: np.ndarray
    calC: np.ndarray
    calD: np.ndarray
    GammaTilde: np.ndarray
    B: np.ndarray
    Pi_k: np.ndarray
    Delta: np.ndarray
    Sigma_ss: np.ndarray | None = field(default=None)

    @property
    def dim(self) -> int:
        return self.calA.shape[0]

    @property
    def m(self) -> int:
        return self.model0.m

    @property
    def models(self):
        return (self.model0, self.model1)

    def chi(self, Sigma: np.ndarray) -> np.ndarray:
        return Sigma @ self.calC.T - self.GammaTilde

    def drift(self, Sigma: np.ndarray | None = None) -> np.ndarray:
        Sigma = self._sigma(Sigma)
        return self.calA - self.chi(Sigma) @ self.Pi_k @ self.calC

    def noise_gain(self, Sigma: np.ndarray | None = None) -> np.ndarray:
        Sigma = self._sigma(Sigma)
        m = self.m
        return self.chi(Sigma) @ np.vstack([np.eye(m), np.eye(m)])

    @property
    def llr_gain(self) -> np.ndarray:
        return self.Delta.T @ self.calC

    def llr_sign(self) -> float:
        return 1.0 if self.true_k == 1 else -1.0

    def _sigma(self, Sigma):
        if Sigma is None:
            if self.Sigma_ss is None:
                raise ValueError("steady-state covariance not attached; use solvers.with_steady_state")
            return self.Sigma_ss
        return Sigma

    def sigma_blocks(self, Sigma: np.ndarray | None = None):
        Sigma = self._sigma(Sigma)
        k = self.model0.dim
        return Sigma[:k, :k], Sigma[k:, k:]


def build_extended(pair: HypothesisPair, true_k: int, Sigma_ss: np.ndarray | None = None) -> ExtendedSystem:
    m0, m1 = pair.model0, pair.model1
    m = m0.m
    calA = block_diag(m0.A, m1.A)
    calC = block_diag(m0.C, m1.C)
    calD = block_diag(m0.D, m1.D)
    GammaTilde = block_diag(m0.Gamma, m1.Gamma)
    B = np.concatenate([m0.b, m1.b])
    Delta = np.vstack([-np.eye(m), np.eye(m)])
    mats = [calA, calC, calD, GammaTilde, B, Delta]
    Pi = selector(true_k, m)
    mats.append(Pi)
    for a in mats:
        a.setflags(write=False)
    if Sigma_ss is not None:
        Sigma_ss = np.array(Sigma_ss, dtype=float)
        Sigma_ss.setflags(write=False)
    return ExtendedSystem(
        true_k=true_k, model0=m0, model1=m1, calA=calA, calC=calC, calD=calD,
        GammaTilde=GammaTilde, B=B, Pi_k=Pi, Delta=Delta, Sigma_ss=Sigma_ss,
    )


# ---------------------------------------------------------------------------
# optomechanical presets


@dataclass(frozen=True)
class OptomechParams:
    gamma: float
    kappa: float
    eta: float = 1.0
    nbar: float = 1.0
    omega: float = 0.0
    b_force: float = 0.0

    def __post_init__(self):
        for name in ("gamma", "kappa", "eta", "nbar", "omega", "b_force"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidParam(f"{name} must be finite and non-negative, got {v}")
        if self.gamma <= 0:
            raise InvalidParam("gamma must be positive")
        if self.kappa <= 0:
            raise InvalidParam("kappa must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise InvalidParam(f"eta must lie in (0, 1], got {self.eta}")

    @property
    def sigma_uc(self) -> float:
        """Unconditional steady-state variance nbar + 1/2 + kappa/gamma."""
        return self.nbar + 0.5 + self.kappa / self.gamma

    @property
    def c(self) -> float:
        return math.sqrt(4.0 * self.eta * self.kappa)


def _damping_model(p: OptomechParams) -> GaussianModel:
    eye = np.eye(2)
    return GaussianModel(
        A=-0.5 * p.gamma * eye,
        b=np.zeros(2),
        C=-p.c * eye,
        D=p.gamma * p.sigma_uc * eye,
        Gamma=np.zeros((2, 2)),
    )


def _oscillator_model(p: OptomechParams, omega: float, b: float) -> GaussianModel:
    A = np.array([[-0.5 * p.gamma, -omega], [omega, -0.5 * p.gamma]])
    C = p.c * np.array([[1.0, 0.0], [0.0, 0.0]])
    return GaussianModel(
        A=A,
        b=np.array([0.0, b]),
        C=C,
        D=p.gamma * p.sigma_uc * np.eye(2),
        Gamma=np.zeros((2, 2)),
    )


def preset_damping(gamma0=100.0, gamma1=440.0, kappa=10.0, eta=1.0, nbar=1.0, priors=(0.5, 0.5)) -> HypothesisPair:
    """Damping-rate discrimination in the rotating frame."""
    p0 = OptomechParams(gamma=gamma0, kappa=kappa, eta=eta, nbar=nbar)
    p1 = OptomechParams(gamma=gamma1, kappa=kappa, eta=eta, nbar=nbar)
    return HypothesisPair(_damping_model(p0), _damping_model(p1), priors)


def preset_frequency(omega0=1e5, omega1=1.02e5, gamma=500.0, kappa=1e3, eta=1.0, nbar=1.0,
                     priors=(0.5, 0.5)) -> HypothesisPair:
    """Mechanical-frequency discrimination, one quadrature monitored."""
    if omega0 <= 0 or omega1 <= 0:
        raise InvalidParam("frequencies must be positive")
    p = OptomechParams(gamma=gamma, kappa=kappa, eta=eta, nbar=nbar)
    return HypothesisPair(_oscillator_model(p, omega0, 0.0), _oscillator_model(p, omega1, 0.0), priors)


def preset_frequency_scaled(scale=100.0, priors=(0.5, 0.5)) -> HypothesisPair:
    """Frequency scenario with every rate divided by ``scale``.

    Time stretches by ``scale``; the LLR path at ``t * scale`` in this model
    equals the original one at ``t``, so drifts shrink by ``1 / scale``.
    """
    return preset_frequency(1e5 / scale, 1.02e5 / scale, 500.0 / scale, 1e3 / scale, 1.0, 1.0, priors)


def preset_force(b0=0.0, b1=40.0, gamma=500.0, kappa=10.0, omega=1e3, eta=0.1, nbar=1.0,
                 priors=(0.5, 0.5)) -> HypothesisPair:
    """Constant-force detection: the drive enters the momentum equation."""
    if omega <= 0:
        raise InvalidParam("omega must be positive")
    for name, v in (("b0", b0), ("b1", b1)):
        if not math.isfinite(v):
            raise InvalidParam(f"{name} must be finite")
    p = OptomechParams(gamma=gamma, kappa=kappa, eta=eta, nbar=nbar, omega=omega)
    return HypothesisPair(_oscillator_model(p, omega, b0), _oscillator_model(p, omega, b1), priors)


PRESETS = {
    "damping": preset_damping,
    "frequency": preset_frequency,
    "frequency_scaled": preset_frequency_scaled,
    "force": preset_force,
}

"""Parameter containers and the per-profile frequency/severity kernels.

Claim counts given profile ``j`` are Negative Binomial (a Poisson whose rate
``e * lambda * U`` carries a Gamma(a_U, b_U) heterogeneity factor).  Claim
sizes are GB2 (a Gamma with shape ``mu`` and rate ``phi / V`` mixed over an
Inverse-Gamma(a_V, b_V) factor ``V``).  ``mu`` is stored as the Gamma shape
``phi * exp(B @ delta_B)``, so the conditional mean severity is ``mu / phi * V``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special as sps

from .special import DomainError, log_gamma, log_gamma_diff

__all__ = [
    "Representation",
    "ProfileFrequencyParams",
    "ProfileSeverityParams",
    "TransitionModel",
    "ModelParameters",
    "PosteriorHyperparams",
    "lambda_mean",
    "mu_shape",
    "nb_log_pmf",
    "nb_cdf",
    "gb2_log_pdf",
    "gb2_cdf",
    "gb2_mean",
    "posterior_hyperparams",
    "nb_mean_variance",
]


class Representation(str, enum.Enum):
    FULL = "full"
    SPARSE = "sparse"


@dataclass(frozen=True)
class ProfileFrequencyParams:
    delta_A: np.ndarray
    a_U: float
    b_U: float

    def __post_init__(self):
        object.__setattr__(self, "delta_A", np.asarray(self.delta_A, dtype=float))
        if not (self.a_U > 0 and self.b_U > 0):
            raise DomainError("a_U and b_U must be positive")


@dataclass(frozen=True)
class ProfileSeverityParams:
    delta_B: np.ndarray
    phi: float
    a_V: float
    b_V: float

    def __post_init__(self):
        object.__setattr__(self, "delta_B", np.asarray(self.delta_B, dtype=float))
        if not self.phi > 0:
            raise DomainError("phi must be positive")
        if not self.a_V > 1:
            raise DomainError("a_V must exceed 1")
        if not self.b_V > 0:
            raise DomainError("b_V must be positive")


@dataclass(frozen=True)
class TransitionModel:
    w0: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        w0 = np.asarray(self.w0, dtype=float)
        W = np.asarray(self.W, dtype=float)
        K = w0.shape[0]
        if W.shape != (K, K):
            raise ValueError(f"W must be {K}x{K}, got {W.shape}")
        if np.any(w0 < 0) or np.any(W < 0) or np.any(w0 > 1) or np.any(W > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if abs(w0.sum() - 1.0) > 1e-12 or np.any(np.abs(W.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("w0 and every row of W must sum to one")
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "W", W)

    @property
    def K(self) -> int:
        return self.w0.shape[0]


@dataclass(frozen=True)
class ModelParameters:
    """Everything estimable for ``K`` latent profiles.

    In the sparse representation the regression effects and ``phi`` are
    shared, and the intercept entries of ``delta_A`` and ``delta_B`` are
    pinned at zero: the frequency intercept is absorbed by ``b_U`` and the
    severity intercept by ``(phi, b_V)``.
    """

    representation: Representation
    frequency: tuple[ProfileFrequencyParams, ...]
    severity: tuple[ProfileSeverityParams, ...]
    transitions: TransitionModel

    def __post_init__(self):
        rep = Representation(self.representation)
        object.__setattr__(self, "representation", rep)
        object.__setattr__(self, "frequency", tuple(self.frequency))
        object.__setattr__(self, "severity", tuple(self.severity))
        K = self.transitions.K
        if len(self.frequency) != K or len(self.severity) != K:
            raise ValueError("profile count does not match the transition model")
        if rep is Representation.FULL:
            for f, s in zip(self.frequency, self.severity):
                if not math.isclose(f.b_U, f.a_U, rel_tol=1e-12):
                    raise ValueError("full representation requires b_U == a_U")
                if not math.isclose(s.b_V, s.a_V - 1.0, rel_tol=1e-12):
                    raise ValueError("full representation requires b_V == a_V - 1")
        else:
            f0, s0 = self.frequency[0], self.severity[0]
            for f, s in zip(self.frequency, self.severity):
                if not (np.array_equal(f.delta_A, f0.delta_A)
                        and np.array_equal(s.delta_B, s0.delta_B)
                        and s.phi == s0.phi):
                    raise ValueError("sparse representation shares delta_A, phi and delta_B")

    @property
    def K(self) -> int:
        return self.transitions.K

    @property
    def p_A(self) -> int:
        return self.frequency[0].delta_A.shape[0]

    @property
    def p_B(self) -> int:
        return self.severity[0].delta_B.shape[0]

    def stacked(self):
        """Per-profile arrays: delta_A (K, p_A), a_U, b_U, delta_B (K, p_B), phi, a_V, b_V."""
        return dict(
            delta_A=np.stack([f.delta_A for f in self.frequency]),
            a_U=np.array([f.a_U for f in self.frequency]),
            b_U=np.array([f.b_U for f in self.frequency]),
            delta_B=np.stack([s.delta_B for s in self.severity]),
            phi=np.array([s.phi for s in self.severity]),
            a_V=np.array([s.a_V for s in self.severity]),
            b_V=np.array([s.b_V for s in self.severity]),
        )

    def permuted(self, order: Sequence[int]) -> "ModelParameters":
        """Relabel profiles so that new profile ``k`` is old profile ``order[k]``."""
        order = list(order)
        tr = self.transitions
        return ModelParameters(
            self.representation,
            tuple(self.frequency[k] for k in order),
            tuple(self.severity[k] for k in order),
            TransitionModel(tr.w0[order], tr.W[np.ix_(order, order)]),
        )

    def to_dict(self) -> dict:
        tr = self.transitions
        doc: dict = {"representation": self.representation.value, "K": self.K}
        if self.representation is Representation.FULL:
            doc["profiles"] = [
                {
                    "delta_A": f.delta_A.tolist(),
                    "a_U": f.a_U,
                    "b_U": f.b_U,
                    "delta_B": s.delta_B.tolist(),
                    "phi": s.phi,
                    "a_V": s.a_V,
                    "b_V": s.b_V,
                }
                for f, s in zip(self.frequency, self.severity)
            ]
        else:
            doc["delta_A"] = self.frequency[0].delta_A.tolist()
            doc["phi"] = self.severity[0].phi
            doc["delta_B"] = self.severity[0].delta_B.tolist()
            doc["profiles"] = [
                {"a_U": f.a_U, "b_U": f.b_U, "a_V": s.a_V, "b_V": s.b_V}
                for f, s in zip(self.frequency, self.severity)
            ]
        doc["w0"] = tr.w0.tolist()
        doc["W"] = tr.W.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParameters":
        rep = Representation(doc["representation"])
        freq, sev = [], []
        for p in doc["profiles"]:
            dA = p.get("delta_A", doc.get("delta_A"))
            dB = p.get("delta_B", doc.get("delta_B"))
            phi = p.get("phi", doc.get("phi"))
            freq.append(ProfileFrequencyParams(np.array(dA, dtype=float), float(p["a_U"]), float(p["b_U"])))
            sev.append(ProfileSeverityParams(np.array(dB, dtype=float), float(phi), float(p["a_V"]), float(p["b_V"])))
        params = cls(rep, tuple(freq), tuple(sev), TransitionModel(doc["w0"], doc["W"]))
        if "K" in doc and int(doc["K"]) != params.K:
            raise ValueError("K does not match the number of profiles")
        return params

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelParameters":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PosteriorHyperparams:
    a_U: float
    b_U: float
    a_V: float
    b_V: float


def _check_dims(vec, coef):
    vec = np.asarray(vec, dtype=float)
    coef = np.asarray(coef, dtype=float)
    if vec.shape[-1] != coef.shape[-1]:
        raise ValueError(f"dimension mismatch: covariates {vec.shape[-1]} vs coefficients {coef.shape[-1]}")
    return vec, coef


def lambda_mean(freq: ProfileFrequencyParams, A) -> float:
    A, d = _check_dims(A, freq.delta_A)
    return np.exp(A @ d)


def mu_shape(sev: ProfileSeverityParams, B) -> float:
    B, d = _check_dims(B, sev.delta_B)
    return sev.phi * np.exp(B @ d)


def nb_log_pmf(n, a_U, b_U, expo_lambda):
    """Log NB probability of ``n`` claims when the Poisson mean is ``expo_lambda * U``.

    Broadcasts over its arguments.  A zero mean gives probability one at
    ``n = 0`` and ``-inf`` elsewhere.
    """
    n = np.asarray(n, dtype=float)
    a = np.asarray(a_U, dtype=float)
    b = np.asarray(b_U, dtype=float)
    m = np.asarray(expo_lambda, dtype=float)
    if np.any(n < 0) or np.any(a <= 0) or np.any(b <= 0) or np.any(m < 0):
        raise DomainError("nb_log_pmf needs n >= 0, a_U > 0, b_U > 0, expo_lambda >= 0")
    n, a, b, m = np.broadcast_arrays(n, a, b, m)
    out = np.empty(n.shape)
    zero = m == 0
    if np.any(zero):
        out[zero] = np.where(n[zero] == 0, 0.0, -np.inf)
    pos = ~zero
    if np.any(pos):
        nn, aa, bb, mm = n[pos], a[pos], b[pos], m[pos]
        out[pos] = (
            log_gamma_diff(aa, nn) - log_gamma(nn + 1.0)
            + nn * (np.log(mm) - np.log(bb + mm)) - aa * np.log1p(mm / bb)
        )
    return out if out.ndim else float(out)


def nb_cdf(n, a_U, b_U, expo_lambda):
    """P(N <= n); ``expo_lambda`` must be positive."""
    n = np.floor(np.asarray(n, dtype=float))
    p = np.asarray(b_U, dtype=float) / (np.asarray(b_U, dtype=float) + np.asarray(expo_lambda, dtype=float))
    out = np.where(n < 0, 0.0, sps.betainc(a_U, np.maximum(n, 0.0) + 1.0, p))
    return out if np.ndim(out) else float(out)


def gb2_log_pdf(x, mu, a_V, b_V, phi):
    """Log GB2 density with shapes ``(mu, a_V, 1)`` and scale ``b_V / phi``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    a = np.asarray(a_V, dtype=float)
    b = np.asarray(b_V, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(x <= 0) or np.any(mu <= 0) or np.any(a <= 0) or np.any(b <= 0) or np.any(phi <= 0):
        raise DomainError("gb2_log_pdf needs strictly positive arguments")
    # written so that huge (a_V, b_V), the Gamma limit, stays accurate
    y = phi * x
    out = (
        log_gamma_diff(a, mu) - log_gamma(mu)
        + mu * np.log(phi) + (mu - 1.0) * np.log(x)
        - mu * np.log(b + y) - a * np.log1p(y / b)
    )
    return out if np.ndim(out) else float(out)


def gb2_cdf(x, mu, a_V, b_V, phi):
    """P(X <= x).  ``phi * X / b_V`` is Beta-prime(mu, a_V) distributed."""
    x = np.asarray(x, dtype=float)
    y = phi * np.maximum(x, 0.0)
    out = np.where(x <= 0, 0.0, sps.betainc(mu, a_V, y / (b_V + y)))
    return out if np.ndim(out) else float(out)


def gb2_mean(mu, a_V, b_V, phi):
    return mu / phi * b_V / (a_V - 1.0)


def posterior_hyperparams(freq: ProfileFrequencyParams, sev: ProfileSeverityParams,
                          history: Sequence[tuple[float, int, float, float]] = ()) -> PosteriorHyperparams:
    """Conjugate update from ``(e*lambda, N, mu, sum of sizes)`` per past period."""
    a_U, b_U, a_V, b_V = freq.a_U, freq.b_U, sev.a_V, sev.b_V
    for expo_lambda, n, mu, total in history:
        if n == 0 and total != 0:
            raise ValueError("claim total must be zero when the count is zero")
        a_U += n
        b_U += expo_lambda
        a_V += n * mu
        b_V += sev.phi * total
    return PosteriorHyperparams(a_U, b_U, a_V, b_V)


def nb_mean_variance(a_U, b_U, expo_lambda):
    if a_U <= 0 or b_U <= 0 or expo_lambda < 0:
        raise DomainError("nb_mean_variance needs a_U, b_U > 0 and expo_lambda >= 0")
    mean = a_U * expo_lambda / b_U
    return mean, mean * (1.0 + expo_lambda / b_U)

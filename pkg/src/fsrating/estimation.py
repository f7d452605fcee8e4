"""Empirical-Bayes Baum-Welch for the frequency-severity HMM.

The E-step is the scaled forward/backward pass of :mod:`fsrating.hmm`.  The
M-step updates ``(w0, W)`` in closed form and maximises the responsibility
weighted NB and GB2 log-likelihoods with a safeguarded Newton-Raphson on
unconstrained coordinates:

* frequency, full:   per profile ``(delta_A, log a_U)`` with ``b_U = a_U``
* frequency, sparse: shared slopes of ``delta_A``, per profile ``(log a_U, log b_U)``
* severity, full:    per profile ``(log phi, delta_B, log(a_V - 1))`` with ``b_V = a_V - 1``
* severity, sparse:  shared ``(log phi, slopes of delta_B)``, per profile ``(log(a_V - 1), log b_V)``

Sparse intercepts are pinned at zero (they are confounded with ``b_U`` and
with ``(phi, b_V)`` respectively).
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .distributions import (
    ModelParameters,
    ProfileFrequencyParams,
    ProfileSeverityParams,
    Representation,
    TransitionModel,
    gb2_log_pdf,
    nb_log_pmf,
)
from .evaluation import count_parameters, information_criteria
from .hmm import HmmPosteriors, emissions, forward_backward
from .portfolio import Portfolio, PortfolioArrays
from .special import digamma_diff, log_gamma, log_gamma_diff, trigamma, trigamma_diff

log = logging.getLogger(__name__)

__all__ = [
    "UnidentifiableModelError",
    "FitConfig",
    "FitDiagnostics",
    "FittedModel",
    "Layout",
    "NewtonResult",
    "e_step",
    "m_step_transitions",
    "frequency_objective",
    "severity_objective",
    "grad_hess_frequency",
    "grad_hess_severity",
    "newton_maximize",
    "initial_point",
    "canonical_order",
    "q_function",
    "posterior_entropy",
    "penalized_loglik",
    "fit",
    "standard_errors",
]


class UnidentifiableModelError(ValueError):
    pass


@dataclass
class FitConfig:
    K: int = 1
    representation: Representation = Representation.FULL
    ridge_lambda: float = 4e-6
    ridge_all: bool = False
    em_max_iter: int = 500
    em_rel_tol: float = 1e-8
    newton_max_iter: int = 50
    newton_grad_tol: float = 1e-8
    n_starts: int = 10
    short_run_iters: int = 10
    seed: int = 0
    warm_start: ModelParameters | None = None
    compute_standard_errors: bool = True

    def __post_init__(self):
        self.representation = Representation(self.representation)
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if not (self.em_rel_tol > 0 and self.newton_grad_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["representation"] = self.representation.value
        d["warm_start"] = None if self.warm_start is None else self.warm_start.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        doc = dict(doc)
        if doc.get("warm_start") is not None and not isinstance(doc["warm_start"], ModelParameters):
            doc["warm_start"] = ModelParameters.from_dict(doc["warm_start"])
        return cls(**doc)


# --------------------------------------------------------------------------
# coordinates


class Layout:
    """Maps :class:`ModelParameters` to the optimiser's unconstrained vectors."""

    def __init__(self, K: int, representation: Representation, p_A: int, p_B: int):
        self.K = K
        self.rep = Representation(representation)
        self.p_A = p_A
        self.p_B = p_B
        if self.full:
            self.freq_dim = K * (p_A + 1)
            self.sev_dim = K * (p_B + 2)
        else:
            self.freq_dim = (p_A - 1) + 2 * K
            self.sev_dim = p_B + 2 * K
        self.trans_dim = (K - 1) * (K + 1)

    @property
    def full(self) -> bool:
        return self.rep is Representation.FULL

    # index helpers -------------------------------------------------------
    def freq_index(self, j: int):
        """(delta positions or None for pinned intercept, a position, b position)."""
        if self.full:
            base = j * (self.p_A + 1)
            return list(range(base, base + self.p_A)), base + self.p_A, base + self.p_A
        slopes = [None] + list(range(self.p_A - 1))
        base = self.p_A - 1 + 2 * j
        return slopes, base, base + 1

    def sev_index(self, j: int):
        """(log phi position, delta positions, a position, b position)."""
        if self.full:
            base = j * (self.p_B + 2)
            return base, list(range(base + 1, base + 1 + self.p_B)), base + self.p_B + 1, base + self.p_B + 1
        slopes = [None] + list(range(1, self.p_B))
        base = self.p_B + 2 * j
        return 0, slopes, base, base + 1

    def freq_penalty_mask(self, ridge_all: bool = False) -> np.ndarray:
        mask = np.zeros(self.freq_dim)
        if ridge_all:
            mask[:] = 1.0
            return mask
        for j in range(self.K if self.full else 1):
            pos, _, _ = self.freq_index(j)
            for k, p in enumerate(pos):
                if k > 0 and p is not None:
                    mask[p] = 1.0
        return mask

    def sev_penalty_mask(self, ridge_all: bool = False) -> np.ndarray:
        mask = np.zeros(self.sev_dim)
        if ridge_all:
            mask[:] = 1.0
            return mask
        for j in range(self.K if self.full else 1):
            _, pos, _, _ = self.sev_index(j)
            for k, p in enumerate(pos):
                if k > 0 and p is not None:
                    mask[p] = 1.0
        return mask

    # packing ---------------------------------------------------------------
    def pack(self, params: ModelParameters):
        if params.K != self.K or params.representation is not self.rep:
            raise ValueError("parameters do not match the layout")
        tN = np.zeros(self.freq_dim)
        tX = np.zeros(self.sev_dim)
        for j, (f, s) in enumerate(zip(params.frequency, params.severity)):
            dpos, apos, bpos = self.freq_index(j)
            for k, p in enumerate(dpos):
                if p is not None:
                    tN[p] = f.delta_A[k]
            tN[apos] = math.log(f.a_U)
            tN[bpos] = math.log(f.b_U) if not self.full else math.log(f.a_U)
            ppos, dpos, apos, bpos = self.sev_index(j)
            tX[ppos] = math.log(s.phi)
            for k, p in enumerate(dpos):
                if p is not None:
                    tX[p] = s.delta_B[k]
            tX[apos] = math.log(s.a_V - 1.0)
            if not self.full:
                tX[bpos] = math.log(s.b_V)
        return tN, tX

    def unpack_frequency(self, tN):
        """Per-profile (delta_A, a_U, b_U) arrays."""
        dA = np.zeros((self.K, self.p_A))
        a = np.empty(self.K)
        b = np.empty(self.K)
        for j in range(self.K):
            dpos, apos, bpos = self.freq_index(j)
            for k, p in enumerate(dpos):
                if p is not None:
                    dA[j, k] = tN[p]
            a[j] = math.exp(tN[apos])
            b[j] = math.exp(tN[bpos])
        return dA, a, b

    def unpack_severity(self, tX):
        """Per-profile (delta_B, phi, a_V, b_V) arrays."""
        dB = np.zeros((self.K, self.p_B))
        phi = np.empty(self.K)
        a = np.empty(self.K)
        b = np.empty(self.K)
        for j in range(self.K):
            ppos, dpos, apos, bpos = self.sev_index(j)
            phi[j] = math.exp(tX[ppos])
            for k, p in enumerate(dpos):
                if p is not None:
                    dB[j, k] = tX[p]
            a[j] = 1.0 + math.exp(tX[apos])
            b[j] = math.exp(tX[bpos])
        return dB, phi, a, b

    def unpack(self, tN, tX, transitions: TransitionModel) -> ModelParameters:
        dA, aU, bU = self.unpack_frequency(tN)
        dB, phi, aV, bV = self.unpack_severity(tX)
        if self.full:
            bU = aU.copy()
            bV = aV - 1.0
        if not (np.all(np.isfinite(aU)) and np.all(np.isfinite(bU)) and np.all(aV > 1)
                and np.all(np.isfinite(bV)) and np.all(bV > 0) and np.all(phi > 0)):
            raise FloatingPointError("parameters left the admissible region")
        freq = tuple(ProfileFrequencyParams(dA[j], float(aU[j]), float(bU[j])) for j in range(self.K))
        sev = tuple(ProfileSeverityParams(dB[j], float(phi[j]), float(aV[j]), float(bV[j])) for j in range(self.K))
        return ModelParameters(self.rep, freq, sev, transitions)

    # transition coordinates (standard errors only) ---------------------------
    def pack_transitions(self, tr: TransitionModel) -> np.ndarray:
        if self.K == 1:
            return np.zeros(0)
        return np.concatenate([tr.w0[1:], tr.W[:, 1:].ravel()])

    def unpack_transitions(self, tZ) -> TransitionModel:
        K = self.K
        if K == 1:
            return TransitionModel([1.0], [[1.0]])
        w_rest = np.asarray(tZ[: K - 1])
        W_rest = np.asarray(tZ[K - 1:]).reshape(K, K - 1)
        w0 = np.concatenate([[1.0 - w_rest.sum()], w_rest])
        W = np.column_stack([1.0 - W_rest.sum(axis=1), W_rest])
        return _transition_model_loose(w0, W)

    def names(self, freq_names, sev_names) -> list[str]:
        out = [""] * (self.freq_dim + self.sev_dim + self.trans_dim)
        for j in range(self.K):
            dpos, apos, bpos = self.freq_index(j)
            tag = f"[{j}]" if self.full else ""
            for k, p in enumerate(dpos):
                if p is not None:
                    out[p] = f"delta_A{tag}[{freq_names[k]}]"
            out[apos] = f"a_U[{j}]"
            if not self.full:
                out[bpos] = f"b_U[{j}]"
            ppos, dpos, apos, bpos = self.sev_index(j)
            off = self.freq_dim
            out[off + ppos] = f"phi{tag}"
            for k, p in enumerate(dpos):
                if p is not None:
                    out[off + p] = f"delta_B{tag}[{sev_names[k]}]"
            out[off + apos] = f"a_V[{j}]"
            if not self.full:
                out[off + bpos] = f"b_V[{j}]"
        off = self.freq_dim + self.sev_dim
        K = self.K
        for k in range(1, K):
            out[off + k - 1] = f"w0[{k}]"
        for h in range(K):
            for k in range(1, K):
                out[off + K - 1 + h * (K - 1) + k - 1] = f"W[{h},{k}]"
        return out


def _transition_model_loose(w0, W) -> TransitionModel:
    """TransitionModel after clipping tiny negative round-off and renormalising."""
    w0 = np.clip(np.asarray(w0, dtype=float), 0.0, None)
    W = np.clip(np.asarray(W, dtype=float), 0.0, None)
    return TransitionModel(w0 / w0.sum(), W / W.sum(axis=1, keepdims=True))


# --------------------------------------------------------------------------
# derivative kernels


def _nb_partials(n, a, b, m):
    """Value, first and second partials of the NB log-pmf in (log m, a, b)."""
    bm = b + m
    na = n + a
    val = nb_log_pmf(n, a, b, m)
    d1 = np.stack([
        n - na * m / bm,
        digamma_diff(a, n) - np.log1p(m / b),
        (a * m - n * b) / (b * bm),
    ], axis=-1)
    d2 = np.empty(n.shape + (3, 3))
    d2[..., 0, 0] = -na * m * b / bm**2
    d2[..., 0, 1] = d2[..., 1, 0] = -m / bm
    d2[..., 0, 2] = d2[..., 2, 0] = na * m / bm**2
    d2[..., 1, 1] = trigamma_diff(a, n)
    d2[..., 1, 2] = d2[..., 2, 1] = m / (b * bm)
    d2[..., 2, 2] = (n * b**2 - a * m * (2.0 * b + m)) / (b * bm) ** 2
    return val, d1, d2


def _gb2_partials(x, mu, phi, a, b):
    """Value, first and second partials of the GB2 log-density in (mu, phi, a, b)."""
    y = phi * x
    bx = b + y
    ma = mu + a
    val = gb2_log_pdf(x, mu, a, b, phi)
    # differences of nearly equal terms are rewritten for large (a, b)
    d1 = np.stack([
        digamma_diff(mu, a) + np.log(phi) + np.log(x) - np.log(bx),
        (mu * b - a * y) / (phi * bx),
        digamma_diff(a, mu) - np.log1p(y / b),
        (a * y - mu * b) / (b * bx),
    ], axis=-1)
    d2 = np.empty(x.shape + (4, 4))
    tri_ma = trigamma(ma)
    d2[..., 0, 0] = trigamma_diff(mu, a)
    d2[..., 0, 1] = d2[..., 1, 0] = 1.0 / phi - x / bx
    d2[..., 0, 2] = d2[..., 2, 0] = tri_ma
    d2[..., 0, 3] = d2[..., 3, 0] = -1.0 / bx
    d2[..., 1, 1] = -mu / phi**2 + ma * x**2 / bx**2
    d2[..., 1, 2] = d2[..., 2, 1] = -x / bx
    d2[..., 1, 3] = d2[..., 3, 1] = ma * x / bx**2
    d2[..., 2, 2] = trigamma_diff(a, mu)
    d2[..., 2, 3] = d2[..., 3, 2] = y / (b * bx)
    d2[..., 3, 3] = (mu * b**2 - a * y * (2.0 * b + y)) / (b * bx) ** 2
    return val, d1, d2


def _chain(weights, X, xpos, spos, fprime, fsecond, d1, d2, grad, hess, need_hess):
    """Accumulate weighted derivatives through the natural parameters.

    Natural parameter 0 is ``f_0(offset + X . theta[xpos])``; natural
    parameter ``i >= 1`` is ``f_i(theta[spos[i - 1]])``.  ``fprime`` and
    ``fsecond`` are (R, k) derivatives of the ``f_i``.  ``grad`` and ``hess``
    are updated in place.
    """
    xpos = np.asarray(xpos, dtype=int)
    u = weights[:, None] * d1 * fprime
    grad[xpos] += u[:, 0] @ X
    for i, q in enumerate(spos, start=1):
        grad[q] += u[:, i].sum()
    if not need_hess:
        return
    k = fprime.shape[1]
    c = weights[:, None] * d1 * fsecond
    hess[np.ix_(xpos, xpos)] += X.T @ ((weights * d2[:, 0, 0] * fprime[:, 0]**2 + c[:, 0])[:, None] * X)
    for i, q in enumerate(spos, start=1):
        cross = X.T @ (weights * d2[:, 0, i] * fprime[:, 0] * fprime[:, i])
        hess[xpos, q] += cross
        hess[q, xpos] += cross
        for l in range(i, k):
            r = spos[l - 1]
            v = float(np.sum(weights * d2[:, i, l] * fprime[:, i] * fprime[:, l]))
            if l == i:
                hess[q, q] += v + c[:, i].sum()
            else:
                hess[q, r] += v
                hess[r, q] += v


def _count_grid(counts):
    """Distinct counts, the inverse map and log(n!) on the distinct values."""
    u, inv = np.unique(counts, return_inverse=True)
    u = u.astype(float)
    return u, inv, log_gamma(u + 1.0)


def _frequency_terms(arrays: PortfolioArrays, gamma, layout: Layout, tN, need_grad, need_hess):
    dA, a, b = layout.unpack_frequency(tN)
    if layout.full:
        b = a.copy()
    n = arrays.counts.astype(float)
    # special functions depend on rows only through (count, profile)
    u, inv, log_fact = _count_grid(arrays.counts)
    log_e = np.log(arrays.exposure)
    R = n.shape[0]
    value = 0.0
    grad = np.zeros(layout.freq_dim)
    hess = np.zeros((layout.freq_dim, layout.freq_dim))
    for j in range(layout.K):
        w = gamma[:, j]
        m = np.exp(log_e + arrays.A @ dA[j])
        aj, bj = a[j], b[j]
        bm = bj + m
        na = n + aj
        log1p_mb = np.log1p(m / bj)
        val = ((log_gamma_diff(aj, u) - log_fact)[inv]
               + n * (np.log(m) - np.log(bm)) - aj * log1p_mb)
        value += float(np.sum(w * val))
        if not need_grad:
            continue
        d1 = np.stack([
            n - na * m / bm,
            digamma_diff(aj, u)[inv] - log1p_mb,
            (aj * m - n * bj) / (bj * bm),
        ], axis=-1)
        d2 = np.empty((R, 3, 3))
        if need_hess:
            d2[:, 0, 0] = -na * m * bj / bm**2
            d2[:, 0, 1] = d2[:, 1, 0] = -m / bm
            d2[:, 0, 2] = d2[:, 2, 0] = na * m / bm**2
            d2[:, 1, 1] = trigamma_diff(aj, u)[inv]
            d2[:, 1, 2] = d2[:, 2, 1] = m / (bj * bm)
            d2[:, 2, 2] = (n * bj**2 - aj * m * (2.0 * bj + m)) / (bj * bm) ** 2
        dpos, apos, bpos = layout.freq_index(j)
        cols = [k for k, p in enumerate(dpos) if p is not None]
        fprime = np.empty((R, 3))
        fprime[:, 0], fprime[:, 1], fprime[:, 2] = 1.0, aj, bj
        fsecond = fprime.copy()
        fsecond[:, 0] = 0.0
        _chain(w, arrays.A[:, cols], [dpos[k] for k in cols], [apos, bpos],
               fprime, fsecond, d1, d2, grad, hess, need_hess)
    return value, grad, hess


def _severity_terms(arrays: PortfolioArrays, gamma, layout: Layout, tX, need_grad, need_hess):
    dB, phi, a, b = layout.unpack_severity(tX)
    if layout.full:
        b = a - 1.0
    value = 0.0
    grad = np.zeros(layout.sev_dim)
    hess = np.zeros((layout.sev_dim, layout.sev_dim))
    x = arrays.claim_x
    if x.size == 0:
        return value, grad, hess
    rows = arrays.claim_row
    Bc = arrays.B[rows]
    R = x.shape[0]
    for j in range(layout.K):
        w = gamma[rows, j]
        mu = phi[j] * np.exp(Bc @ dB[j])
        phij = np.full(R, phi[j])
        aj = np.full(R, a[j])
        bj = np.full(R, b[j])
        if not need_grad:
            value += float(np.sum(w * gb2_log_pdf(x, mu, aj, bj, phij)))
            continue
        val, d1, d2 = _gb2_partials(x, mu, phij, aj, bj)
        value += float(np.sum(w * val))
        ppos, dpos, apos, bpos = layout.sev_index(j)
        cols = [k for k, p in enumerate(dpos) if p is not None]
        X = np.column_stack([np.ones(R), Bc[:, cols]])
        fprime = np.column_stack([mu, phij, aj - 1.0, bj])
        _chain(w, X, [ppos] + [dpos[k] for k in cols], [ppos, apos, bpos],
               fprime, fprime, d1, d2, grad, hess, need_hess)
    return value, grad, hess


def _check_finite(value, grad, which):
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite {which} objective or gradient")


def frequency_objective(arrays, gamma, layout: Layout, tN, ridge_lambda=0.0, ridge_all=False,
                        need_grad=True, need_hess=True):
    """Penalised gamma-weighted NB log-likelihood with gradient and Hessian in ``tN``."""
    value, grad, hess = _frequency_terms(arrays, gamma, layout, tN, need_grad, need_hess)
    mask = layout.freq_penalty_mask(ridge_all)
    value -= ridge_lambda * float(np.sum(mask * tN**2))
    grad -= 2.0 * ridge_lambda * mask * tN
    hess -= 2.0 * ridge_lambda * np.diag(mask)
    return value, grad, hess


def severity_objective(arrays, gamma, layout: Layout, tX, ridge_lambda=0.0, ridge_all=False,
                       need_grad=True, need_hess=True):
    """Penalised gamma-weighted GB2 log-likelihood with gradient and Hessian in ``tX``."""
    value, grad, hess = _severity_terms(arrays, gamma, layout, tX, need_grad, need_hess)
    mask = layout.sev_penalty_mask(ridge_all)
    value -= ridge_lambda * float(np.sum(mask * tX**2))
    grad -= 2.0 * ridge_lambda * mask * tX
    hess -= 2.0 * ridge_lambda * np.diag(mask)
    return value, grad, hess


def _as_arrays(portfolio):
    return portfolio.arrays if isinstance(portfolio, Portfolio) else portfolio


def grad_hess_frequency(portfolio, posteriors: HmmPosteriors, params: ModelParameters,
                        representation=None, ridge_lambda=0.0, ridge_all=False):
    arrays = _as_arrays(portfolio)
    rep = Representation(representation or params.representation)
    layout = Layout(params.K, rep, params.p_A, params.p_B)
    tN, _ = layout.pack(params)
    _, g, H = frequency_objective(arrays, posteriors.gamma, layout, tN, ridge_lambda, ridge_all)
    return g, H


def grad_hess_severity(portfolio, posteriors: HmmPosteriors, params: ModelParameters,
                       representation=None, ridge_lambda=0.0, ridge_all=False):
    arrays = _as_arrays(portfolio)
    rep = Representation(representation or params.representation)
    layout = Layout(params.K, rep, params.p_A, params.p_B)
    _, tX = layout.pack(params)
    _, g, H = severity_objective(arrays, posteriors.gamma, layout, tX, ridge_lambda, ridge_all)
    return g, H


# --------------------------------------------------------------------------
# Newton-Raphson


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    iterations: int
    status: str  # "converged", "max_iter", "stalled"


def newton_maximize(fun: Callable, start, max_iter: int = 50, grad_tol: float = 1e-8,
                    max_halvings: int = 30, max_step: float = 5.0) -> NewtonResult:
    """Safeguarded Newton ascent.

    ``fun(x, need_hess)`` returns ``(value, grad, hess)``.  A non negative
    definite Hessian is shifted by ``-tau I`` (tau doubling from 1e-6); a step
    that fails to increase the objective is halved up to ``max_halvings``
    times and no coordinate moves by more than ``max_step`` per iteration.
    The returned point never has a lower value than ``start``.
    """
    x = np.array(start, dtype=float)
    f, g, H = fun(x, True)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the starting point")
    for it in range(max_iter):
        if np.max(np.abs(g), initial=0.0) < grad_tol:
            return NewtonResult(x, f, it, "converged")
        negH = -0.5 * (H + H.T)
        tau = 0.0
        while True:
            try:
                L = np.linalg.cholesky(negH + tau * np.eye(len(x)))
                break
            except np.linalg.LinAlgError:
                tau = 1e-6 if tau == 0.0 else 2.0 * tau
                if tau > 1e12:
                    return NewtonResult(x, f, it, "stalled")
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        # predicted gain below round-off in f: nothing left to gain
        if float(g @ step) <= 1e-13 * max(1.0, abs(f)):
            return NewtonResult(x, f, it, "converged")
        # cap the step so one iteration cannot jump to the edge of the domain
        longest = np.max(np.abs(step))
        if longest > max_step:
            step = step * (max_step / longest)
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = x + t * step
            try:
                with np.errstate(all="ignore"):
                    f_new = fun(cand, False)[0]
            except (FloatingPointError, ValueError, OverflowError):
                f_new = -np.inf
            if np.isfinite(f_new) and f_new > f:
                break
            t *= 0.5
        else:
            # no ascent along the Newton direction: at a stationary point up to round-off
            decrement = float(g @ step)
            status = "converged" if decrement <= 1e-10 * max(1.0, abs(f)) else "stalled"
            return NewtonResult(x, f, it, status)
        gain = f_new - f
        x = cand
        f, g, H = fun(x, True)
        if gain <= 1e-15 * max(1.0, abs(f)):
            return NewtonResult(x, f, it + 1, "converged")
    status = "converged" if np.max(np.abs(g), initial=0.0) < grad_tol else "max_iter"
    return NewtonResult(x, f, max_iter, status)


# --------------------------------------------------------------------------
# EM pieces


def e_step(portfolio, params: ModelParameters) -> HmmPosteriors:
    return forward_backward(portfolio, params)


def m_step_transitions(posteriors: HmmPosteriors, portfolio=None, previous: TransitionModel | None = None,
                       starts=None) -> TransitionModel:
    """Closed-form update of ``w0`` (mean first-period responsibility) and ``W``."""
    if starts is None:
        if portfolio is None:
            raise ValueError("need the portfolio (or policy start rows)")
        starts = _as_arrays(portfolio).starts
    gamma, xi = posteriors.gamma, posteriors.xi
    K = gamma.shape[1]
    first = gamma[starts]
    w0 = first.sum(axis=0) / first.shape[0]
    num = xi.sum(axis=0)
    den = num.sum(axis=1)
    if previous is None:
        previous = TransitionModel(np.full(K, 1.0 / K), np.full((K, K), 1.0 / K))
    W = previous.W.copy()
    visited = den > 0
    W[visited] = num[visited] / den[visited, None]
    return _transition_model_loose(w0, W)


def _penalty(layout: Layout, params: ModelParameters, config: FitConfig) -> float:
    tN, tX = layout.pack(params)
    return config.ridge_lambda * (
        float(np.sum(layout.freq_penalty_mask(config.ridge_all) * tN**2))
        + float(np.sum(layout.sev_penalty_mask(config.ridge_all) * tX**2))
    )


def penalized_loglik(portfolio, params: ModelParameters, ridge_lambda: float = 4e-6,
                     ridge_all: bool = False) -> float:
    layout = Layout(params.K, params.representation, params.p_A, params.p_B)
    cfg = FitConfig(K=params.K, representation=params.representation, ridge_lambda=ridge_lambda,
                    ridge_all=ridge_all)
    return forward_backward(portfolio, params).log_likelihood - _penalty(layout, params, cfg)


def q_function(portfolio, params: ModelParameters, posteriors: HmmPosteriors) -> float:
    """Expected complete log-likelihood of ``params`` under fixed responsibilities."""
    arrays = _as_arrays(portfolio)
    log_em = emissions(arrays, params)
    tr = params.transitions
    with np.errstate(divide="ignore"):
        lw0 = np.log(tr.w0)
        lW = np.log(tr.W)
    first = posteriors.gamma[arrays.starts]
    q = float(np.sum(np.where(first > 0, first * lw0, 0.0)))
    q += float(np.sum(np.where(posteriors.xi > 0, posteriors.xi * lW, 0.0)))
    q += float(np.sum(posteriors.gamma * log_em))
    return q


def posterior_entropy(portfolio, posteriors: HmmPosteriors) -> float:
    """Entropy of the posterior distribution over latent profile paths."""
    arrays = _as_arrays(portfolio)
    g, xi = posteriors.gamma, posteriors.xi

    def xlogy(a, b):
        return np.where(a > 0, a * np.log(np.where(b > 0, b, 1.0)), 0.0)

    first = g[arrays.starts]
    h = -float(np.sum(xlogy(first, first)))
    not_first = np.ones(g.shape[0], dtype=bool)
    not_first[arrays.starts] = False
    prev = np.zeros_like(g)
    prev[1:] = g[:-1]
    cond_den = prev[not_first][:, :, None]
    xs = xi[not_first]
    ratio = np.divide(xs, cond_den, out=np.zeros_like(xs), where=cond_den > 0)
    h -= float(np.sum(xlogy(xs, ratio)))
    return h


def initial_point(portfolio, K: int, representation, rng: np.random.Generator) -> ModelParameters:
    """Moment-matched start with profile jitter (none when ``K == 1``)."""
    arrays = _as_arrays(portfolio)
    rep = Representation(representation)
    pA, pB = arrays.A.shape[1], arrays.B.shape[1]
    total_claims = arrays.counts.sum()
    if total_claims == 0:
        raise UnidentifiableModelError("portfolio has no claims; severity parameters are not identified")
    freq0 = math.log(total_claims / arrays.exposure.sum())
    sev0 = math.log(arrays.claim_x.mean())
    if K == 1:
        jit_f = np.zeros(1)
        jit_s = np.zeros(1)
        a_U = np.array([1.0])
        a_V = np.array([3.0])
        w0 = np.array([1.0])
        W = np.array([[1.0]])
    else:
        jit_f = rng.uniform(-0.5, 0.5, K)
        jit_s = rng.uniform(-0.5, 0.5, K)
        a_U = np.exp(rng.uniform(math.log(0.5), math.log(5.0), K))
        a_V = 1.0 + np.exp(rng.uniform(math.log(0.5), math.log(5.0), K))
        w0 = rng.dirichlet(np.ones(K))
        W = rng.dirichlet(np.ones(K), size=K) + 2.0 * K * np.eye(K)
        W /= W.sum(axis=1, keepdims=True)
    freq, sev = [], []
    for j in range(K):
        f_int = freq0 + jit_f[j]
        s_int = sev0 + jit_s[j]
        if rep is Representation.FULL:
            dA = np.zeros(pA)
            dA[0] = f_int
            dB = np.zeros(pB)
            dB[0] = s_int
            # Gamma shape mu = phi * mean starts near one
            freq.append(ProfileFrequencyParams(dA, a_U[j], a_U[j]))
            sev.append(ProfileSeverityParams(dB, math.exp(-sev0), a_V[j], a_V[j] - 1.0))
        else:
            freq.append(ProfileFrequencyParams(np.zeros(pA), a_U[j], a_U[j] * math.exp(-f_int)))
            sev.append(ProfileSeverityParams(np.zeros(pB), 1.0, a_V[j], (a_V[j] - 1.0) * math.exp(s_int)))
    return ModelParameters(rep, tuple(freq), tuple(sev), _transition_model_loose(w0, W))


def _profile_premia(params: ModelParameters, A_bar, B_bar) -> np.ndarray:
    st = params.stacked()
    return (np.exp(st["delta_A"] @ A_bar + st["delta_B"] @ B_bar)
            * st["a_U"] / st["b_U"] * st["b_V"] / (st["a_V"] - 1.0))


def canonical_order(portfolio, params: ModelParameters) -> np.ndarray:
    """Profile order by ascending prior premium at the portfolio-mean covariates."""
    arrays = _as_arrays(portfolio)
    prem = _profile_premia(params, arrays.A.mean(axis=0), arrays.B.mean(axis=0))
    return np.argsort(prem, kind="stable")


def _expand(warm: ModelParameters, K: int) -> ModelParameters:
    """Split the most likely initial profile until ``warm`` has ``K`` profiles."""
    params = warm
    while params.K < K:
        tr = params.transitions
        h = int(np.argmax(tr.w0))
        f, s = params.frequency[h], params.severity[h]
        if params.representation is Representation.FULL:
            dA = f.delta_A.copy()
            dA[0] += 0.25
            dB = s.delta_B.copy()
            dB[0] -= 0.25
            nf = ProfileFrequencyParams(dA, f.a_U, f.b_U)
            ns = ProfileSeverityParams(dB, s.phi, s.a_V, s.b_V)
        else:
            nf = ProfileFrequencyParams(f.delta_A, f.a_U, f.b_U * math.exp(-0.25))
            ns = ProfileSeverityParams(s.delta_B, s.phi, s.a_V, s.b_V * math.exp(-0.25))
        w0 = np.append(tr.w0, tr.w0[h] / 2.0)
        w0[h] /= 2.0
        W = np.vstack([tr.W, tr.W[h]])
        W = np.column_stack([W, W[:, h] / 2.0])
        W[:, h] /= 2.0
        params = ModelParameters(params.representation, params.frequency + (nf,),
                                 params.severity + (ns,), _transition_model_loose(w0, W))
    return params


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitDiagnostics:
    loglik_trace: list[float] = field(default_factory=list)
    penalized_trace: list[float] = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    n_params: int = 0
    loglik: float = float("nan")
    penalized_loglik: float = float("nan")
    aic: float = float("nan")
    bic: float = float("nan")
    n_obs: int = 0
    em_iterations: int = 0
    start_objectives: list[float] = field(default_factory=list)
    standard_errors: dict | None = None
    wall_time: float = 0.0


@dataclass
class FittedModel:
    params: ModelParameters
    diagnostics: FitDiagnostics
    posteriors: HmmPosteriors | None = None
    schema: dict | None = None
    freq_covariate_names: tuple[str, ...] = ()
    sev_covariate_names: tuple[str, ...] = ()
    config: dict | None = None

    def to_dict(self) -> dict:
        diag = asdict(self.diagnostics)
        diag.pop("wall_time")
        return {
            "params": self.params.to_dict(),
            "diagnostics": diag,
            "schema": self.schema,
            "freq_covariate_names": list(self.freq_covariate_names),
            "sev_covariate_names": list(self.sev_covariate_names),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedModel":
        diag = FitDiagnostics(**doc.get("diagnostics", {}))
        return cls(
            params=ModelParameters.from_dict(doc["params"]),
            diagnostics=diag,
            schema=doc.get("schema"),
            freq_covariate_names=tuple(doc.get("freq_covariate_names", ())),
            sev_covariate_names=tuple(doc.get("sev_covariate_names", ())),
            config=doc.get("config"),
        )

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        return cls.from_dict(json.loads(text))


def _m_step(arrays, post: HmmPosteriors, params: ModelParameters, layout: Layout, config: FitConfig):
    tr = m_step_transitions(post, previous=params.transitions, starts=arrays.starts)
    tN, tX = layout.pack(params)
    gamma = post.gamma

    def fN(x, need_hess):
        return frequency_objective(arrays, gamma, layout, x, config.ridge_lambda, config.ridge_all,
                                   need_grad=need_hess, need_hess=need_hess)

    def fX(x, need_hess):
        return severity_objective(arrays, gamma, layout, x, config.ridge_lambda, config.ridge_all,
                                  need_grad=need_hess, need_hess=need_hess)

    rN = newton_maximize(fN, tN, config.newton_max_iter, config.newton_grad_tol)
    rX = newton_maximize(fX, tX, config.newton_max_iter, config.newton_grad_tol)
    return layout.unpack(rN.x, rX.x, tr), (rN.status, rX.status)


def _run_em(arrays, params: ModelParameters, layout: Layout, config: FitConfig, max_iter: int,
            post: HmmPosteriors | None = None):
    """Generalised EM from ``params``; returns (params, posteriors, trace, status)."""
    if post is None:
        post = forward_backward(arrays, params)
    obj = post.log_likelihood - _penalty(layout, params, config)
    trace = [(post.log_likelihood, obj)]
    status = "max_iter"
    for _ in range(max_iter):
        try:
            new_params, _ = _m_step(arrays, post, params, layout, config)
            new_post = forward_backward(arrays, new_params)
        except FloatingPointError as exc:
            log.warning("M-step failed: %s", exc)
            status = "numerical_failure"
            break
        new_obj = new_post.log_likelihood - _penalty(layout, new_params, config)
        if new_obj < obj - 1e-10:
            status = "no_ascent"
            break
        change = abs(new_obj - obj) / max(abs(obj), 1e-300)
        params, post, obj = new_params, new_post, new_obj
        trace.append((post.log_likelihood, obj))
        if change < config.em_rel_tol:
            status = "converged"
            break
    return params, post, trace, status


def _permute_posteriors(post: HmmPosteriors, order) -> HmmPosteriors:
    order = np.asarray(order)
    return HmmPosteriors(post.alpha_hat[:, order], post.beta_hat[:, order], post.log_norm,
                         post.gamma[:, order], post.xi[:, order][:, :, order], post.policy_loglik)


def fit(portfolio: Portfolio, config: FitConfig | None = None) -> FittedModel:
    """Multi-start generalised EM, canonical relabelling and standard errors."""
    config = config or FitConfig()
    t0 = time.perf_counter()
    arrays = portfolio.arrays
    if arrays.counts.sum() == 0:
        raise UnidentifiableModelError("portfolio has no claims; severity parameters are not identified")
    pA, pB = arrays.A.shape[1], arrays.B.shape[1]
    layout = Layout(config.K, config.representation, pA, pB)
    n_params = count_parameters(config.K, config.representation, pA, pB)
    if arrays.n_rows < 10 * n_params:
        warnings.warn(f"{arrays.n_rows} observations for {n_params} parameters; estimates may be unstable",
                      stacklevel=2)
    rng = np.random.default_rng(config.seed)
    n_random = 1 if config.K == 1 else config.n_starts
    starts = [initial_point(arrays, config.K, config.representation, rng) for _ in range(n_random)]
    if config.warm_start is not None:
        warm = config.warm_start
        if warm.representation is not layout.rep:
            raise ValueError("warm start uses a different representation")
        if warm.K > config.K:
            raise ValueError("warm start has more profiles than requested")
        starts.insert(0, _expand(warm, config.K))

    best = None
    start_objectives = []
    for start in starts:
        if len(starts) == 1:
            best = (start, None, None)
            break
        try:
            p, post, trace, _ = _run_em(arrays, start, layout, config, config.short_run_iters)
        except FloatingPointError as exc:
            log.info("start discarded: %s", exc)
            start_objectives.append(float("-inf"))
            continue
        start_objectives.append(trace[-1][1])
        if best is None or trace[-1][1] > best[2]:
            best = (p, post, trace[-1][1])
    if best is None:
        raise FloatingPointError("every start failed")
    params, post, _ = best
    params, post, trace, status = _run_em(arrays, params, layout, config, config.em_max_iter, post)

    order = canonical_order(arrays, params)
    if not np.array_equal(order, np.arange(config.K)):
        params = params.permuted(order)
        post = _permute_posteriors(post, order)

    ll = post.log_likelihood
    aic, bic = information_criteria(ll, n_params, arrays.n_rows)
    diag = FitDiagnostics(
        loglik_trace=[t[0] for t in trace],
        penalized_trace=[t[1] for t in trace],
        converged=status == "converged",
        reason=status,
        n_params=n_params,
        loglik=ll,
        penalized_loglik=trace[-1][1],
        aic=aic,
        bic=bic,
        n_obs=arrays.n_rows,
        em_iterations=len(trace) - 1,
        start_objectives=start_objectives,
    )
    fitted = FittedModel(
        params=params,
        diagnostics=diag,
        posteriors=post,
        schema=portfolio.schema.to_dict() if portfolio.schema is not None else None,
        freq_covariate_names=portfolio.freq_covariate_names,
        sev_covariate_names=portfolio.sev_covariate_names,
        config={k: v for k, v in config.to_dict().items() if k != "warm_start"},
    )
    if config.compute_standard_errors:
        diag.standard_errors = standard_errors(portfolio, fitted)
    diag.wall_time = time.perf_counter() - t0
    return fitted


# --------------------------------------------------------------------------
# standard errors


def _score(arrays, layout: Layout, theta: np.ndarray) -> np.ndarray:
    """Observed-data score via the EM identity: grad of Q(. | theta) at theta."""
    fd, sd = layout.freq_dim, layout.sev_dim
    tr = layout.unpack_transitions(theta[fd + sd:])
    params = layout.unpack(theta[:fd], theta[fd:fd + sd], tr)
    post = forward_backward(arrays, params)
    _, gN, _ = _frequency_terms(arrays, post.gamma, layout, theta[:fd], True, False)
    _, gX, _ = _severity_terms(arrays, post.gamma, layout, theta[fd:fd + sd], True, False)
    if layout.K == 1:
        return np.concatenate([gN, gX])
    c = post.gamma[arrays.starts].sum(axis=0)
    d = post.xi.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        g_w0 = c[1:] / tr.w0[1:] - c[0] / tr.w0[0]
        g_W = d[:, 1:] / tr.W[:, 1:] - (d[:, 0] / tr.W[:, 0])[:, None]
    return np.concatenate([gN, gX, g_w0, g_W.ravel()])


def _natural_scale(layout: Layout, theta: np.ndarray):
    """Natural-scale values and d(natural)/d(theta) per coordinate."""
    value = theta.copy()
    slope = np.ones_like(theta)
    off = layout.freq_dim
    for j in range(layout.K):
        _, apos, bpos = layout.freq_index(j)
        for p in {apos, bpos}:
            value[p] = math.exp(theta[p])
            slope[p] = value[p]
        ppos, _, apos, bpos = layout.sev_index(j)
        value[off + ppos] = slope[off + ppos] = math.exp(theta[off + ppos])
        value[off + apos] = 1.0 + math.exp(theta[off + apos])
        slope[off + apos] = math.exp(theta[off + apos])
        if bpos != apos:
            value[off + bpos] = slope[off + bpos] = math.exp(theta[off + bpos])
    return value, slope


def standard_errors(portfolio, fitted: FittedModel, rel_step: float = 1e-5) -> dict:
    """Observed-information standard errors on the natural parameter scale.

    The Hessian of the incomplete log-likelihood is obtained by central
    differences of the analytic score.  Parameters loading on a
    non-positive-definite direction of the information matrix get
    ``se = None`` and ``flag = "singular"``.
    """
    arrays = _as_arrays(portfolio)
    params = fitted.params
    layout = Layout(params.K, params.representation, params.p_A, params.p_B)
    tN, tX = layout.pack(params)
    theta = np.concatenate([tN, tX, layout.pack_transitions(params.transitions)])
    D = theta.shape[0]
    H = np.empty((D, D))
    for k in range(D):
        h = rel_step * max(1.0, abs(theta[k]))
        if layout.K > 1 and k >= layout.freq_dim + layout.sev_dim:
            h = rel_step * 0.1
        up = theta.copy()
        up[k] += h
        dn = theta.copy()
        dn[k] -= h
        H[:, k] = (_score(arrays, layout, up) - _score(arrays, layout, dn)) / (2.0 * h)
    H = 0.5 * (H + H.T)
    info = -H
    names = layout.names(fitted.freq_covariate_names or [f"x{k}" for k in range(params.p_A)],
                         fitted.sev_covariate_names or [f"x{k}" for k in range(params.p_B)])
    value, slope = _natural_scale(layout, theta)
    se_theta = np.full(D, np.nan)
    flags = ["ok"] * D
    finite = np.all(np.isfinite(info))
    if finite:
        evals, evecs = np.linalg.eigh(info)
        tol = 1e-9 * max(1.0, float(np.max(np.abs(evals))))
        good = evals > tol
        bad_load = np.any(np.abs(evecs[:, ~good]) > 1e-6, axis=1) if np.any(~good) else np.zeros(D, bool)
        cov = (evecs[:, good] / evals[good]) @ evecs[:, good].T
        se_theta = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        for k in range(D):
            if bad_load[k]:
                flags[k] = "singular"
    else:
        flags = ["singular"] * D
    out = {}
    for k in range(D):
        se = None if flags[k] != "ok" else float(se_theta[k] * slope[k])
        out[names[k]] = {"estimate": float(value[k]), "se": se, "flag": flags[k]}
    return out

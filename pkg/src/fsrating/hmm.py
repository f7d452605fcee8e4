"""Scaled forward/backward recursions over latent risk profiles.

Forward weights are normalised each period: ``alpha_hat[t]`` sums to one and
``log_norm[t]`` holds the log of the normaliser (including the per-period
emission shift), so the policy log-likelihood is ``log_norm.sum()``.  The
backward weights use the same normalisers, which makes
``gamma[t] = alpha_hat[t] * beta_hat[t]`` with no further scaling.

Batched routines take emissions padded to a common horizon; padded periods
carry a log-emission of zero, which leaves every recursion unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import ModelParameters, TransitionModel, gb2_log_pdf, nb_log_pmf
from .portfolio import Portfolio, PortfolioArrays

__all__ = [
    "DegenerateLikelihoodError",
    "HmmPosteriors",
    "emissions",
    "forward",
    "backward",
    "responsibilities",
    "forward_backward",
    "prior_assignment",
    "posterior_assignment",
    "filtered_assignments",
    "marginal_log_likelihood",
    "pseudo_marginal_log_likelihood",
]


class DegenerateLikelihoodError(FloatingPointError):
    """Every profile assigns zero probability to an observed period."""


@dataclass(frozen=True)
class HmmPosteriors:
    """Portfolio-wide smoothing output, rows aligned with ``PortfolioArrays``.

    ``xi[r]`` is the joint posterior of the profiles at rows ``r - 1`` and
    ``r`` and is zero on each policy's first period.
    """

    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    log_norm: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    policy_loglik: np.ndarray

    @property
    def log_likelihood(self) -> float:
        return float(np.sum(self.policy_loglik))


def _profile_arrays(arrays: PortfolioArrays, params: ModelParameters):
    st = params.stacked()
    if st["delta_A"].shape[1] != arrays.A.shape[1] or st["delta_B"].shape[1] != arrays.B.shape[1]:
        raise ValueError("design dimensions do not match the model parameters")
    expo_lambda = arrays.exposure[:, None] * np.exp(arrays.A @ st["delta_A"].T)
    mu = st["phi"][None, :] * np.exp(arrays.B @ st["delta_B"].T)
    return st, expo_lambda, mu


def emissions(portfolio: Portfolio | PortfolioArrays, params: ModelParameters) -> np.ndarray:
    """Log emission per (row, profile): NB count term plus GB2 terms of every claim."""
    arrays = portfolio.arrays if isinstance(portfolio, Portfolio) else portfolio
    st, expo_lambda, mu = _profile_arrays(arrays, params)
    out = nb_log_pmf(arrays.counts[:, None], st["a_U"][None, :], st["b_U"][None, :], expo_lambda)
    if arrays.claim_x.size:
        r = arrays.claim_row
        sev = gb2_log_pdf(arrays.claim_x[:, None], mu[r], st["a_V"][None, :], st["b_V"][None, :], st["phi"][None, :])
        np.add.at(out, r, sev)
    return out


def _pad(values: np.ndarray, pad_index: np.ndarray, fill=0.0) -> np.ndarray:
    out = values[np.maximum(pad_index, 0)]
    out[pad_index < 0] = fill
    return out


def _forward_batch(log_em: np.ndarray, w0: np.ndarray, W: np.ndarray):
    """``log_em`` has shape (M, T, K).  Returns alpha_hat, log_norm, scaled emissions, sums."""
    M, T, K = log_em.shape
    shift = log_em.max(axis=2, keepdims=True)
    if not np.all(np.isfinite(shift)):
        bad = np.argwhere(~np.isfinite(shift[..., 0]))[0]
        raise DegenerateLikelihoodError(f"zero likelihood under every profile at policy {bad[0]} period {bad[1] + 1}")
    em = np.exp(log_em - shift)
    alpha = np.empty((M, T, K))
    sums = np.empty((M, T))
    prev = np.broadcast_to(w0, (M, K))
    for t in range(T):
        a = prev * em[:, t, :]
        s = a.sum(axis=1)
        if np.any(~(s > 0)):
            bad = int(np.argmax(~(s > 0)))
            raise DegenerateLikelihoodError(f"degenerate likelihood at policy {bad} period {t + 1}")
        alpha[:, t, :] = a / s[:, None]
        sums[:, t] = s
        prev = alpha[:, t, :] @ W
    log_norm = np.log(sums) + shift[..., 0]
    return alpha, log_norm, em, sums


def _backward_batch(em: np.ndarray, sums: np.ndarray, W: np.ndarray) -> np.ndarray:
    M, T, K = em.shape
    beta = np.empty((M, T, K))
    beta[:, T - 1, :] = 1.0
    for t in range(T - 2, -1, -1):
        beta[:, t, :] = ((em[:, t + 1, :] * beta[:, t + 1, :]) @ W.T) / sums[:, t + 1, None]
    return beta


def forward(emissions_i, transitions: TransitionModel):
    """Scaled forward pass for one policy; ``emissions_i`` is (T, K) in log space."""
    log_em = np.asarray(emissions_i, dtype=float)[None]
    alpha, log_norm, _, _ = _forward_batch(log_em, transitions.w0, transitions.W)
    return alpha[0], log_norm[0]


def backward(emissions_i, transitions: TransitionModel) -> np.ndarray:
    log_em = np.asarray(emissions_i, dtype=float)[None]
    _, _, em, sums = _forward_batch(log_em, transitions.w0, transitions.W)
    return _backward_batch(em, sums, transitions.W)[0]


def _xi_batch(alpha, beta, em, sums, W):
    # xi[:, t] for t >= 1 joins periods t - 1 and t; xi[:, 0] is zero.
    M, T, K = alpha.shape
    xi = np.zeros((M, T, K, K))
    if T > 1:
        right = em[:, 1:, :] * beta[:, 1:, :] / sums[:, 1:, None]
        xi[:, 1:] = alpha[:, :-1, :, None] * W[None, None] * right[:, :, None, :]
    return xi


def responsibilities(alpha_hat, beta_hat, emissions_i, transitions: TransitionModel):
    """Smoothed profile probabilities ``gamma`` (T, K) and pair probabilities ``xi`` (T, K, K)."""
    alpha = np.asarray(alpha_hat)[None]
    beta = np.asarray(beta_hat)[None]
    log_em = np.asarray(emissions_i, dtype=float)[None]
    _, _, em, sums = _forward_batch(log_em, transitions.w0, transitions.W)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)
    xi = _xi_batch(alpha, beta, em, sums, transitions.W)
    if xi.shape[1] > 1:
        xi[:, 1:] /= xi[:, 1:].sum(axis=(2, 3), keepdims=True)
    return gamma[0], xi[0]


def forward_backward(portfolio: Portfolio | PortfolioArrays, params: ModelParameters,
                     log_em: np.ndarray | None = None) -> HmmPosteriors:
    """Forward, backward and responsibilities for every policy at once."""
    arrays = portfolio.arrays if isinstance(portfolio, Portfolio) else portfolio
    if log_em is None:
        log_em = emissions(arrays, params)
    tr = params.transitions
    padded = _pad(log_em, arrays.pad_index)
    alpha, log_norm, em, sums = _forward_batch(padded, tr.w0, tr.W)
    beta = _backward_batch(em, sums, tr.W)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)
    xi = _xi_batch(alpha, beta, em, sums, tr.W)
    if xi.shape[1] > 1:
        tot = xi[:, 1:].sum(axis=(2, 3), keepdims=True)
        xi[:, 1:] /= np.where(tot > 0, tot, 1.0)
    valid = arrays.pad_index >= 0
    log_norm = np.where(valid, log_norm, 0.0)
    rows = arrays.pad_index[valid]
    order = np.argsort(rows)

    def flat(x):
        return x[valid][order]

    return HmmPosteriors(
        alpha_hat=flat(alpha),
        beta_hat=flat(beta),
        log_norm=flat(log_norm),
        gamma=flat(gamma),
        xi=flat(xi),
        policy_loglik=log_norm.sum(axis=1),
    )


def prior_assignment(transitions: TransitionModel, t: int) -> np.ndarray:
    """Marginal profile probabilities ``w0 W^(t-1)``."""
    if t < 1:
        raise ValueError("t must be at least 1")
    return transitions.w0 @ np.linalg.matrix_power(transitions.W, t - 1)


def posterior_assignment(history_emissions, params: ModelParameters | TransitionModel, t: int) -> np.ndarray:
    """Profile probabilities for period ``t`` given log emissions of periods ``1..t-1``."""
    tr = params.transitions if isinstance(params, ModelParameters) else params
    if t == 1:
        return tr.w0.copy()
    hist = np.asarray(history_emissions, dtype=float)
    if hist.shape[0] < t - 1:
        raise ValueError(f"history covers {hist.shape[0]} periods, need {t - 1}")
    alpha, _ = forward(hist[: t - 1], tr)
    pred = alpha[-1] @ tr.W
    return pred / pred.sum()


def filtered_assignments(portfolio: Portfolio | PortfolioArrays, params: ModelParameters,
                         log_em: np.ndarray | None = None) -> np.ndarray:
    """One-step-ahead profile probabilities for every row (no lookahead)."""
    arrays = portfolio.arrays if isinstance(portfolio, Portfolio) else portfolio
    if log_em is None:
        log_em = emissions(arrays, params)
    tr = params.transitions
    padded = _pad(log_em, arrays.pad_index)
    alpha, _, _, _ = _forward_batch(padded, tr.w0, tr.W)
    pred = np.empty_like(alpha)
    pred[:, 0, :] = tr.w0
    if alpha.shape[1] > 1:
        pred[:, 1:, :] = alpha[:, :-1, :] @ tr.W
    pred /= pred.sum(axis=2, keepdims=True)
    valid = arrays.pad_index >= 0
    order = np.argsort(arrays.pad_index[valid])
    return pred[valid][order]


def marginal_log_likelihood(portfolio: Portfolio | PortfolioArrays, params: ModelParameters) -> float:
    """Chain (forward-recursion) log-likelihood summed over policies in order."""
    return forward_backward(portfolio, params).log_likelihood


def pseudo_marginal_log_likelihood(portfolio: Portfolio | PortfolioArrays, params: ModelParameters) -> float:
    """Period-wise log-mixture using the marginal profile probabilities ``w0 W^(t-1)``.

    This ignores the serial coupling of the chain; it is exposed only for
    comparison with :func:`marginal_log_likelihood`.
    """
    arrays = portfolio.arrays if isinstance(portfolio, Portfolio) else portfolio
    log_em = emissions(arrays, params)
    tr = params.transitions
    T = int(arrays.period.max())
    marg = np.stack([prior_assignment(tr, t) for t in range(1, T + 1)])
    with np.errstate(divide="ignore"):
        log_w = np.log(marg[arrays.period - 1])
    z = log_w + log_em
    mx = z.max(axis=1, keepdims=True)
    return float(np.sum(mx[:, 0] + np.log(np.exp(z - mx).sum(axis=1))))

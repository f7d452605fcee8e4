"""Prior and posterior (Bonus-Malus) premia, credibility weights and two-profile scaling factors.

A *history* is a sequence of past periods.  Each period is either a
:class:`~fsrating.portfolio.PolicyPeriod` or a tuple
``(exposure, A_row, B_row, claim_sizes)``.  Premia are per unit of exposure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .distributions import ModelParameters, gb2_log_pdf, nb_log_pmf
from .hmm import filtered_assignments, posterior_assignment, prior_assignment
from .portfolio import Portfolio, ValidationError, earlier_totals
from .special import DomainError

__all__ = [
    "PremiumBreakdown",
    "ScalingFactors",
    "HistorySummary",
    "summarize_history",
    "prior_premium",
    "posterior_premium",
    "credibility_weights",
    "credibility_form_premium",
    "scaling_factors",
    "price_portfolio",
]


@dataclass(frozen=True)
class PremiumBreakdown:
    policy_id: str | None
    period: int
    prior_premium: float
    posterior_premium: float
    profile_prior_premia: np.ndarray
    profile_posterior_premia: np.ndarray
    prior_assignment: np.ndarray
    posterior_assignment: np.ndarray
    kappa_U: np.ndarray
    kappa_V: np.ndarray

    @property
    def bonus_malus_additive(self) -> float:
        return self.posterior_premium - self.prior_premium

    @property
    def bonus_malus_ratio(self) -> float:
        return self.posterior_premium / self.prior_premium


@dataclass(frozen=True)
class ScalingFactors:
    r_prior: float
    s_prior: float
    r_post: float
    s_post: float


@dataclass(frozen=True)
class HistorySummary:
    """Per-profile sufficient statistics of a claims history."""

    n_periods: int
    total_claims: float          # sum of N
    total_amount: float          # sum of all claim sizes
    expo_lambda: np.ndarray      # (K,) sum of e * lambda^(j)
    claims_mu: np.ndarray        # (K,) sum of N * mu^(j)
    log_emissions: np.ndarray    # (n_periods, K)


def _unpack_period(rec):
    if hasattr(rec, "claim_sizes"):
        return rec.exposure, rec.freq_covariates, rec.sev_covariates, rec.claim_sizes
    e, A, B, claims = rec
    return float(e), np.asarray(A, dtype=float), np.asarray(B, dtype=float), tuple(claims)


def _check_params(params: ModelParameters):
    st = params.stacked()
    if np.any(st["a_V"] <= 1.0):
        raise DomainError("a_V must exceed 1 for a finite severity mean")
    return st


def summarize_history(params: ModelParameters, history: Sequence = ()) -> HistorySummary:
    st = _check_params(params)
    K = params.K
    el = np.zeros(K)
    nm = np.zeros(K)
    tot_n = 0.0
    tot_x = 0.0
    log_em = np.zeros((len(history), K))
    for t, rec in enumerate(history):
        e, A, B, claims = _unpack_period(rec)
        if A.shape[-1] != params.p_A or B.shape[-1] != params.p_B:
            raise ValueError("history covariates do not match the model dimensions")
        lam = np.exp(st["delta_A"] @ A)
        mu = st["phi"] * np.exp(st["delta_B"] @ B)
        n = len(claims)
        el += e * lam
        nm += n * mu
        tot_n += n
        tot_x += float(sum(claims))
        log_em[t] = nb_log_pmf(n, st["a_U"], st["b_U"], e * lam)
        for x in claims:
            log_em[t] += gb2_log_pdf(x, mu, st["a_V"], st["b_V"], st["phi"])
    return HistorySummary(len(history), tot_n, tot_x, el, nm, log_em)


def _profile_means(st, A, B):
    """Per-profile prior mean frequency (per unit exposure) and mean claim size."""
    lam = np.exp(st["delta_A"] @ np.asarray(A, dtype=float))
    sev_scale = np.exp(st["delta_B"] @ np.asarray(B, dtype=float))
    return lam, sev_scale


def prior_premium(params: ModelParameters, A, B, t: int = 1):
    """Collective premium ``pi``, the per-profile premia and the assignment probabilities."""
    st = _check_params(params)
    lam, sev_scale = _profile_means(st, A, B)
    per_profile = lam * st["a_U"] / st["b_U"] * sev_scale * st["b_V"] / (st["a_V"] - 1.0)
    assign = prior_assignment(params.transitions, t)
    return float(assign @ per_profile), per_profile, assign


def credibility_weights(params: ModelParameters, history: Sequence = (), summary: HistorySummary | None = None):
    """Per-profile ``(kappa_U, kappa_V)``; both equal one for an empty history."""
    st = _check_params(params)
    s = summary if summary is not None else summarize_history(params, history)
    kU = st["b_U"] / (st["b_U"] + s.expo_lambda)
    kV = (st["a_V"] - 1.0) / (st["a_V"] - 1.0 + s.claims_mu)
    return kU, kV


def posterior_premium(params: ModelParameters, history: Sequence, A_t, B_t,
                      policy_id: str | None = None) -> PremiumBreakdown:
    """Bayesian premium for period ``len(history) + 1`` given the earlier periods only."""
    st = _check_params(params)
    s = summarize_history(params, history)
    t = s.n_periods + 1
    pi, per_prior, assign_prior = prior_premium(params, A_t, B_t, t)
    lam, sev_scale = _profile_means(st, A_t, B_t)
    freq_post = (st["a_U"] + s.total_claims) / (st["b_U"] + s.expo_lambda)
    sev_post = (st["b_V"] + st["phi"] * s.total_amount) / (st["a_V"] + s.claims_mu - 1.0)
    per_post = lam * freq_post * sev_scale * sev_post
    if s.n_periods == 0:
        assign_post = assign_prior.copy()
        per_post = per_prior.copy()
    else:
        assign_post = posterior_assignment(s.log_emissions, params, t)
    post = float(assign_post @ per_post)
    if s.n_periods == 0:
        post = pi
    kU, kV = credibility_weights(params, summary=s)
    return PremiumBreakdown(policy_id, t, pi, post, per_prior, per_post, assign_prior, assign_post, kU, kV)


def _credibility_factor(kappa, observed, expected):
    ratio = np.zeros_like(expected)
    zero = expected == 0
    if np.any(zero & (observed != 0)):
        raise ValueError("observed total is nonzero although its expectation is zero")
    np.divide(observed, expected, out=ratio, where=~zero)
    return kappa + (1.0 - kappa) * ratio


def credibility_form_premium(params: ModelParameters, history: Sequence, A_t, B_t) -> float:
    """Posterior premium written as credibility-weighted prior means and observed totals."""
    st = _check_params(params)
    s = summarize_history(params, history)
    t = s.n_periods + 1
    _, per_prior, assign_prior = prior_premium(params, A_t, B_t, t)
    if s.n_periods == 0:
        return float(assign_prior @ per_prior)
    kU, kV = credibility_weights(params, summary=s)
    exp_claims = st["a_U"] / st["b_U"] * s.expo_lambda
    exp_amount = s.claims_mu / st["phi"] * st["b_V"] / (st["a_V"] - 1.0)
    fU = _credibility_factor(kU, s.total_claims, exp_claims)
    fV = _credibility_factor(kV, s.total_amount, exp_amount)
    assign = posterior_assignment(s.log_emissions, params, t)
    return float(np.sum(assign * per_prior * fU * fV))


def scaling_factors(params: ModelParameters, A, B, history: Sequence = ()) -> ScalingFactors:
    """Profile-2 over profile-1 ratios of expected frequency (r) and severity (s)."""
    if params.K != 2:
        raise NotImplementedError("scaling factors are defined for two profiles only")
    st = _check_params(params)
    s = summarize_history(params, history)
    lam, sev_scale = _profile_means(st, A, B)
    f_prior = lam * st["a_U"] / st["b_U"]
    x_prior = sev_scale * st["b_V"] / (st["a_V"] - 1.0)
    f_post = lam * (st["a_U"] + s.total_claims) / (st["b_U"] + s.expo_lambda)
    x_post = sev_scale * (st["b_V"] + st["phi"] * s.total_amount) / (st["a_V"] + s.claims_mu - 1.0)
    return ScalingFactors(
        float(f_prior[1] / f_prior[0]), float(x_prior[1] / x_prior[0]),
        float(f_post[1] / f_post[0]), float(x_post[1] / x_post[0]),
    )


def price_portfolio(portfolio: Portfolio, fitted) -> pd.DataFrame:
    """One row per policy period: prior and posterior premia plus per-profile components.

    ``fitted`` is a :class:`~fsrating.estimation.FittedModel` or bare
    :class:`ModelParameters`.  Posterior quantities condition only on the
    policy's earlier periods.
    """
    params = fitted.params if hasattr(fitted, "params") else fitted
    names_f = getattr(fitted, "freq_covariate_names", ()) or ()
    names_s = getattr(fitted, "sev_covariate_names", ()) or ()
    if names_f and tuple(names_f) != tuple(portfolio.freq_covariate_names):
        raise ValidationError("frequency covariates of the model and the portfolio differ")
    if names_s and tuple(names_s) != tuple(portfolio.sev_covariate_names):
        raise ValidationError("severity covariates of the model and the portfolio differ")
    arrays = portfolio.arrays
    if arrays.A.shape[1] != params.p_A or arrays.B.shape[1] != params.p_B:
        raise ValidationError("design dimensions do not match the model")
    st = _check_params(params)
    K = params.K
    e = arrays.exposure
    lam = np.exp(arrays.A @ st["delta_A"].T)
    sev_scale = np.exp(arrays.B @ st["delta_B"].T)
    mu = st["phi"] * sev_scale
    n = arrays.counts.astype(float)
    s_el = earlier_totals(arrays, e[:, None] * lam)
    s_n = earlier_totals(arrays, n)[:, None]
    s_nm = earlier_totals(arrays, n[:, None] * mu)
    s_x = earlier_totals(arrays, arrays.loss)[:, None]
    first = arrays.period == 1

    freq_prior = lam * st["a_U"] / st["b_U"]
    sev_prior = sev_scale * st["b_V"] / (st["a_V"] - 1.0)
    freq_post = lam * (st["a_U"] + s_n) / (st["b_U"] + s_el)
    sev_post = sev_scale * (st["b_V"] + st["phi"] * s_x) / (st["a_V"] + s_nm - 1.0)
    prem_prior = freq_prior * sev_prior
    prem_post = freq_post * sev_post
    Tmax = int(arrays.period.max())
    marg = np.stack([prior_assignment(params.transitions, t) for t in range(1, Tmax + 1)])
    assign_prior = marg[arrays.period - 1]
    assign_post = filtered_assignments(arrays, params)
    assign_post[first] = assign_prior[first]
    pi = np.sum(assign_prior * prem_prior, axis=1)
    pi_star = np.sum(assign_post * prem_post, axis=1)
    pi_star[first] = pi[first]
    kU = st["b_U"] / (st["b_U"] + s_el)
    kV = (st["a_V"] - 1.0) / (st["a_V"] - 1.0 + s_nm)

    ids = [pp.policy_id for pp in portfolio.periods()]
    cols = {
        "policy_id": ids,
        "period": arrays.period,
        "exposure": e,
        "claim_count": arrays.counts,
        "loss": arrays.loss,
        "prior_premium": pi,
        "posterior_premium": pi_star,
        "bm_additive": pi_star - pi,
        "bm_ratio": pi_star / pi,
    }
    for j in range(K):
        cols[f"assign_prior_{j}"] = assign_prior[:, j]
        cols[f"assign_post_{j}"] = assign_post[:, j]
        cols[f"premium_prior_{j}"] = prem_prior[:, j]
        cols[f"premium_post_{j}"] = prem_post[:, j]
        cols[f"kappa_U_{j}"] = kU[:, j]
        cols[f"kappa_V_{j}"] = kV[:, j]
    for j in range(K):
        cols[f"freq_prior_{j}"] = freq_prior[:, j]
        cols[f"freq_post_{j}"] = freq_post[:, j]
        cols[f"sev_prior_{j}"] = sev_prior[:, j]
        cols[f"sev_post_{j}"] = sev_post[:, j]
    return pd.DataFrame(cols)

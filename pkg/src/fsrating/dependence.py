"""Frequency-severity dependence implied by the latent-profile mixture.

Given the profile, the claim count ``N`` and a claim size ``X`` are
independent with NB and GB2 laws; all dependence comes from mixing over the
profile.  Rank correlations use the tie-corrected population versions that
the usual sample statistics estimate: Spearman's rho with mid-ranks for the
discrete count margin and Kendall's tau-b.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize, stats

from .distributions import ModelParameters, gb2_cdf, nb_cdf, nb_log_pmf
from .hmm import filtered_assignments, posterior_assignment, prior_assignment
from .pricing import summarize_history
from .simulate import sample_gb2, sample_nb

__all__ = [
    "MixtureMargins",
    "RankCorrelations",
    "DependenceReport",
    "mixture_margins",
    "mixture_covariance",
    "two_profile_covariance_closed_form",
    "two_profile_covariance_printed",
    "covariance_forms",
    "implied_copula_cdf",
    "rank_correlations",
    "dependence_summary",
    "classify_sign",
]


@dataclass(frozen=True)
class MixtureMargins:
    """Profile weights with per-profile NB count and GB2 size laws for one policy period."""

    weights: np.ndarray
    nb_a: np.ndarray
    nb_b: np.ndarray
    nb_m: np.ndarray       # exposure * lambda
    exposure: float
    gb2_mu: np.ndarray
    gb2_a: np.ndarray
    gb2_b: np.ndarray
    gb2_phi: np.ndarray

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def frequency_means(self) -> np.ndarray:
        """Per-profile E[N / e]."""
        return self.nb_a / self.nb_b * self.nb_m / self.exposure

    @property
    def severity_means(self) -> np.ndarray:
        return self.gb2_mu / self.gb2_phi * self.gb2_b / (self.gb2_a - 1.0)

    def count_pmf(self, tail: float = 1e-14, n_max: int = 100000) -> np.ndarray:
        """(K, n_cut + 1) per-profile probabilities on a support holding all but ``tail`` mass."""
        n = 64
        while True:
            grid = np.arange(n + 1)
            cdf = nb_cdf(n, self.nb_a, self.nb_b, self.nb_m)
            if np.all(1.0 - cdf <= tail) or n >= n_max:
                break
            n *= 2
        pmf = np.exp(nb_log_pmf(grid[None, :], self.nb_a[:, None], self.nb_b[:, None], self.nb_m[:, None]))
        mass = pmf.sum(axis=0)
        last = int(np.nonzero(mass > 0)[0].max()) if np.any(mass > 0) else 0
        return pmf[:, : last + 1]

    def size_cdf(self, x, j=None):
        """Per-profile (``j``) or mixture size CDF at ``x``."""
        if j is not None:
            return gb2_cdf(x, self.gb2_mu[j], self.gb2_a[j], self.gb2_b[j], self.gb2_phi[j])
        return float(sum(w * gb2_cdf(x, self.gb2_mu[k], self.gb2_a[k], self.gb2_b[k], self.gb2_phi[k])
                         for k, w in enumerate(self.weights)))


def mixture_margins(params: ModelParameters, A, B, t: int = 1, variant: str = "prior",
                    history: Sequence = (), exposure: float = 1.0,
                    weights: np.ndarray | None = None) -> MixtureMargins:
    """Mixture for period ``t`` (prior) or for the period after ``history`` (posterior)."""
    st = params.stacked()
    lam = np.exp(st["delta_A"] @ np.asarray(A, dtype=float))
    mu = st["phi"] * np.exp(st["delta_B"] @ np.asarray(B, dtype=float))
    aU, bU, aV, bV = st["a_U"], st["b_U"], st["a_V"], st["b_V"]
    if variant == "prior":
        w = prior_assignment(params.transitions, t) if weights is None else np.asarray(weights, float)
    elif variant == "posterior":
        s = summarize_history(params, history)
        w = posterior_assignment(s.log_emissions, params, s.n_periods + 1) if weights is None else np.asarray(weights, float)
        aU = aU + s.total_claims
        bU = bU + s.expo_lambda
        aV = aV + s.claims_mu
        bV = bV + st["phi"] * s.total_amount
    else:
        raise ValueError("variant must be 'prior' or 'posterior'")
    return MixtureMargins(w, aU, bU, exposure * lam, float(exposure), mu, aV, bV, st["phi"])


# --------------------------------------------------------------------------
# covariance


def mixture_covariance(assign_probs, freq_means, sev_means) -> float:
    """Cov(N/e, X) of the mixture: ``sum_j P_j f_j (s_j - sum_h P_h s_h)``."""
    P = np.asarray(assign_probs, dtype=float)
    f = np.asarray(freq_means, dtype=float)
    s = np.asarray(sev_means, dtype=float)
    if not np.isclose(P.sum(), 1.0, atol=1e-10):
        raise ValueError("assignment probabilities must sum to one")
    return float(np.sum(P * f * (s - P @ s)))


def two_profile_covariance_closed_form(w, lam, mu, r, s) -> float:
    """Covariance for weights ``(w, 1 - w)`` and means ``(lam, r lam)``, ``(mu, s mu)``.

    Equals ``w (1 - w) lam mu (r - 1)(s - 1)``, which is what direct moment
    computation gives.
    """
    return float(w * (1.0 - w) * lam * mu * (r - 1.0) * (s - 1.0))


def two_profile_covariance_printed(w, lam, mu, r, s) -> float:
    """The published variant ``w (1 - w) lam mu [s (r - 2) + 1]``, kept for comparison only."""
    return float(w * (1.0 - w) * lam * mu * (s * (r - 2.0) + 1.0))


def covariance_forms(w, lam, mu, r, s) -> dict:
    exact = mixture_covariance([w, 1.0 - w], [lam, r * lam], [mu, s * mu])
    return {
        "mixture": exact,
        "closed_form": two_profile_covariance_closed_form(w, lam, mu, r, s),
        "printed_variant": two_profile_covariance_printed(w, lam, mu, r, s),
    }


# --------------------------------------------------------------------------
# copula


def _count_quantile(u, cdf):
    """Smallest n with F_N(n) >= u."""
    idx = int(np.searchsorted(cdf, u - 1e-15, side="left"))
    return min(idx, cdf.size - 1)


def _size_quantile(v, margins: MixtureMargins):
    if v <= 0.0:
        return 0.0
    if v >= 1.0:
        return np.inf
    hi = float(np.max(margins.severity_means)) + 1.0
    while margins.size_cdf(hi) < v:
        hi *= 4.0
    return optimize.brentq(lambda x: margins.size_cdf(x) - v, 0.0, hi, xtol=1e-14 * hi, rtol=1e-14, maxiter=500)


def implied_copula_cdf(u, v, margins: MixtureMargins) -> float:
    """C(u, v) = H(F_N^-(u), G^-(v)) with generalized inverses of the mixture margins.

    ``H(n, x) = sum_j P_j F_j(n) G_j(x)``.  On the discrete count margin the
    copula is only determined at ``u`` in the range of ``F_N``; elsewhere the
    generalized inverse picks the next atom.
    """
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError("u and v must lie in [0, 1]")
    if u == 0.0 or v == 0.0:
        return 0.0
    pmf = margins.count_pmf()
    Fj = np.cumsum(pmf, axis=1)
    F = margins.weights @ Fj
    n = _count_quantile(u, F) if u < 1.0 else F.size - 1
    if u >= 1.0:
        Fn = np.ones(margins.K)
    else:
        Fn = Fj[:, n]
    if v >= 1.0:
        Gx = np.ones(margins.K)
    else:
        x = _size_quantile(v, margins)
        Gx = np.array([margins.size_cdf(x, j) for j in range(margins.K)])
    return float(np.clip(np.sum(margins.weights * Fn * Gx), 0.0, 1.0))


# --------------------------------------------------------------------------
# rank correlations


@dataclass(frozen=True)
class RankCorrelations:
    spearman_rho: float
    kendall_tau: float
    method: str
    se_rho: float = 0.0
    se_tau: float = 0.0


def _size_exceedance(margins: MixtureMargins, j: int, k: int, step: float = 0.05) -> float:
    """P(X_k < X_j) for independent sizes from profiles j and k.

    With ``X_j = (b_j / phi_j) exp(T)``, ``T`` has the log-Beta-prime density
    ``exp(mu t - (mu + a) log(1 + e^t)) / B(mu, a)``.  The integrand is
    analytic in a strip of half-width pi around the real axis, so the
    trapezoid rule on a uniform grid converges geometrically.
    """
    if j == k:
        return 0.5
    mu, a = margins.gb2_mu[j], margins.gb2_a[j]
    mode = np.log(mu / a)
    t = np.arange(mode - 45.0 / mu - 1.0, mode + 45.0 / a + 1.0, step)
    log_f = mu * t - (mu + a) * np.logaddexp(0.0, t)
    f = np.exp(log_f - log_f.max())
    x = margins.gb2_b[j] / margins.gb2_phi[j] * np.exp(t)
    G = margins.size_cdf(x, k)
    return float(np.sum(f * G) / np.sum(f))


def _quadrature_rank(margins: MixtureMargins):
    w = margins.weights
    K = margins.K
    pmf = margins.count_pmf()
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    Fj = np.cumsum(pmf, axis=1)
    Fj_prev = np.concatenate([np.zeros((K, 1)), Fj[:, :-1]], axis=1)
    p = w @ pmf
    F = w @ Fj
    F_prev = w @ Fj_prev
    mid = 0.5 * (F + F_prev)
    I = np.full((K, K), 0.5)
    for j in range(K):
        for k in range(j + 1, K):
            I[j, k] = _size_exceedance(margins, j, k)
            I[k, j] = 1.0 - I[j, k]
    # Spearman: 12 Cov(mid-cdf(N), G(X)) / sqrt(1 - sum p^3)
    e_mid = pmf @ mid                       # E_j[mid-cdf(N)]
    e_g = I @ w                             # E_j[G(X)]
    cov = float(np.sum(w * e_mid * e_g)) - 0.25
    ties_rho = 1.0 - float(np.sum(p**3))
    rho = 12.0 * cov / np.sqrt(ties_rho) if ties_rho > 0 else 0.0
    # Kendall tau-b: E[sign(N - N') sign(X - X')] / sqrt(1 - sum p^2)
    gt = pmf @ Fj_prev.T                    # gt[j, k] = P(N_j > N_k)
    tau_a = float(np.sum(np.outer(w, w) * (gt - gt.T) * (2.0 * I - 1.0)))
    ties_tau = 1.0 - float(np.sum(p**2))
    tau = tau_a / np.sqrt(ties_tau) if ties_tau > 0 else 0.0
    return float(np.clip(rho, -1, 1)), float(np.clip(tau, -1, 1))


def _draw(margins: MixtureMargins, n: int, rng: np.random.Generator):
    z = rng.choice(margins.K, size=n, p=margins.weights / margins.weights.sum())
    counts = sample_nb(rng, margins.nb_a[z], margins.nb_b[z], margins.nb_m[z])
    sizes = sample_gb2(rng, margins.gb2_mu[z], margins.gb2_a[z], margins.gb2_b[z], margins.gb2_phi[z])
    return counts / margins.exposure, sizes


def _mc_rank(margins: MixtureMargins, n: int, seed: int, n_batches: int = 10):
    rng = np.random.default_rng(seed)
    freq, sizes = _draw(margins, n, rng)
    rho = stats.spearmanr(freq, sizes).statistic
    tau = stats.kendalltau(freq, sizes).statistic
    rho = 0.0 if np.isnan(rho) else float(rho)
    tau = 0.0 if np.isnan(tau) else float(tau)
    # batch spread as a standard-error estimate
    br, bt = [], []
    for chunk_f, chunk_x in zip(np.array_split(freq, n_batches), np.array_split(sizes, n_batches)):
        r = stats.spearmanr(chunk_f, chunk_x).statistic
        t = stats.kendalltau(chunk_f, chunk_x).statistic
        br.append(0.0 if np.isnan(r) else r)
        bt.append(0.0 if np.isnan(t) else t)
    se_rho = float(np.std(br, ddof=1) / np.sqrt(n_batches))
    se_tau = float(np.std(bt, ddof=1) / np.sqrt(n_batches))
    return rho, tau, se_rho, se_tau


def rank_correlations(margins: MixtureMargins, method: str = "quadrature", n: int = 1_000_000,
                      seed: int = 0) -> RankCorrelations:
    """Spearman's rho and Kendall's tau between ``N / e`` and a claim size.

    ``monte_carlo`` draws ``(Z, N, X)`` triples, with ``X`` a size drawn from
    the profile's GB2 law for every draw (also when ``N = 0``), and applies
    the sample statistics with average ranks.  ``quadrature`` evaluates the
    same population quantities from the count pmf and trapezoid integrals
    of the size CDFs on the log scale.
    """
    if method == "quadrature":
        rho, tau = _quadrature_rank(margins)
        return RankCorrelations(rho, tau, "quadrature")
    if method == "monte_carlo":
        if n < 10_000:
            raise ValueError("Monte Carlo rank correlations need at least 10^4 draws")
        rho, tau, se_r, se_t = _mc_rank(margins, n, seed)
        return RankCorrelations(rho, tau, "monte_carlo", se_r, se_t)
    raise ValueError("method must be 'quadrature' or 'monte_carlo'")


# --------------------------------------------------------------------------
# portfolio summary


def classify_sign(value: float, tol: float) -> str:
    if value > tol:
        return "positive"
    if value < -tol:
        return "negative"
    return "zero"


@dataclass
class DependenceReport:
    table: pd.DataFrame
    histogram: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"histogram": self.histogram, "records": self.table.to_dict(orient="records")}


def dependence_summary(portfolio, fitted, variant: str = "prior", rank_method: str = "quadrature",
                       n_mc: int = 100_000, seed: int = 0) -> DependenceReport:
    """Covariance, Spearman's rho and Kendall's tau per policy period with sign counts.

    The prior variant uses ``w0 W^(t-1)`` and the prior hyperparameters; the
    posterior variant uses the filtered assignment and the conjugate update
    from the policy's earlier periods.
    """
    params = fitted.params if hasattr(fitted, "params") else fitted
    arrays = portfolio.arrays
    if variant not in ("prior", "posterior"):
        raise ValueError("variant must be 'prior' or 'posterior'")
    if variant == "posterior":
        assign = filtered_assignments(arrays, params)
    periods = list(portfolio.periods())
    records = []
    for r, pp in enumerate(periods):
        t = pp.period_index
        if variant == "prior":
            m = mixture_margins(params, pp.freq_covariates, pp.sev_covariates, t=t, exposure=pp.exposure)
        else:
            i = arrays.policy_of_row[r]
            history = periods[arrays.starts[i]: r]
            m = mixture_margins(params, pp.freq_covariates, pp.sev_covariates, variant="posterior",
                                history=history, exposure=pp.exposure, weights=assign[r])
        cov = mixture_covariance(m.weights, m.frequency_means, m.severity_means)
        if params.K == 1:
            rho = tau = 0.0
        else:
            rc = rank_correlations(m, rank_method, n=n_mc, seed=seed + r)
            rho, tau = rc.spearman_rho, rc.kendall_tau
        scale = float(np.max(m.frequency_means) * np.max(m.severity_means))
        records.append({
            "policy_id": pp.policy_id,
            "period": t,
            "covariance": cov,
            "spearman_rho": rho,
            "kendall_tau": tau,
            "sign_covariance": classify_sign(cov, 1e-12 * max(scale, 1.0)),
            "sign_rho": classify_sign(rho, 1e-10),
            "sign_tau": classify_sign(tau, 1e-10),
        })
    table = pd.DataFrame(records)
    hist = {}
    for col in ("sign_covariance", "sign_rho", "sign_tau"):
        counts = table[col].value_counts()
        hist[col.replace("sign_", "")] = {k: int(counts.get(k, 0)) for k in ("positive", "negative", "zero")}
    return DependenceReport(table, hist)

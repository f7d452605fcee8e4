"""Model comparison: information criteria, loss ratios, ordered Lorenz curves and ratio Gini matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .distributions import Representation

__all__ = [
    "LorenzCurve",
    "ComparisonMatrix",
    "information_criteria",
    "count_parameters",
    "loss_ratio",
    "ordered_lorenz",
    "gini_vs_constant",
    "ratio_gini_matrix",
    "minimax_index",
    "experience_report",
]


def information_criteria(loglik: float, n_params: int, n_obs: int) -> tuple[float, float]:
    """``(AIC, BIC)`` with ``n_obs`` the number of policy periods."""
    if n_obs < 1:
        raise ValueError("n_obs must be at least 1")
    aic = 2.0 * n_params - 2.0 * loglik
    bic = n_params * math.log(n_obs) - 2.0 * loglik
    return aic, bic


def count_parameters(K: int, representation, p_A: int, p_B: int) -> int:
    """Number of model parameters P.

    Full: ``K (p_A + p_B + 3)``.  Sparse: ``p_A + p_B + 1 + 4K``.  Both add
    ``(K + 1) K`` transition parameters when ``K > 1``.

    The sparse count includes the two regression intercepts, which the
    optimiser pins at zero because they are confounded with ``b_U`` and
    ``b_V``; the count is kept comparable with the full representation.
    """
    rep = Representation(representation)
    if K < 1:
        raise ValueError("K must be at least 1")
    if rep is Representation.FULL:
        P = K * (p_A + p_B + 3)
    else:
        P = (p_A + p_B + 1) + 4 * K
    if K > 1:
        P += (K + 1) * K
    return P


def loss_ratio(losses, exposures, premia) -> float:
    """``100 * sum(L) / sum(e * pi)``."""
    losses = np.asarray(losses, dtype=float)
    exposures = np.asarray(exposures, dtype=float)
    premia = np.asarray(premia, dtype=float)
    if not (losses.shape == exposures.shape == premia.shape):
        raise ValueError("losses, exposures and premia must be aligned")
    if np.any(premia <= 0):
        raise ValueError("premia must be strictly positive")
    denom = float(np.sum(exposures * premia))
    if denom == 0.0:
        raise ZeroDivisionError("total premium is zero")
    return 100.0 * float(np.sum(losses)) / denom


@dataclass(frozen=True)
class LorenzCurve:
    """Ordered Lorenz curve.

    ``x``/``y`` merge policies with tied relative premium into one segment;
    ``x_stable``/``y_stable`` keep one point per policy in stable order.
    """

    x: np.ndarray
    y: np.ndarray
    gini: float
    x_stable: np.ndarray
    y_stable: np.ndarray
    order: np.ndarray


_TIE_RTOL = 1e-12


def _auc(x, y) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def ordered_lorenz(benchmark_premia, alternative_premia, losses, exposures=None) -> LorenzCurve:
    """Lorenz curve of losses against benchmark premium, ordered by ``alternative / benchmark``.

    The Gini coefficient is twice the signed area between the diagonal and
    the curve (positive when the curve lies below the diagonal).
    """
    bench = np.asarray(benchmark_premia, dtype=float)
    alt = np.asarray(alternative_premia, dtype=float)
    L = np.asarray(losses, dtype=float)
    e = np.ones_like(bench) if exposures is None else np.asarray(exposures, dtype=float)
    if not (bench.shape == alt.shape == L.shape == e.shape) or bench.ndim != 1 or bench.size == 0:
        raise ValueError("inputs must be aligned non-empty vectors")
    if np.any(bench <= 0) or np.any(e <= 0):
        raise ValueError("benchmark premia and exposures must be strictly positive")
    if np.any(L < 0):
        raise ValueError("losses must be nonnegative")
    if L.sum() <= 0:
        raise ValueError("total loss must be positive")
    R = alt / bench
    order = np.argsort(R, kind="stable")
    # relative premia equal up to rounding form one tie class, kept in policy order
    Rs = R[order]
    new_class = np.ones(Rs.size, dtype=bool)
    new_class[1:] = Rs[1:] - Rs[:-1] > _TIE_RTOL * np.abs(Rs[1:])
    tie_class = np.cumsum(new_class)
    order = order[np.lexsort((order, tie_class))]
    prem = e * bench
    # clipping keeps rounding in the running sums from overshooting the endpoint
    xs = np.concatenate([[0.0], np.minimum(np.cumsum(prem[order]) / prem.sum(), 1.0)])
    ys = np.concatenate([[0.0], np.minimum(np.cumsum(L[order]) / L.sum(), 1.0)])
    xs[-1] = ys[-1] = 1.0
    # merge tie classes: keep the last point of each class
    last_of_run = np.ones(Rs.size, dtype=bool)
    last_of_run[:-1] = new_class[1:]
    keep = np.concatenate([[True], last_of_run])
    x, y = xs[keep], ys[keep]
    gini = 1.0 - 2.0 * _auc(x, y)
    return LorenzCurve(x, y, gini, xs, ys, order)


def gini_vs_constant(premia, losses, exposures=None) -> float:
    """Ordinary Gini of a premium vector against a flat (no-discrimination) benchmark."""
    premia = np.asarray(premia, dtype=float)
    return ordered_lorenz(np.ones_like(premia), premia, losses, exposures).gini


def minimax_index(matrix) -> int:
    """Benchmark row whose worst (max off-diagonal) ratio Gini is smallest; first index on ties."""
    G = np.asarray(matrix, dtype=float)
    n = G.shape[0]
    off = np.where(np.eye(n, dtype=bool), -np.inf, G)
    worst = off.max(axis=1) if n > 1 else np.zeros(1)
    return int(np.argmin(worst))


@dataclass(frozen=True)
class ComparisonMatrix:
    names: tuple[str, ...]
    gini: np.ndarray  # entry (b, a): benchmark b, alternative a
    winner: int
    gini_vs_constant: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.gini, index=list(self.names), columns=list(self.names))

    def to_dict(self) -> dict:
        return {
            "models": list(self.names),
            "ratio_gini": self.gini.tolist(),
            "minimax_winner": self.names[self.winner],
            "minimax_index": self.winner,
            "gini_vs_constant": self.gini_vs_constant.tolist(),
        }


def ratio_gini_matrix(premia: dict | list, losses, exposures=None, names=None) -> ComparisonMatrix:
    """Ratio Gini coefficients with each model in turn as benchmark."""
    if isinstance(premia, dict):
        names = tuple(premia.keys())
        vecs = [np.asarray(v, dtype=float) for v in premia.values()]
    else:
        vecs = [np.asarray(v, dtype=float) for v in premia]
        names = tuple(names) if names is not None else tuple(f"model{k}" for k in range(len(vecs)))
    n = len(vecs)
    if n < 2:
        raise ValueError("need at least two models")
    G = np.zeros((n, n))
    for b in range(n):
        for a in range(n):
            if a != b:
                G[b, a] = ordered_lorenz(vecs[b], vecs[a], losses, exposures).gini
    const = np.array([gini_vs_constant(v, losses, exposures) for v in vecs])
    return ComparisonMatrix(names, G, minimax_index(G), const)


def _bucket_means(df: pd.DataFrame, keys: list[str], cols: list[str]) -> pd.DataFrame:
    g = df.groupby(keys, sort=True)[cols]
    out = g.mean()
    out["n"] = g.size()
    return out.reset_index()


def experience_report(portfolio, fitted, amount_width: float = 2500.0,
                      priced: pd.DataFrame | None = None) -> dict[str, pd.DataFrame]:
    """Posterior-assignment, Bonus-Malus correction and per-profile summary tables.

    Buckets are whole years of prior exposure crossed with either the prior
    claim count or the prior claim amount (``amount_width`` wide buckets).
    """
    from .pricing import price_portfolio
    from .portfolio import summarize_claims_experience

    if priced is None:
        priced = price_portfolio(portfolio, fitted)
    hist = summarize_claims_experience(portfolio)
    df = priced.merge(hist, on=["policy_id", "period"], how="left")
    K = fitted.params.K if hasattr(fitted, "params") else fitted.K
    df["exposure_years"] = np.floor(df["prior_exposure"] + 1e-9).astype(int)
    df["amount_bucket"] = (np.floor(df["prior_claim_amount"] / amount_width) * amount_width).astype(float)
    assign = [f"assign_post_{j}" for j in range(K)]
    tables = {
        "assignment_by_count": _bucket_means(df, ["exposure_years", "prior_claim_count"], assign),
        "assignment_by_amount": _bucket_means(df, ["exposure_years", "amount_bucket"], assign),
        "correction_by_count": _bucket_means(df, ["exposure_years", "prior_claim_count"], ["bm_additive"]),
        "correction_by_amount": _bucket_means(df, ["exposure_years", "amount_bucket"], ["bm_additive"]),
    }
    rows = []
    w = df["exposure"].to_numpy()
    for j in range(K):
        for variant in ("prior", "post"):
            freq = df[f"freq_{variant}_{j}"].to_numpy()
            sev = df[f"sev_{variant}_{j}"].to_numpy()
            prem = df[f"premium_{variant}_{j}"].to_numpy()
            rows.append({
                "profile": j,
                "variant": "prior" if variant == "prior" else "posterior",
                "frequency_mean": float(np.average(freq, weights=w)),
                "frequency_median": float(np.median(freq)),
                "severity_mean": float(np.mean(sev)),
                "severity_median": float(np.median(sev)),
                "premium_mean": float(np.mean(prem)),
                "premium_median": float(np.median(prem)),
            })
    tables["profile_summary"] = pd.DataFrame(rows)
    return tables

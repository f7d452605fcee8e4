"""Synthetic portfolios drawn from known model parameters."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .distributions import (
    ModelParameters,
    ProfileFrequencyParams,
    ProfileSeverityParams,
    Representation,
    TransitionModel,
)
from .portfolio import CovariateSchema, Portfolio, build_portfolio

__all__ = [
    "SimConfig",
    "PRESETS",
    "preset",
    "simulate_portfolio",
    "recovery_experiment",
    "sample_nb",
    "sample_gb2",
]


def sample_nb(rng: np.random.Generator, a_U, b_U, expo_lambda, size=None):
    """NB counts: Poisson(expo_lambda * U) with U ~ Gamma(a_U, rate b_U)."""
    p = np.asarray(b_U) / (np.asarray(b_U) + np.asarray(expo_lambda))
    return rng.negative_binomial(a_U, p, size=size)


def sample_gb2(rng: np.random.Generator, mu, a_V, b_V, phi, size=None):
    """GB2 sizes: ``(b_V / phi) * G1 / G2`` with ``G1 ~ Gamma(mu)``, ``G2 ~ Gamma(a_V)``."""
    g1 = rng.standard_gamma(mu, size=size)
    g2 = rng.standard_gamma(a_V, size=size)
    return np.asarray(b_V) / np.asarray(phi) * g1 / g2


@dataclass
class SimConfig:
    """Simulation settings.

    ``T`` is a fixed horizon or an inclusive ``(T_min, T_max)`` range drawn
    uniformly per policy.  ``exposure`` is a constant or an inclusive
    ``(low, high)`` uniform range inside ``(0, 1]``.  Covariates are an
    intercept, ``n_continuous`` standard normal columns and optionally one
    categorical column with ``categorical_levels`` (first level is the
    reference), all used by both frequency and severity.
    """

    truth: ModelParameters
    M: int = 1000
    T: int | tuple[int, int] = 1
    n_continuous: int = 1
    categorical_levels: tuple[str, ...] = ()
    exposure: float | tuple[float, float] = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        T = self.T if isinstance(self.T, (tuple, list)) else (self.T, self.T)
        if len(T) != 2 or T[0] < 1 or T[1] < T[0]:
            raise ValueError("T must be >= 1 (or a valid range)")
        p = 1 + self.n_continuous + max(len(self.categorical_levels) - 1, 0)
        if p != self.truth.p_A or p != self.truth.p_B:
            raise ValueError(f"covariate layout has {p} columns, truth expects {self.truth.p_A}/{self.truth.p_B}")

    @property
    def schema(self) -> CovariateSchema:
        doc = {f"x{k + 1}": {"role": "both", "type": "continuous"} for k in range(self.n_continuous)}
        if self.categorical_levels:
            doc["cat"] = {"role": "both", "type": "categorical",
                          "reference": self.categorical_levels[0], "levels": list(self.categorical_levels)}
        return CovariateSchema.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "truth": self.truth.to_dict(),
            "M": self.M,
            "T": list(self.T) if isinstance(self.T, (tuple, list)) else self.T,
            "n_continuous": self.n_continuous,
            "categorical_levels": list(self.categorical_levels),
            "exposure": list(self.exposure) if isinstance(self.exposure, (tuple, list)) else self.exposure,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        doc = dict(doc)
        truth = doc.pop("truth", None)
        name = doc.pop("preset", None)
        if truth is None:
            if name is None:
                raise ValueError("simulation config needs 'truth' or 'preset'")
            truth = preset(name)
        elif not isinstance(truth, ModelParameters):
            truth = ModelParameters.from_dict(truth)
        for key in ("T", "exposure"):
            if isinstance(doc.get(key), list):
                doc[key] = tuple(doc[key])
        if "categorical_levels" in doc:
            doc["categorical_levels"] = tuple(str(v) for v in doc["categorical_levels"])
        return cls(truth=truth, **doc)

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        return cls.from_dict(json.loads(text))


def _negative_dependence() -> ModelParameters:
    # a frequent/small-claims profile and a rare/large-claims profile
    dA = np.array([0.0, 0.2])
    dB = np.array([0.0, 0.1])
    # shapes chosen so 20,000 five-period policies pin every shape to a few percent
    freq = (ProfileFrequencyParams(dA, 3.0, 3.0), ProfileFrequencyParams(dA, 1.5, 3.0))
    sev = (ProfileSeverityParams(dB, 1.0, 4.0, 1500.0), ProfileSeverityParams(dB, 1.0, 3.0, 6000.0))
    tr = TransitionModel([0.6, 0.4], [[0.9, 0.1], [0.15, 0.85]])
    return ModelParameters(Representation.SPARSE, freq, sev, tr)


def _independent() -> ModelParameters:
    freq = (ProfileFrequencyParams(np.array([math.log(0.1), 0.2]), 2.0, 2.0),)
    sev = (ProfileSeverityParams(np.array([math.log(1000.0), 0.1]), 1.5e-3, 3.0, 2.0),)
    return ModelParameters(Representation.FULL, freq, sev, TransitionModel([1.0], [[1.0]]))


def _positive_dependence() -> ModelParameters:
    dA = np.array([0.0, 0.2])
    dB = np.array([0.0, 0.1])
    freq = (ProfileFrequencyParams(dA, 2.0, 20.0), ProfileFrequencyParams(dA, 2.0, 6.0))
    sev = (ProfileSeverityParams(dB, 1.0, 3.0, 2000.0), ProfileSeverityParams(dB, 1.0, 3.0, 4000.0))
    tr = TransitionModel([0.7, 0.3], [[0.9, 0.1], [0.2, 0.8]])
    return ModelParameters(Representation.SPARSE, freq, sev, tr)


PRESETS = {
    "negative_dependence": _negative_dependence,
    "positive_dependence": _positive_dependence,
    "independent": _independent,
}


def preset(name: str) -> ModelParameters:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def simulate_portfolio(config: SimConfig) -> tuple[Portfolio, np.ndarray]:
    """Draw a portfolio and the latent profile paths (one row per policy, -1 past the horizon).

    Each period draws its count from the NB marginal and its claim sizes
    i.i.d. from the GB2 marginal of the current profile.
    """
    rng = np.random.default_rng(config.seed)
    truth = config.truth
    tr = truth.transitions
    M = config.M
    T_lo, T_hi = config.T if isinstance(config.T, (tuple, list)) else (config.T, config.T)
    lengths = rng.integers(T_lo, T_hi + 1, size=M)
    Tmax = int(lengths.max())
    n_rows = int(lengths.sum())

    cont = rng.standard_normal((n_rows, config.n_continuous))
    levels = config.categorical_levels
    cat = rng.integers(0, len(levels), size=n_rows) if levels else None
    if isinstance(config.exposure, (tuple, list)):
        lo, hi = config.exposure
        expo = rng.uniform(lo, hi, size=n_rows)
    else:
        expo = np.full(n_rows, float(config.exposure))

    # latent chain
    paths = np.full((M, Tmax), -1, dtype=np.int64)
    cumW = np.cumsum(tr.W, axis=1)
    z = np.searchsorted(np.cumsum(tr.w0), rng.random(M), side="right").clip(max=tr.K - 1)
    paths[:, 0] = z
    for t in range(1, Tmax):
        z = np.sum(rng.random(M)[:, None] > cumW[z], axis=1).clip(max=tr.K - 1)
        paths[:, t] = z
    paths[np.arange(Tmax)[None, :] >= lengths[:, None]] = -1
    policy = np.repeat(np.arange(M), lengths)
    period = np.concatenate([np.arange(1, L + 1) for L in lengths])
    prof = paths[policy, period - 1]

    design = np.column_stack([np.ones(n_rows), cont])
    if levels:
        dummies = (cat[:, None] == np.arange(1, len(levels))[None, :]).astype(float)
        design = np.column_stack([design, dummies])
    st = truth.stacked()
    lam = np.exp(np.einsum("rp,rp->r", design, st["delta_A"][prof]))
    mu = st["phi"][prof] * np.exp(np.einsum("rp,rp->r", design, st["delta_B"][prof]))
    counts = sample_nb(rng, st["a_U"][prof], st["b_U"][prof], expo * lam)
    claim_row = np.repeat(np.arange(n_rows), counts)
    sizes = sample_gb2(rng, mu[claim_row], st["a_V"][prof][claim_row], st["b_V"][prof][claim_row],
                       st["phi"][prof][claim_row])

    width = max(6, len(str(M)))
    ids = [f"P{k + 1:0{width}d}" for k in range(M)]
    policy_rows = []
    for r in range(n_rows):
        row = {"policy_id": ids[policy[r]], "period": int(period[r]), "exposure": repr(float(expo[r]))}
        for k in range(config.n_continuous):
            row[f"x{k + 1}"] = repr(float(cont[r, k]))
        if levels:
            row["cat"] = levels[cat[r]]
        policy_rows.append(row)
    claim_rows = [{"policy_id": ids[policy[r]], "period": int(period[r]), "amount": repr(float(x))}
                  for r, x in zip(claim_row, sizes)]
    portfolio = build_portfolio(policy_rows, claim_rows, config.schema, {"simulated": True, "seed": config.seed})
    return portfolio, paths


def recovery_experiment(truth: ModelParameters, M: int, T, fit_config=None, seed: int = 0,
                        n_continuous: int | None = None) -> dict:
    """Simulate from ``truth``, fit, and compare the canonical-order estimates with the truth.

    The report holds only seed-determined quantities, so a rerun with the
    same inputs reproduces it exactly.
    """
    from .estimation import FitConfig, canonical_order, fit, penalized_loglik

    if n_continuous is None:
        n_continuous = truth.p_A - 1
    sim = SimConfig(truth=truth, M=M, T=T, n_continuous=n_continuous, seed=seed)
    portfolio, _ = simulate_portfolio(sim)
    if fit_config is None:
        fit_config = FitConfig(K=truth.K, representation=truth.representation, seed=seed)
    fitted = fit(portfolio, fit_config)
    truth_c = truth.permuted(canonical_order(portfolio, truth))
    truth_pen = penalized_loglik(portfolio, truth_c, fit_config.ridge_lambda, fit_config.ridge_all)
    st_f, st_t = fitted.params.stacked(), truth_c.stacked()
    rel = {k: (np.abs(st_f[k] - st_t[k]) / np.abs(st_t[k])).tolist() for k in ("a_U", "b_U", "a_V", "b_V")}
    coverage, z_scores = {}, {}
    ses = fitted.diagnostics.standard_errors or {}
    truth_values = _named_values(truth_c, portfolio)
    for name, entry in ses.items():
        if name in truth_values and entry["se"] is not None and entry["se"] > 0:
            z = (entry["estimate"] - truth_values[name]) / entry["se"]
            z_scores[name] = z
            coverage[name] = abs(z) <= 2.0
    return {
        "fitted_penalized_loglik": fitted.diagnostics.penalized_loglik,
        "truth_penalized_loglik": truth_pen,
        "fitted_at_least_truth": fitted.diagnostics.penalized_loglik >= truth_pen - 1e-6,
        "relative_errors": rel,
        "transition_max_abs_error": float(np.max(np.abs(fitted.params.transitions.W - truth_c.transitions.W))),
        "w0_max_abs_error": float(np.max(np.abs(fitted.params.transitions.w0 - truth_c.transitions.w0))),
        "coverage_2se": coverage,
        "z_scores": z_scores,
        "standard_errors": {k: v["se"] for k, v in ses.items()},
        "em_iterations": fitted.diagnostics.em_iterations,
        "fitted": fitted.params.to_dict(),
        "truth": truth_c.to_dict(),
    }


def _named_values(params: ModelParameters, portfolio: Portfolio) -> dict:
    """Natural-scale values keyed like the standard-error table."""
    from .estimation import Layout, _natural_scale

    layout = Layout(params.K, params.representation, params.p_A, params.p_B)
    tN, tX = layout.pack(params)
    theta = np.concatenate([tN, tX, layout.pack_transitions(params.transitions)])
    names = layout.names(portfolio.freq_covariate_names, portfolio.sev_covariate_names)
    values, _ = _natural_scale(layout, theta)
    return dict(zip(names, values.tolist()))

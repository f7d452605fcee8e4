"""Shared fixtures: random parameter sets, small simulated portfolios and a
brute-force likelihood oracle that enumerates every latent path."""

import itertools

import numpy as np
import pytest

from fsrating.distributions import (
    ModelParameters,
    ProfileFrequencyParams,
    ProfileSeverityParams,
    Representation,
    TransitionModel,
    gb2_log_pdf,
    nb_log_pmf,
)
from fsrating.simulate import SimConfig, preset, simulate_portfolio


def random_transitions(rng, K):
    w0 = rng.dirichlet(np.ones(K))
    W = rng.dirichlet(np.ones(K) * 2.0, size=K)
    return TransitionModel(w0, W)


def random_params(rng, K, representation="sparse", p=2):
    """Random admissible parameters whose covariates are ``[1, x1, ...]``."""
    rep = Representation(representation)
    tr = random_transitions(rng, K)
    if rep is Representation.FULL:
        freq, sev = [], []
        for _ in range(K):
            dA = np.concatenate([[np.log(rng.uniform(0.05, 0.6))], rng.normal(0, 0.2, p - 1)])
            a = rng.uniform(0.8, 4.0)
            freq.append(ProfileFrequencyParams(dA, a, a))
            dB = np.concatenate([[np.log(rng.uniform(200, 3000))], rng.normal(0, 0.2, p - 1)])
            aV = rng.uniform(2.0, 6.0)
            # keep the GB2 shape mu = phi * exp(B . delta_B) of order one
            sev.append(ProfileSeverityParams(dB, rng.uniform(0.5, 3.0) * np.exp(-dB[0]), aV, aV - 1.0))
        return ModelParameters(rep, freq, sev, tr)
    dA = np.concatenate([[0.0], rng.normal(0, 0.2, p - 1)])
    dB = np.concatenate([[0.0], rng.normal(0, 0.2, p - 1)])
    phi = rng.uniform(0.5, 3.0)
    freq = [ProfileFrequencyParams(dA, rng.uniform(0.8, 4.0), rng.uniform(2.0, 20.0)) for _ in range(K)]
    sev = [ProfileSeverityParams(dB, phi, rng.uniform(2.0, 6.0), rng.uniform(500.0, 6000.0)) for _ in range(K)]
    return ModelParameters(rep, freq, sev, tr)


def simulate(params, M, T, seed=0, exposure=(0.5, 1.0)):
    """Portfolio simulated from ``params`` with ``p_A - 1`` continuous covariates."""
    cfg = SimConfig(truth=params, M=M, T=T, n_continuous=params.p_A - 1, exposure=exposure, seed=seed)
    portfolio, _ = simulate_portfolio(cfg)
    return portfolio


def row_log_emissions(portfolio, params):
    """Per period and profile log emission computed straight from the kernels."""
    st = params.stacked()
    out = []
    for pp in portfolio.periods():
        lam = np.exp(st["delta_A"] @ pp.freq_covariates)
        mu = st["phi"] * np.exp(st["delta_B"] @ pp.sev_covariates)
        row = np.array([nb_log_pmf(pp.claim_count, st["a_U"][j], st["b_U"][j], pp.exposure * lam[j])
                        for j in range(params.K)])
        for x in pp.claim_sizes:
            row = row + np.array([gb2_log_pdf(x, mu[j], st["a_V"][j], st["b_V"][j], st["phi"][j])
                                  for j in range(params.K)])
        out.append(row)
    return np.array(out)


def enumerate_paths(log_em, w0, W):
    """Log-probabilities of all ``K**T`` paths of one policy (paths, log joint)."""
    T, K = log_em.shape
    paths = list(itertools.product(range(K), repeat=T))
    logs = []
    for z in paths:
        lp = np.log(w0[z[0]]) + log_em[0, z[0]]
        for t in range(1, T):
            lp += np.log(W[z[t - 1], z[t]]) + log_em[t, z[t]]
        logs.append(lp)
    return paths, np.array(logs)


def brute_force_loglik(portfolio, params):
    """Observed log-likelihood by enumeration over every latent path."""
    log_em = row_log_emissions(portfolio, params)
    tr = params.transitions
    total, start = 0.0, 0
    for seq in portfolio.policies:
        T = len(seq)
        _, logs = enumerate_paths(log_em[start:start + T], tr.w0, tr.W)
        m = logs.max()
        total += m + np.log(np.exp(logs - m).sum())
        start += T
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def negative_truth():
    return preset("negative_dependence")


@pytest.fixture(scope="session")
def independent_truth():
    return preset("independent")


@pytest.fixture(scope="session")
def small_negative_portfolio(negative_truth):
    return simulate(negative_truth, M=150, T=3, seed=11)

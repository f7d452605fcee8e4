"""Prior and posterior premia, credibility weights, scaling factors and portfolio pricing."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from fsrating.distributions import (
    ModelParameters,
    ProfileFrequencyParams,
    ProfileSeverityParams,
    TransitionModel,
    posterior_hyperparams,
)
from fsrating.hmm import posterior_assignment, prior_assignment
from fsrating.portfolio import PolicyPeriod, Portfolio, ValidationError
from fsrating.pricing import (
    credibility_form_premium,
    credibility_weights,
    posterior_premium,
    price_portfolio,
    prior_premium,
    scaling_factors,
    summarize_history,
)
from fsrating.simulate import preset
from fsrating.special import DomainError

from conftest import random_params, simulate

SINGLE = TransitionModel([1.0], [[1.0]])


def full_profile(log_freq, log_sev, a_U=2.0, a_V=3.0, p=1):
    dA = np.zeros(p)
    dA[0] = log_freq
    dB = np.zeros(p)
    dB[0] = log_sev
    return ProfileFrequencyParams(dA, a_U, a_U), ProfileSeverityParams(dB, 1.0, a_V, a_V - 1.0)


def worked_example():
    """One Full-convention profile; the history period has e*lambda = mu = 1, the next one exp(.) = 100."""
    freq = ProfileFrequencyParams([0.0, math.log(100.0)], 2.0, 2.0)
    sev = ProfileSeverityParams([0.0, 0.0], 1.0, 2.0, 1.0)
    params = ModelParameters("full", [freq], [sev], SINGLE)
    history = [(1.0, [1.0, 0.0], [1.0, 0.0], [2.0])]
    return params, history, np.array([1.0, 1.0]), np.array([1.0, 1.0])


def random_history(rng, params, T):
    pf = simulate(params, M=1, T=T + 1, seed=int(rng.integers(1 << 30)))
    seq = pf.policies[0]
    return list(seq[:T]), seq[T]


class TestPriorPremium:
    """Collective premium."""

    def test_two_profile_example(self):
        (f1, s1), (f2, s2) = full_profile(math.log(100.0), 0.0), full_profile(math.log(200.0), 0.0)
        params = ModelParameters("full", [f1, f2], [s1, s2], TransitionModel([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]]))
        pi, per, assign = prior_premium(params, [1.0], [1.0], t=1)
        assert pi == pytest.approx(150.0, rel=1e-14)
        assert_allclose(per, [100.0, 200.0], rtol=1e-14)
        assert_allclose(assign, [0.5, 0.5])

    def test_single_profile_formula(self):
        freq = ProfileFrequencyParams([0.1, -0.3], 2.0, 5.0)
        sev = ProfileSeverityParams([0.4, 0.2], 0.8, 3.5, 700.0)
        params = ModelParameters("sparse", [freq], [sev], SINGLE)
        A, B = np.array([1.0, 0.7]), np.array([1.0, -1.2])
        expected = math.exp(A @ freq.delta_A) * math.exp(B @ sev.delta_B) * (2.0 / 5.0) * (700.0 / 2.5)
        assert prior_premium(params, A, B)[0] == pytest.approx(expected, rel=1e-14)

    def test_identity_transition_is_time_invariant(self, rng):
        params = random_params(rng, 3, "sparse")
        params = ModelParameters(params.representation, params.frequency, params.severity,
                                 TransitionModel(params.transitions.w0, np.eye(3)))
        A = B = np.array([1.0, 0.3])
        values = [prior_premium(params, A, B, t)[0] for t in (1, 2, 7)]
        assert_allclose(values, values[0], rtol=1e-14)

    def test_time_dependence_follows_chain(self, rng):
        params = random_params(rng, 2, "sparse")
        A = B = np.array([1.0, -0.2])
        _, per, assign = prior_premium(params, A, B, t=4)
        assert_allclose(assign, prior_assignment(params.transitions, 4))
        assert prior_premium(params, A, B, t=4)[0] == pytest.approx(assign @ per, rel=1e-14)

    def test_finite_mean_required(self):
        """a_V <= 1 is rejected before any premium can be formed."""
        freq = ProfileFrequencyParams([0.0], 1.0, 1.0)
        with pytest.raises(DomainError):
            sev = ProfileSeverityParams([0.0], 1.0, 1.0, 1.0)
            prior_premium(ModelParameters("sparse", [freq], [sev], SINGLE), [1.0], [1.0])


class TestPosteriorPremium:
    """Bonus-Malus premium given earlier periods."""

    def test_empty_history_returns_prior(self, rng):
        params = random_params(rng, 3, "full")
        A = B = np.array([1.0, 0.4])
        out = posterior_premium(params, [], A, B)
        pi = prior_premium(params, A, B, 1)[0]
        assert out.posterior_premium == pi and out.prior_premium == pi
        assert out.bonus_malus_additive == 0.0 and out.bonus_malus_ratio == 1.0
        assert np.all(out.kappa_U == 1.0) and np.all(out.kappa_V == 1.0)

    def test_worked_example(self):
        params, history, A, B = worked_example()
        out = posterior_premium(params, history, A, B)
        assert out.prior_premium == pytest.approx(100.0, rel=1e-14)
        assert out.posterior_premium == pytest.approx(150.0, rel=1e-14)
        assert out.bonus_malus_additive == pytest.approx(50.0, rel=1e-12)
        assert out.bonus_malus_ratio == pytest.approx(1.5, rel=1e-14)
        assert out.period == 2

    def test_matches_hyperparameter_update(self, rng):
        """Per-profile posterior premium equals the conjugate-update posterior mean."""
        params = random_params(rng, 2, "sparse")
        hist, nxt = random_history(rng, params, 3)
        out = posterior_premium(params, hist, nxt.freq_covariates, nxt.sev_covariates)
        for j in range(2):
            f, s = params.frequency[j], params.severity[j]
            rec = [(pp.exposure * math.exp(pp.freq_covariates @ f.delta_A), pp.claim_count,
                    s.phi * math.exp(pp.sev_covariates @ s.delta_B), pp.total_loss) for pp in hist]
            post = posterior_hyperparams(f, s, rec)
            lam = math.exp(nxt.freq_covariates @ f.delta_A)
            scale = math.exp(nxt.sev_covariates @ s.delta_B)
            expected = lam * post.a_U / post.b_U * scale * post.b_V / (post.a_V - 1.0)
            assert out.profile_posterior_premia[j] == pytest.approx(expected, rel=1e-12)
        s = summarize_history(params, hist)
        assert_allclose(out.posterior_assignment, posterior_assignment(s.log_emissions, params, 4), rtol=1e-14)

    def test_claim_free_history_gives_bonus(self, rng):
        params = random_params(rng, 2, "full")
        hist = [(1.0, [1.0, 0.2], [1.0, 0.2], []), (0.5, [1.0, -0.1], [1.0, -0.1], [])]
        A = B = np.array([1.0, 0.0])
        out = posterior_premium(params, hist, A, B)
        freq_factor = out.profile_posterior_premia / out.profile_prior_premia
        assert np.all(freq_factor < 1.0)
        # without claims the severity hyperparameters are not updated
        assert np.all(out.kappa_V == 1.0)

    def test_breakdown_invariants(self, rng):
        for K in (1, 2, 3):
            params = random_params(rng, K, "sparse")
            hist, nxt = random_history(rng, params, 4)
            out = posterior_premium(params, hist, nxt.freq_covariates, nxt.sev_covariates, policy_id="x")
            assert out.prior_premium == pytest.approx(out.prior_assignment @ out.profile_prior_premia, rel=1e-14)
            assert out.posterior_premium == pytest.approx(out.posterior_assignment @ out.profile_posterior_premia,
                                                          rel=1e-14)
            assert np.all((out.kappa_U > 0) & (out.kappa_U <= 1))
            assert np.all((out.kappa_V > 0) & (out.kappa_V <= 1))
            assert out.posterior_premium >= 0 and out.policy_id == "x"

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 5), st.integers(1, 5))
    def test_more_claims_raise_frequency_factor(self, n, extra):
        """Per-profile frequency factor strictly increases with the claim count."""
        freq = ProfileFrequencyParams([0.0], 1.5, 3.0)
        sev = ProfileSeverityParams([0.0], 1.0, 3.0, 2.0)
        params = ModelParameters("sparse", [freq], [sev], SINGLE)

        def factor(count):
            hist = [(1.0, [1.0], [1.0], [100.0] * count)]
            out = posterior_premium(params, hist, [1.0], [1.0])
            # strip the severity factor, which also moves with the claims
            post_sev = (2.0 + 100.0 * count) / (3.0 + count - 1.0)
            return out.profile_posterior_premia[0] / post_sev

        assert factor(n + extra) > factor(n)

    def test_credibility_weights_vanish_with_experience(self):
        freq = ProfileFrequencyParams([0.0], 2.0, 2.0)
        sev = ProfileSeverityParams([0.0], 1.0, 3.0, 2.0)
        params = ModelParameters("full", [freq], [sev], SINGLE)
        last = None
        for T in (1, 10, 100, 1000):
            hist = [(1.0, [1.0], [1.0], [5.0])] * T
            kU, kV = credibility_weights(params, hist)
            if last is not None:
                assert kU[0] < last[0] and kV[0] < last[1]
            last = (kU[0], kV[0])
        assert last[0] < 0.002 and last[1] < 0.002


class TestCredibility:
    """Credibility weights and the credibility form of the posterior premium."""

    def test_empty_history(self, rng):
        kU, kV = credibility_weights(random_params(rng, 3, "sparse"), [])
        assert_allclose(kU, 1.0) and assert_allclose(kV, 1.0)

    def test_examples(self):
        """b_U = 1 with one unit of e*lambda gives 0.5; a_V = 2 with sum N mu = 3 gives 0.25."""
        freq = ProfileFrequencyParams([0.0], 1.0, 1.0)
        sev = ProfileSeverityParams([0.0], 1.0, 2.0, 1.0)
        params = ModelParameters("full", [freq], [sev], SINGLE)
        kU, kV = credibility_weights(params, [(1.0, [1.0], [1.0], [1.0, 2.0, 3.0])])
        assert kU[0] == pytest.approx(0.5, rel=1e-15)
        assert kV[0] == pytest.approx(0.25, rel=1e-15)

    def test_worked_example_identity(self):
        params, history, A, B = worked_example()
        assert credibility_form_premium(params, history, A, B) == pytest.approx(150.0, rel=1e-14)
        assert credibility_form_premium(params, [], A, B) == pytest.approx(100.0, rel=1e-14)

    @pytest.mark.parametrize("rep", ["full", "sparse"])
    def test_identity_on_random_instances(self, rng, rep):
        for _ in range(25):
            K = int(rng.integers(1, 4))
            params = random_params(rng, K, rep)
            hist, nxt = random_history(rng, params, int(rng.integers(1, 5)))
            direct = posterior_premium(params, hist, nxt.freq_covariates, nxt.sev_covariates).posterior_premium
            cred = credibility_form_premium(params, hist, nxt.freq_covariates, nxt.sev_covariates)
            assert cred == pytest.approx(direct, rel=1e-10)


class TestScalingFactors:
    """Two-profile frequency and severity ratios."""

    def test_identical_profiles(self):
        f, s = full_profile(0.3, 1.2, p=2)
        params = ModelParameters("full", [f, f], [s, s], TransitionModel([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]]))
        out = scaling_factors(params, [1.0, 0.4], [1.0, 0.4])
        assert (out.r_prior, out.s_prior) == pytest.approx((1.0, 1.0), rel=1e-15)

    def test_covariate_ratio(self):
        f1, s1 = full_profile(0.0, 0.0)
        f2, s2 = full_profile(math.log(2.0), 0.0)
        params = ModelParameters("full", [f1, f2], [s1, s2], TransitionModel([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]]))
        out = scaling_factors(params, [1.0], [1.0])
        assert out.r_prior == pytest.approx(2.0, rel=1e-14)
        assert out.s_prior == pytest.approx(1.0, rel=1e-14)

    def test_empty_history(self, rng):
        params = random_params(rng, 2, "sparse")
        out = scaling_factors(params, [1.0, 0.1], [1.0, 0.1])
        assert out.r_post == out.r_prior and out.s_post == out.s_prior
        assert min(out.r_prior, out.s_prior) > 0

    def test_posterior_ratios(self, rng):
        params = random_params(rng, 2, "sparse")
        hist, nxt = random_history(rng, params, 3)
        out = scaling_factors(params, nxt.freq_covariates, nxt.sev_covariates, hist)
        bm = posterior_premium(params, hist, nxt.freq_covariates, nxt.sev_covariates)
        ratio = bm.profile_posterior_premia[1] / bm.profile_posterior_premia[0]
        assert out.r_post * out.s_post == pytest.approx(ratio, rel=1e-12)

    @pytest.mark.parametrize("K", [1, 3])
    def test_other_profile_counts(self, rng, K):
        with pytest.raises(NotImplementedError):
            scaling_factors(random_params(rng, K, "sparse"), [1.0, 0.0], [1.0, 0.0])


class TestPricePortfolio:
    """Whole-portfolio pricing table."""

    def test_matches_per_policy_posterior(self, rng):
        params = random_params(rng, 2, "sparse")
        pf = simulate(params, M=15, T=(1, 4), seed=3)
        table = price_portfolio(pf, params)
        r = 0
        for seq in pf.policies:
            for t, pp in enumerate(seq):
                out = posterior_premium(params, seq[:t], pp.freq_covariates, pp.sev_covariates)
                row = table.iloc[r]
                assert row.prior_premium == pytest.approx(out.prior_premium, rel=1e-12)
                assert row.posterior_premium == pytest.approx(out.posterior_premium, rel=1e-10)
                assert row.kappa_U_0 == pytest.approx(out.kappa_U[0], rel=1e-12)
                assert row.assign_post_1 == pytest.approx(out.posterior_assignment[1], rel=1e-10, abs=1e-14)
                r += 1

    def test_single_period_policies(self, rng):
        params = random_params(rng, 3, "full")
        table = price_portfolio(simulate(params, M=30, T=1, seed=4), params)
        assert np.array_equal(table.posterior_premium, table.prior_premium)
        assert np.all(table.bm_additive == 0.0)

    def test_single_profile_assignments(self, rng):
        params = random_params(rng, 1, "sparse")
        table = price_portfolio(simulate(params, M=20, T=3, seed=5), params)
        assert np.all(table.assign_prior_0 == 1.0)
        assert_allclose(table.assign_post_0, 1.0, rtol=1e-15)

    def test_two_period_toy_by_hand(self):
        """One policy, two periods, one profile: the second premium is the conjugate update."""
        f = ProfileFrequencyParams([math.log(0.2)], 1.5, 1.5)
        s = ProfileSeverityParams([math.log(1000.0)], 1e-3, 3.0, 2.0)
        params = ModelParameters("full", [f], [s], SINGLE)
        seq = (PolicyPeriod("p", 1, 0.5, [1.0], [1.0], (400.0, 900.0)), PolicyPeriod("p", 2, 1.0, [1.0], [1.0]))
        table = price_portfolio(Portfolio((seq,), ("intercept",), ("intercept",)), params)
        freq_post = 0.2 * (1.5 + 2) / (1.5 + 0.5 * 0.2)
        sev_post = 1000.0 * (2.0 + 1e-3 * 1300.0) / (3.0 + 2 * 1e-3 * 1000.0 - 1.0)
        assert table.prior_premium[0] == pytest.approx(200.0, rel=1e-12)
        assert table.posterior_premium[1] == pytest.approx(freq_post * sev_post, rel=1e-12)

    def test_columns(self, rng):
        params = random_params(rng, 2, "sparse")
        table = price_portfolio(simulate(params, M=5, T=2, seed=6), params)
        head = ["policy_id", "period", "prior_premium", "posterior_premium", "bm_additive", "bm_ratio"]
        assert all(c in table.columns for c in head)
        for j in range(2):
            for stem in ("assign_prior", "assign_post", "premium_prior", "premium_post", "kappa_U", "kappa_V"):
                assert f"{stem}_{j}" in table.columns

    def test_dimension_mismatch(self, rng):
        params = random_params(rng, 2, "sparse", p=3)
        with pytest.raises(ValidationError):
            price_portfolio(simulate(random_params(rng, 2, "sparse", p=2), M=5, T=2, seed=7), params)


class TestCalibration:
    """Averaging posterior premia over simulated histories recovers the prior premium."""

    @staticmethod
    def standardised_gap(truth, M, period):
        pf = simulate(truth, M=M, T=period, seed=5, exposure=1.0)
        table = price_portfolio(pf, truth)
        d = (table.posterior_premium - table.prior_premium)[table.period == period].to_numpy()
        return d.mean() / (d.std(ddof=1) / math.sqrt(d.size))

    def test_single_profile_exact(self):
        """K = 1: the per-profile factors are unbiased, so the gap is pure Monte Carlo noise."""
        assert abs(self.standardised_gap(preset("independent"), 40_000, 3)) < 3.0

    @pytest.mark.xfail(strict=True, reason="with K >= 2 the assignment and the credibility factors both "
                                            "depend on the history, so their product is biased")
    def test_two_profiles(self):
        assert abs(self.standardised_gap(preset("positive_dependence"), 40_000, 3)) < 3.0

"""Forward-backward recursions against brute-force enumeration of latent paths."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fsrating.distributions import ModelParameters, TransitionModel
from fsrating.hmm import (
    DegenerateLikelihoodError,
    backward,
    emissions,
    filtered_assignments,
    forward,
    forward_backward,
    marginal_log_likelihood,
    posterior_assignment,
    prior_assignment,
    pseudo_marginal_log_likelihood,
    responsibilities,
)

from conftest import brute_force_loglik, enumerate_paths, random_params, row_log_emissions, simulate


def with_transitions(params, w0, W):
    return ModelParameters(params.representation, params.frequency, params.severity, TransitionModel(w0, W))


def path_posteriors(log_em, tr):
    """gamma (T, K) and xi (T, K, K) by enumeration of one policy's paths."""
    T, K = log_em.shape
    paths, logs = enumerate_paths(log_em, tr.w0, tr.W)
    p = np.exp(logs - logs.max())
    p /= p.sum()
    gamma = np.zeros((T, K))
    xi = np.zeros((T, K, K))
    for z, pz in zip(paths, p):
        for t in range(T):
            gamma[t, z[t]] += pz
            if t:
                xi[t, z[t - 1], z[t]] += pz
    return gamma, xi


class TestEmissions:
    """Per-period log emissions."""

    def test_matches_direct_kernel_sum(self, rng):
        params = random_params(rng, 3, "sparse")
        pf = simulate(params, M=20, T=3, seed=1)
        assert_allclose(emissions(pf, params), row_log_emissions(pf, params), rtol=1e-13)

    def test_no_claims_means_no_severity_term(self, rng):
        params = random_params(rng, 2, "full")
        pf = simulate(params, M=40, T=2, seed=2)
        arr = pf.arrays
        st = params.stacked()
        from fsrating.distributions import nb_log_pmf

        zero = arr.counts == 0
        lam = arr.exposure[:, None] * np.exp(arr.A @ st["delta_A"].T)
        expected = nb_log_pmf(0, st["a_U"][None, :], st["b_U"][None, :], lam[zero])
        assert_allclose(emissions(pf, params)[zero], expected, rtol=1e-14)

    def test_identical_profiles_give_identical_columns(self, rng):
        base = random_params(rng, 1, "full")
        params = ModelParameters("full", base.frequency * 2, base.severity * 2,
                                 TransitionModel([0.5, 0.5], [[0.7, 0.3], [0.4, 0.6]]))
        em = emissions(simulate(base, M=15, T=2, seed=3), params)
        assert np.array_equal(em[:, 0], em[:, 1])


class TestForward:
    """Scaled forward pass and the chain likelihood."""

    def test_single_period(self, rng):
        tr = TransitionModel([0.3, 0.7], [[0.5, 0.5], [0.1, 0.9]])
        log_em = np.log([[0.2, 0.05]])
        alpha, c = forward(log_em, tr)
        unnorm = tr.w0 * np.exp(log_em[0])
        assert_allclose(alpha[0], unnorm / unnorm.sum(), rtol=1e-15)
        assert c[0] == pytest.approx(np.log(unnorm.sum()), rel=1e-15)

    def test_single_profile_sums_emissions(self, rng):
        params = random_params(rng, 1, "full")
        pf = simulate(params, M=30, T=(1, 4), seed=4)
        assert marginal_log_likelihood(pf, params) == pytest.approx(emissions(pf, params).sum(), rel=1e-13)

    @pytest.mark.parametrize("K,T", [(2, 3), (3, 4), (2, 1)])
    def test_brute_force(self, rng, K, T):
        for rep in ("full", "sparse"):
            params = random_params(rng, K, rep)
            pf = simulate(params, M=5, T=T, seed=int(rng.integers(1 << 30)))
            ref = brute_force_loglik(pf, params)
            assert marginal_log_likelihood(pf, params) == pytest.approx(ref, rel=1e-10)

    def test_unbalanced_panel(self, rng):
        """Policies of different lengths are padded without changing the likelihood."""
        params = random_params(rng, 2, "sparse")
        pf = simulate(params, M=12, T=(1, 5), seed=9)
        assert len({len(p) for p in pf.policies}) > 1
        assert marginal_log_likelihood(pf, params) == pytest.approx(brute_force_loglik(pf, params), rel=1e-10)

    def test_pseudo_likelihood_differs_from_chain(self, rng):
        """The period-wise mixture ignores serial coupling, so it is a different number."""
        params = random_params(rng, 2, "sparse")
        params = with_transitions(params, [0.5, 0.5], [[0.95, 0.05], [0.05, 0.95]])
        pf = simulate(params, M=50, T=4, seed=10)
        assert pseudo_marginal_log_likelihood(pf, params) != pytest.approx(marginal_log_likelihood(pf, params))

    def test_degenerate(self):
        tr = TransitionModel([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DegenerateLikelihoodError):
            forward(np.array([[-np.inf, 0.0]]), tr)


class TestBackward:
    """Scaled backward pass."""

    def test_terminal_condition(self):
        tr = TransitionModel([0.5, 0.5], [[0.8, 0.2], [0.3, 0.7]])
        beta = backward(np.log([[0.1, 0.2], [0.3, 0.1], [0.5, 0.4]]), tr)
        assert_allclose(beta[-1], 1.0)

    def test_single_profile_constant(self):
        beta = backward(np.log([[0.1], [0.3], [0.5]]), TransitionModel([1.0], [[1.0]]))
        assert_allclose(beta, 1.0, rtol=1e-15)

    def test_proportional_to_future_probability(self, rng):
        """beta_hat[t, j] is P(future | Z_t = j) up to a factor that does not depend on j."""
        tr = TransitionModel([0.4, 0.6], [[0.7, 0.3], [0.2, 0.8]])
        log_em = np.log(rng.uniform(0.05, 1.0, size=(3, 2)))
        beta = backward(log_em, tr)
        for t in range(3):
            future = np.zeros(2)
            for j in range(2):
                tail = log_em[t + 1:]
                if len(tail) == 0:
                    future[j] = 1.0
                    continue
                start = TransitionModel(tr.W[j], tr.W)
                _, logs = enumerate_paths(tail, start.w0, start.W)
                future[j] = np.exp(logs).sum()
            ratio = beta[t] / future
            assert ratio[0] == pytest.approx(ratio[1], rel=1e-12)


class TestResponsibilities:
    """Smoothed gamma and xi."""

    def test_single_profile(self):
        tr = TransitionModel([1.0], [[1.0]])
        log_em = np.log([[0.1], [0.2]])
        alpha, _ = forward(log_em, tr)
        gamma, xi = responsibilities(alpha, backward(log_em, tr), log_em, tr)
        assert_allclose(gamma, 1.0)
        assert_allclose(xi[1], 1.0)

    def test_symmetric_case_uniform(self):
        K = 3
        tr = TransitionModel(np.full(K, 1 / K), np.full((K, K), 1 / K))
        log_em = np.log(np.full((4, K), 0.3))
        alpha, _ = forward(log_em, tr)
        gamma, _ = responsibilities(alpha, backward(log_em, tr), log_em, tr)
        assert_allclose(gamma, 1 / K, rtol=1e-14)

    @pytest.mark.parametrize("K,T", [(2, 2), (2, 3), (3, 3)])
    def test_brute_force(self, rng, K, T):
        params = random_params(rng, K, "sparse")
        pf = simulate(params, M=6, T=T, seed=int(rng.integers(1 << 30)))
        post = forward_backward(pf, params)
        log_em = row_log_emissions(pf, params)
        start = 0
        for seq in pf.policies:
            g, x = path_posteriors(log_em[start:start + T], params.transitions)
            assert_allclose(post.gamma[start:start + T], g, rtol=1e-10, atol=1e-14)
            assert_allclose(post.xi[start + 1:start + T], x[1:], rtol=1e-10, atol=1e-14)
            start += T

    def test_consistency(self, rng):
        """gamma rows sum to one; xi marginals reproduce gamma."""
        params = random_params(rng, 3, "full")
        pf = simulate(params, M=40, T=(1, 5), seed=12)
        post = forward_backward(pf, params)
        arr = pf.arrays
        assert_allclose(post.gamma.sum(axis=1), 1.0, rtol=1e-13)
        later = arr.period > 1
        assert_allclose(post.xi[later].sum(axis=1), post.gamma[later], atol=1e-13)
        prev = np.flatnonzero(later) - 1
        assert_allclose(post.xi[later].sum(axis=2), post.gamma[prev], atol=1e-13)
        assert np.all(post.xi[~later] == 0)


class TestAssignments:
    """Prior (marginal) and filtered profile probabilities."""

    def test_prior_examples(self):
        tr = TransitionModel([1.0, 0.0], [[0.9, 0.1], [0.2, 0.8]])
        assert_allclose(prior_assignment(tr, 1), [1.0, 0.0])
        assert_allclose(prior_assignment(tr, 3), [0.83, 0.17], rtol=1e-14)
        eye = TransitionModel([0.3, 0.7], np.eye(2))
        assert_allclose(prior_assignment(eye, 7), [0.3, 0.7])
        with pytest.raises(ValueError):
            prior_assignment(tr, 0)

    def test_posterior_first_period(self):
        tr = TransitionModel([0.25, 0.75], [[0.9, 0.1], [0.2, 0.8]])
        assert_allclose(posterior_assignment(np.zeros((0, 2)), tr, 1), tr.w0)

    def test_identical_rows_ignore_history(self):
        tr = TransitionModel([0.5, 0.5], [[0.3, 0.7], [0.3, 0.7]])
        out = posterior_assignment(np.log([[0.9, 0.01], [0.8, 0.02]]), tr, 3)
        assert_allclose(out, [0.3, 0.7], rtol=1e-14)

    def test_bayes_rule_by_hand(self):
        """P(Z_2 = k | obs_1) = sum_h w0_h f_h W_hk / sum_h w0_h f_h."""
        tr = TransitionModel([0.6, 0.4], [[0.9, 0.1], [0.3, 0.7]])
        f = np.array([0.02, 0.2])
        expected = (tr.w0 * f) @ tr.W / np.sum(tr.w0 * f)
        assert_allclose(posterior_assignment(np.log(f)[None], tr, 2), expected, rtol=1e-14)

    def test_filtered_matches_per_policy(self, rng):
        params = random_params(rng, 2, "sparse")
        pf = simulate(params, M=25, T=(1, 4), seed=13)
        out = filtered_assignments(pf, params)
        log_em = emissions(pf, params)
        arr = pf.arrays
        for r in range(arr.n_rows):
            t = int(arr.period[r])
            hist = log_em[r - t + 1:r]
            assert_allclose(out[r], posterior_assignment(hist, params, t), rtol=1e-12)

import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nctrl import arhmm as H
from nctrl.autodiff import Tape
from nctrl.autodiff.gradcheck import max_grad_error


def random_instance(rng, C, T):
    log_pi = np.log(rng.dirichlet(np.ones(C)))
    log_A = np.log(rng.dirichlet(np.ones(C), size=C))
    log_B = rng.normal(scale=2.0, size=(T, C))
    return log_pi, log_A, log_B


def enumerate_paths(log_pi, log_A, log_B):
    T, C = log_B.shape
    scores = {}
    for path in itertools.product(range(C), repeat=T):
        s = log_pi[path[0]] + log_B[0, path[0]]
        for t in range(1, T):
            s += log_A[path[t - 1], path[t]] + log_B[t, path[t]]
        scores[path] = s
    vals = np.array(list(scores.values()))
    loglik = np.logaddexp.reduce(vals)
    gamma = np.zeros((T, C))
    for path, s in scores.items():
        gamma[np.arange(T), path] += np.exp(s - loglik)
    best = max(scores.values())
    # ties resolved towards the lexicographically smallest path
    viterbi = min(p for p, s in scores.items() if s == best)
    return loglik, gamma, np.array(viterbi)


def test_forward_backward_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(60):
        C, T = rng.integers(1, 4), rng.integers(1, 7)
        inst = random_instance(rng, C, T)
        loglik, gamma, path = enumerate_paths(*inst)
        post = H.forward_backward_log(*inst)
        assert_allclose(post.log_likelihood, loglik, atol=1e-8)
        assert_allclose(post.gamma, gamma, atol=1e-8)
        assert_array_equal(H.viterbi_log(*inst), path)


def test_xi_marginalizes_to_gamma(rng):
    post = H.forward_backward_log(*random_instance(rng, 3, 8))
    assert_allclose(post.xi.sum(-1), post.gamma[:-1], atol=1e-12)
    assert_allclose(post.xi.sum(-2), post.gamma[1:], atol=1e-12)
    assert_allclose(post.gamma.sum(-1), 1.0, atol=1e-12)


def test_batched_equals_looped(rng):
    log_pi, log_A, _ = random_instance(rng, 3, 1)
    log_B = rng.normal(size=(4, 6, 3))
    post = H.forward_backward_log(log_pi, log_A, log_B)
    for b in range(4):
        one = H.forward_backward_log(log_pi, log_A, log_B[b])
        assert_allclose(post.log_likelihood[b], one.log_likelihood)
        assert_allclose(post.gamma[b], one.gamma)


def test_viterbi_ties_choose_smallest_index():
    C, T = 3, 4
    log_pi = np.full(C, -np.log(C))
    log_A = np.full((C, C), -np.log(C))
    assert_array_equal(H.viterbi_log(log_pi, log_A, np.zeros((T, C))), np.zeros(T))


def test_single_step_sequence():
    log_pi = np.log([0.3, 0.7])
    log_B = np.array([[0.0, -5.0]])
    post = H.forward_backward_log(log_pi, np.log(np.full((2, 2), 0.5)), log_B)
    assert_allclose(post.log_likelihood, np.logaddexp(np.log(0.3), np.log(0.7) - 5.0))


def test_nan_emission_names_step_and_regime():
    log_B = np.zeros((5, 2))
    log_B[3, 1] = np.nan
    with pytest.raises(H.ArhmmError, match=r"t=3.*c=1"):
        H.forward_backward_log(np.log([0.5, 0.5]), np.log(np.full((2, 2), 0.5)), log_B)


def test_custom_op_gradients_are_posterior_counts(rng):
    log_pi, log_A, log_B = random_instance(rng, 3, 5)

    def build(P):
        return H.hmm_log_likelihood(P["pi"], P["A"], P["B"])

    rel, abs_ = max_grad_error(build, {"pi": log_pi, "A": log_A, "B": log_B})
    assert rel <= 1e-6 and abs_ <= 1e-8


def tiny_model(rng, C=2, m=2):
    model = H.Arhmm(m, C, hidden=(5, 5))
    params = model.init(rng)
    params["hmm.logpi"] = rng.normal(size=C)
    params["hmm.mu0"] = rng.normal(size=(C, m))
    return model, params


def test_hmm_loss_gradcheck(rng):
    model, params = tiny_model(rng)
    x = rng.normal(size=(4, 2))
    rel, abs_ = max_grad_error(lambda P: H.hmm_loss(model, P, x), params)
    assert rel <= 1e-4 and abs_ <= 1e-7


def test_window_loss_gradcheck(rng):
    model, params = tiny_model(rng)
    windows = rng.normal(size=(3, 5, 2))
    rel, abs_ = max_grad_error(lambda P: H.window_hmm_loss(model, P, windows), params)
    assert rel <= 1e-4 and abs_ <= 1e-7


def test_emission_log_prob_is_gaussian(rng):
    model, params = tiny_model(rng)
    x0, x1 = rng.normal(size=2), rng.normal(size=2)
    out = model.net.numpy(params, x0[None, None])[:, 0]
    mean, log_var = out[1, :2], out[1, 2:]
    want = np.sum(-0.5 * (np.log(2 * np.pi) + log_var + (x1 - mean) ** 2 / np.exp(log_var)))
    assert_allclose(H.emission_log_prob(model, params, x0, x1, 1), want)
    want0 = np.sum(-0.5 * (np.log(2 * np.pi) + params["hmm.logvar0"][0]
                           + (x0 - params["hmm.mu0"][0]) ** 2 / np.exp(params["hmm.logvar0"][0])))
    assert_allclose(H.emission_log_prob(model, params, None, x0, 0), want0)


def test_permutation_equivariance(rng):
    model, params = tiny_model(rng, C=3)
    params["hmm.logA"] = rng.normal(size=(3, 3))
    x = rng.normal(size=(7, 2))
    perm = np.array([2, 0, 1])
    a = H.forward_backward(model, params, x)
    b = H.forward_backward(model, H.permute(params, perm), x)
    assert_allclose(b.log_likelihood, a.log_likelihood)
    assert_allclose(b.gamma, a.gamma[:, perm])
    assert_allclose(H.transition_matrix(H.permute(params, perm)), H.transition_matrix(params)[np.ix_(perm, perm)])


def test_transition_matrix_rows_sum_to_one(rng):
    model, params = tiny_model(rng, C=4)
    params["hmm.logA"] = rng.normal(size=(4, 4)) * 3
    assert_allclose(H.transition_matrix(params).sum(1), 1.0)


def test_linear_fit_beats_single_regime(small_dataset):
    x = (small_dataset.x - small_dataset.x.mean(0)) / small_dataset.x.std(0)
    C = small_dataset.n_regimes
    true = H.fit_linear_arhmm(x, np.eye(C)[small_dataset.c[1:]], iters=30)
    single = H.fit_linear_arhmm(x, np.ones((len(x) - 1, 1)), iters=1)
    assert true.log_likelihood > single.log_likelihood


def test_warm_start_recovers_well_separated_regimes():
    rng = np.random.default_rng(3)
    C, T, m = 2, 3000, 2
    c = np.repeat(rng.integers(0, C, T // 50), 50)
    x = np.zeros((T, m))
    A = np.array([[[0.5, 0.3], [-0.3, 0.5]], [[-0.6, 0.0], [0.2, 0.4]]])
    offsets = np.array([[1.0, 0.0], [-1.0, 0.5]])
    for t in range(1, T):
        x[t] = x[t - 1] @ A[c[t]] + offsets[c[t]] + 0.1 * rng.normal(size=m)
    fit = H.linear_warm_start(x, C, seed=0, random_starts=4)
    labels = fit.gamma.argmax(1)
    acc = max(np.mean(labels == c[1:]), np.mean(labels == 1 - c[1:]))
    assert acc > 0.98
    truth = H.fit_linear_arhmm(x, np.eye(C)[c[1:]])
    assert fit.log_likelihood >= truth.log_likelihood - 1.0

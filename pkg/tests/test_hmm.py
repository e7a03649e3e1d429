import numpy as np
import pytest

from oracles import best_path_bruteforce, total_prob_bruteforce
from utipipe import hmm
from utipipe.diarizer import ErgodicHmm
from utipipe.errors import AlignmentFailure


def random_ergodic(rng, n_tokens, n_states, dim=2):
    P = n_tokens * n_states
    gmms = [hmm.DiagGmm.single(rng.normal(size=dim), rng.uniform(0.5, 2, dim)) for _ in range(P)]
    pdfs = hmm.GmmPdfSet(gmms, rng.uniform(0.2, 0.9, P))
    inter = rng.dirichlet(np.ones(n_tokens), n_tokens)
    priors = rng.dirichlet(np.ones(n_tokens))
    return ErgodicHmm([f"t{i}" for i in range(n_tokens)], n_states, pdfs, inter, priors)


def test_gmm_weights_normalised():
    with pytest.raises(Exception):
        hmm.DiagGmm(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1)))


def test_gmm_loglik_matches_scipy():
    from scipy.stats import multivariate_normal
    g = hmm.DiagGmm(np.array([0.3, 0.7]), np.array([[0.0, 1.0], [2.0, -1.0]]),
                    np.array([[1.0, 0.5], [2.0, 1.5]]))
    X = np.random.default_rng(0).normal(size=(6, 2))
    want = np.log(0.3 * multivariate_normal([0, 1], np.diag([1, 0.5])).pdf(X)
                  + 0.7 * multivariate_normal([2, -1], np.diag([2, 1.5])).pdf(X))
    np.testing.assert_allclose(g.log_likelihood(X), want, rtol=1e-12)


def test_decoding_graph_rows_sum_to_one():
    m = random_ergodic(np.random.default_rng(1), 3, 2)
    g = m.decoding_graph()
    np.testing.assert_allclose(g.trans.sum(axis=1), 1.0, atol=1e-12)
    # ergodic: every token reachable from every other
    reach = np.linalg.matrix_power((g.trans > 0).astype(int) + np.eye(6, dtype=int), 6) > 0
    assert reach.all()


@pytest.mark.parametrize("seed", range(40))
def test_viterbi_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    m = random_ergodic(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)))
    T = int(rng.integers(1, 9))
    X = rng.normal(size=(T, 2)) * 2
    g = m.decoding_graph()
    ll = m.pdfs.score(X)
    path, score = hmm.viterbi(g, ll)
    best, arg = best_path_bruteforce(g, ll)
    assert tuple(path) == arg
    assert score == pytest.approx(best, abs=1e-9)
    assert hmm.path_log_prob(g, ll, path) == pytest.approx(score, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_forward_matches_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    m = random_ergodic(rng, 2, 2)
    X = rng.normal(size=(int(rng.integers(1, 7)), 2))
    g = m.decoding_graph()
    ll = m.pdfs.score(X)
    logp, gamma, _ = hmm.forward_backward(g, ll)
    assert logp == pytest.approx(total_prob_bruteforce(g, ll), abs=1e-9)
    np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-9)


def test_chain_graph_with_optional_slots():
    u = lambda lab, *p: hmm.Unit(lab, p)
    slots = [([u("sil", 0)], True), ([u("a", 1, 2)], False), ([u("sil", 0)], True)]
    g = hmm.build_chain_graph(slots, np.full(3, 0.5))
    assert g.num_states == 4
    assert hmm.min_path_length(g) == 2
    np.testing.assert_allclose(g.trans.sum(axis=1) + g.final, 1.0)
    ll = np.zeros((1, 4))
    with pytest.raises(AlignmentFailure):
        hmm.viterbi(g, ll)


def test_split_doubles_components():
    g = hmm.DiagGmm.single(np.zeros(2), np.ones(2))
    s = hmm.split_gmm(g, 4)
    assert s.num_components == 2
    np.testing.assert_allclose(s.weights.sum(), 1.0)


def test_embedded_training_monotone():
    rng = np.random.default_rng(3)
    u = lambda lab, *p: hmm.Unit(lab, p)
    feats = []
    for _ in range(5):
        n1, n2 = rng.integers(5, 15, 2)
        feats.append(np.concatenate([rng.normal(-2, 1, (n1, 2)), rng.normal(3, 0.5, (n2, 2))]))
    X = np.concatenate(feats)
    pdfs = hmm.GmmPdfSet([hmm.DiagGmm.single(X.mean(0), X.var(0)) for _ in range(4)],
                         np.full(4, 0.5))
    graphs = lambda p: [hmm.build_chain_graph([([u("a", 0, 1)], False), ([u("b", 2, 3)], False)],
                                              p.loop_prob) for _ in feats]
    res = hmm.train_embedded(pdfs, feats, graphs, 8, 1e-3 * X.var(0), max_components=2)
    h = np.array(res.history)
    assert np.all(np.diff(h) >= -1e-6 * np.abs(h[:-1]))
    means = [res.pdfs.gmms[i].weights @ res.pdfs.gmms[i].means for i in range(4)]
    assert means[0][0] < 0 < means[3][0]

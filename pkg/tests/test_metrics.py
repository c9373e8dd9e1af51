import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from jacolip.metrics import (accuracy, auc, cosine_similarity, err_at_k, jaccard_similarity, metric_report,
                             ndcg_at_k, rank_metrics, top_k)

from oracles import brute_max_err, brute_ndcg, clip_rel, direct_err, err_of, pair_count_auc


def _random_sim(rng, n):
    m = rng.uniform(-0.3, 1.0, size=(n, n))
    return (m + m.T) / 2


def test_cosine_examples():
    s = cosine_similarity(np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [1.0, 1.0], [0.0, 0.0]])).values
    assert s[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert s[0, 2] == 0.0
    assert s[0, 3] == pytest.approx(1 / np.sqrt(2), rel=1e-15)
    assert s[4, 4] == 1.0 and not np.any(s[4, :4]) and not np.any(s[:4, 4])
    assert np.all(np.diag(s) == 1.0)


def test_jaccard_examples():
    # N(0) = {1, 2}, N(3) = {2, 4}, N(1) = {0}, N(4) = {3}
    edges = [(0, 1), (0, 2), (3, 2), (3, 4)]
    a = sp.lil_matrix((6, 6))
    for u, v in edges:
        a[u, v] = a[v, u] = 1
    s = jaccard_similarity(a.tocsr()).values
    assert s[0, 3] == pytest.approx(1 / 3, rel=1e-15)
    twins = jaccard_similarity(sp.csr_matrix([[0.0, 1, 1], [1, 0, 0], [1, 0, 0]])).values
    assert twins[1, 2] == 1.0
    assert s[1, 4] == 0.0
    iso = jaccard_similarity(sp.csr_matrix((2, 2))).values
    assert iso[0, 1] == 0.0 and iso[0, 0] == 0.0
    assert np.array_equal(s, s.T)


def test_similarity_invariants():
    rng = np.random.default_rng(0)
    s = cosine_similarity(rng.normal(size=(20, 5))).values
    assert np.max(np.abs(s - s.T)) <= 1e-12
    assert s.min() >= -1 and s.max() <= 1


def test_top_k_ties_lower_index_first():
    scores = np.array([[0.5, 0.9, 0.5, 0.9, 0.1]])
    assert top_k(scores, 3).tolist() == [[1, 3, 0]]
    assert top_k(scores, 5).tolist() == [[1, 3, 0, 2, 4]]


def test_ndcg_trivial_cases():
    rng = np.random.default_rng(1)
    s = _random_sim(rng, 8)
    assert np.array_equal(ndcg_at_k(s, s, 3), np.ones(8))
    flat = np.full((8, 8), 0.4)
    assert np.allclose(ndcg_at_k(flat, s, 3), 1.0, rtol=0, atol=1e-15)
    assert np.array_equal(ndcg_at_k(np.zeros((8, 8)), s, 3), np.ones(8))
    with pytest.raises(ValueError):
        ndcg_at_k(s, s, 8)
    with pytest.raises(ValueError):
        ndcg_at_k(s, s, 0)
    with pytest.raises(ValueError):
        ndcg_at_k(s, s[:7, :7], 2)


def test_err_trivial_cases():
    rng = np.random.default_rng(2)
    s = _random_sim(rng, 8)
    assert np.array_equal(err_at_k(s, s, 3), np.ones(8))
    assert np.array_equal(err_at_k(np.zeros((8, 8)), s, 3), np.ones(8))
    with pytest.raises(ValueError):
        err_at_k(s, s, 9)


def test_metrics_match_brute_force_n5_k2():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s_g, s_y = _random_sim(rng, 5), _random_sim(rng, 5)
        assert np.array_equal(ndcg_at_k(s_g, s_y, 2), brute_ndcg(s_g, s_y, 2))
        assert np.array_equal(err_at_k(s_g, s_y, 2), direct_err(s_g, s_y, 2))


def test_ideal_err_is_the_best_ordering():
    rng = np.random.default_rng(4)
    for _ in range(20):
        s_g = _random_sim(rng, 5)
        ideal = []
        for i in range(5):
            cands = [j for j in range(5) if j != i]
            rel_max = max(clip_rel(s_g[i, j]) for j in cands)
            ideal.append(err_of(sorted(cands, key=lambda j: -clip_rel(s_g[i, j])), s_g[i], 2, rel_max))
        assert np.allclose(ideal, brute_max_err(s_g, 2), rtol=1e-15, atol=0)


def test_report_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    s_g, s_y = _random_sim(rng, 7), _random_sim(rng, 7)
    rep = rank_metrics(s_g, s_y, 3)
    assert rep.mean_ndcg == pytest.approx(np.mean(rep.ndcg), rel=1e-15)
    path = tmp_path / "pn.csv"
    rep.write_per_node(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "node,ndcg@3,err@3" and len(lines) == 8
    body = metric_report(rep, "acc", 0.5, path)
    assert set(body) == {"ndcg@3", "err@3", "acc", "k", "per_node_path"}


def test_accuracy_examples():
    labels = np.array([0, 1, 2, 1])
    assert accuracy(np.eye(3)[labels], labels) == 1.0
    assert accuracy(np.eye(3)[(labels + 1) % 3], labels) == 0.0
    y = np.eye(3)[labels]
    y[3] = [1, 0, 0]
    assert accuracy(y, labels) == 0.75
    assert accuracy(np.zeros((4, 3)), np.zeros(4, int)) == 1.0  # ties go to class 0
    with pytest.raises(ValueError):
        accuracy(y, labels, np.zeros(4, bool))


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.3] * 4, [1, 0, 1, 0]) == 0.5
    assert auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


sims = st.integers(4, 8).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, (n, n), elements=st.floats(-1, 1, width=32)),
        arrays(np.float64, (n, n), elements=st.floats(-1, 1, width=32)),
        st.integers(1, n - 1),
    )
)


@settings(max_examples=150, deadline=None)
@given(sims)
def test_metric_range(case):
    s_g, s_y, k = case
    for f in (ndcg_at_k, err_at_k):
        v = f(s_g, s_y, k)
        assert np.all(v >= 0) and np.all(v <= 1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(sims, st.randoms())
def test_relabeling_invariance(case, rnd):
    s_g, s_y, k = case
    n = s_g.shape[0]
    perm = np.array(rnd.sample(range(n), n))
    # break score ties so the ranking does not depend on index order
    s_y = s_y + np.arange(n * n).reshape(n, n) * 1e-9
    s_y = s_y[np.argsort(perm)][:, np.argsort(perm)][perm][:, perm]
    base = ndcg_at_k(s_g, s_y, k)
    moved = ndcg_at_k(s_g[perm][:, perm], s_y[perm][:, perm], k)
    assert np.allclose(moved, base[perm], rtol=0, atol=1e-12)
    assert abs(moved.mean() - base.mean()) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n,), elements=st.floats(0, 1, width=32)), st.integers(1, n - 2))))
def test_monotone_degradation(case):
    rel, k = case
    n = rel.size + 1  # node 0 ranks nodes 1..n-1
    s_g = np.zeros((n, n))
    s_g[0, 1:] = rel
    ideal = [1 + j for j in sorted(range(rel.size), key=lambda j: -rel[j])]
    swapped = list(ideal)
    swapped[0], swapped[k] = swapped[k], swapped[0]

    def scores(order):
        m = np.zeros((n, n))
        for p, j in enumerate(order):
            m[0, j] = n - p
        return m
    a = ndcg_at_k(s_g, scores(ideal), k)[0]
    b = ndcg_at_k(s_g, scores(swapped), k)[0]
    if rel[ideal[0] - 1] != rel[ideal[k] - 1]:
        assert b < a
    else:
        assert b == a


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=2, max_size=30), st.randoms())
def test_auc_matches_pairs_and_is_rank_invariant(ints, rnd):
    scores = np.array(ints) / 100.0
    labels = np.array([rnd.random() < 0.5 for _ in scores])
    labels[0], labels[-1] = True, False
    value = auc(scores, labels)
    assert value == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)
    assert auc(np.exp(scores) * 3 + 1, labels) == value

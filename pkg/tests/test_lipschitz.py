import json
import logging

import numpy as np
import pytest
import scipy.sparse as sp

from jacolip.grad import NodeJacobianSet, node_jacobians
from jacolip.graph import normalize_adjacency
from jacolip.linalg import row_l2_norms
from jacolip.lipschitz import (empirical_lip, empirical_lip_full, global_lip, layerwise_bound, lb_matrix,
                               lemma1_check, lip_report, probe_ratios)
from jacolip.models import Model, forward, sgc_shape

from conftest import random_graph, random_model


def _sgc(w, power=0):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return Model("SGC", sgc_shape(w.shape[0], w.shape[1], power).layers, (w,), power)


def test_lb_matrix_examples():
    zero = NodeJacobianSet.from_blocks(np.zeros((3, 2, 4)))
    assert np.array_equal(lb_matrix(zero), np.zeros((3, 2)))
    j = NodeJacobianSet.from_blocks(np.array([[[3.0, 4.0], [0.0, 0.0]]]))
    assert np.array_equal(lb_matrix(j), [[5.0, 0.0]])
    blocks = np.random.default_rng(0).normal(size=(6, 3, 5))
    expected = np.stack([row_l2_norms(b) for b in blocks])
    assert np.array_equal(lb_matrix(NodeJacobianSet.from_blocks(blocks)), expected)
    with pytest.raises(ValueError):
        lb_matrix(NodeJacobianSet.from_blocks(blocks), n_nodes=7)


def test_factored_lb_rows_match_explicit_blocks():
    g = random_graph(30, 40, seed=1)
    m = random_model("GCN", 40, 3, seed=1)
    _, cache = forward(m, normalize_adjacency(g), g.features)
    jac = node_jacobians(m, cache)
    explicit = NodeJacobianSet.from_blocks(jac.blocks())
    assert np.allclose(jac.lb_rows(chunk=7), explicit.lb_rows(), rtol=1e-12, atol=1e-15)


def test_global_lip_examples():
    assert global_lip(np.array([[2.0]])) == (2.0, 0)
    assert global_lip(np.array([[1.0, 1.0], [5.0, 0.0]])) == (5.0, 1)
    assert global_lip(np.array([[3.0, 4.0], [0.0, 5.0], [5.0, 0.0]])) == (5.0, 0)
    for f in (1, 3, 7):
        rep = lip_report(_sgc(np.eye(f)), sp.identity(4, format="csr"), np.ones((4, f)))
        assert rep.global_lip == pytest.approx(np.sqrt(f), rel=1e-15)


def test_global_lip_equals_max_block_frobenius():
    for seed in range(5):
        g = random_graph(9, 4, seed=seed)
        m = random_model("GCN", 4, 3, seed=seed)
        _, cache = forward(m, normalize_adjacency(g), g.features)
        jac = node_jacobians(m, cache)
        value, node = global_lip(lb_matrix(jac))
        fro = [np.linalg.norm(jac.block(i)) for i in range(9)]
        assert abs(value - max(fro)) <= 1e-12 * max(fro)
        assert node == int(np.argmax(fro))


def test_layerwise_bound_examples(small_graph, small_a_hat):
    m = _sgc(np.eye(2))
    _, cache = forward(m, sp.identity(3, format="csr"), np.ones((3, 2)))
    assert layerwise_bound(m, cache) == 2.0
    gcn = random_model("GCN", 4, 3, seed=0)
    for l in range(2):
        ws = list(gcn.weights)
        ws[l] = np.zeros_like(ws[l])
        z = gcn.with_weights(ws)
        _, cache = forward(z, small_a_hat, small_graph.features)
        assert layerwise_bound(z, cache) == 0.0


def test_layerwise_bound_formula(small_graph, small_a_hat):
    m = random_model("GCN", 4, 3, seed=2)
    _, cache = forward(m, small_a_hat, small_graph.features)
    diag = small_a_hat.matrix.diagonal()
    w1, w2 = m.weights
    per_node = [
        5 * abs(diag[j]) * np.linalg.norm(w1, axis=0).max() * 3 * abs(diag[j]) * np.linalg.norm(w2, axis=0).max()
        for j in range(10)
    ]
    assert layerwise_bound(m, cache) == pytest.approx(max(per_node), rel=1e-12)


def test_report_json_keys(small_graph, small_a_hat):
    m = random_model("GCN", 4, 3, seed=0)
    rep = lip_report(m, small_a_hat, small_graph.features, probes=5, seed=1)
    body = json.loads(rep.to_json())
    assert set(body) == {"global_lip", "layerwise_bound", "argmax_node", "empirical_lower", "lb_rows"}
    assert body["lb_rows"] == 10
    assert body["empirical_lower"] <= body["global_lip"]
    assert lip_report(m, small_a_hat, small_graph.features).empirical_lower is None


def test_empirical_examples():
    x = np.random.default_rng(0).normal(size=(5, 3))
    res = probe_ratios(_sgc(np.eye(3)), sp.identity(5, format="csr"), x, 20, 1e-3)
    assert np.allclose(res.ratios, 1.0, rtol=1e-12)
    res = probe_ratios(_sgc([[2.0]]), sp.identity(5, format="csr"), x[:, :1], 20, 1e-3)
    assert np.allclose(res.ratios, 2.0, rtol=1e-12)
    with pytest.raises(ValueError):
        empirical_lip(_sgc([[2.0]]), sp.identity(5, format="csr"), x[:, :1], 0, 1e-3)
    with pytest.raises(ValueError):
        empirical_lip(_sgc([[2.0]]), sp.identity(5, format="csr"), x[:, :1], 3, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_empirical_below_global_lip(seed):
    g = random_graph(10, 4, seed=seed)
    a = normalize_adjacency(g)
    m = random_model("GCN", 4, 3, seed=seed)
    rep = lip_report(m, a, g.features)
    emp = empirical_lip(m, a, g.features, 200, 1e-3, seed=seed)
    assert emp <= rep.global_lip * (1 + 1e-6)


def test_probe_skips_are_logged(caplog):
    # hidden units w and -w at X = 0: every perturbation switches one of them on
    g = random_graph(6, 2, seed=0)
    m = random_model("GCN", 2, 2, seed=0, hidden=2)
    w = m.weights[0][:, :1]
    m = m.with_weights([np.hstack([w, -w]), m.weights[1]])
    with caplog.at_level(logging.WARNING):
        res = probe_ratios(m, normalize_adjacency(g), np.zeros((6, 2)), 5, 1e-3)
    assert res.skipped == 5 and res.ratios.size == 0
    assert "5 of 5 probes skipped" in caplog.text
    assert empirical_lip(m, normalize_adjacency(g), np.zeros((6, 2)), 3, 1e-3) == 0.0


def test_final_layer_homogeneity_of_global_lip(small_graph, small_a_hat):
    for arch in ("GCN", "SGC"):
        m = random_model(arch, 4, 3, seed=1)
        base = lip_report(m, small_a_hat, small_graph.features).global_lip
        for c in (0.0, 0.5, 8.0):
            ws = list(m.weights)
            ws[-1] = ws[-1] * c
            scaled = lip_report(m.with_weights(ws), small_a_hat, small_graph.features).global_lip
            assert scaled == pytest.approx(c * base, rel=1e-14, abs=0)


def test_sgc_bound_is_global():
    g = random_graph(8, 3, seed=4)
    a = normalize_adjacency(g)
    m = random_model("SGC", 3, 2, seed=4)
    lip = lip_report(m, a, g.features).global_lip
    for eps in (1e-6, 1.0, 1e4):
        res = probe_ratios(m, a, g.features, 50, eps, seed=1, keep_region=False)
        assert res.ratios.max() <= lip * (1 + 1e-9)


def test_whole_matrix_probe_runs(small_graph, small_a_hat):
    m = random_model("GCN", 4, 3, seed=0)
    assert empirical_lip_full(m, small_a_hat, small_graph.features, 10, 1e-3) > 0


def test_componentwise_inequality_examples():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=4), rng.normal(size=4)
    lhs, rhs, ok = lemma1_check(lambda v: v, x, y)
    assert ok and lhs == pytest.approx(rhs, rel=1e-15)
    assert lemma1_check(lambda v: np.ones(3), x, y) == (0.0, 0.0, True)
    with pytest.raises(ValueError):
        lemma1_check(lambda v: v, x, x)

import numpy as np
import pytest
import scipy.sparse as sp

from jacolip.graph import make_graph, normalize_adjacency
from jacolip.models import gae_shape, gcn_shape, init_params, sgc_shape


def random_graph(n, f, seed, p=0.3, n_classes=3):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < p, k=1)
    adj = sp.csr_matrix((upper | upper.T).astype(np.float64))
    x = rng.normal(size=(n, f))
    labels = rng.integers(0, n_classes, size=n)
    return make_graph(adj, x, labels)


def random_model(arch, in_dim, out_dim, seed, hidden=5, power=2):
    if arch == "GCN":
        shape = gcn_shape(in_dim, out_dim, (hidden,))
    elif arch == "SGC":
        shape = sgc_shape(in_dim, out_dim, power)
    else:
        shape = gae_shape(in_dim, (hidden, out_dim))
    model = init_params(shape, seed)
    # Glorot weights are small; scale up so ReLU masks are mixed and gradients non-trivial
    return model.with_weights([w * 2.0 for w in model.weights])


@pytest.fixture
def small_graph():
    return random_graph(10, 4, seed=3)


@pytest.fixture
def small_a_hat(small_graph):
    return normalize_adjacency(small_graph)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

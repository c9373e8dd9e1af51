"""Lipschitz bounds of GNN outputs w.r.t. node inputs."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .grad import NodeJacobianSet, node_jacobians
from .linalg import make_rng, norm_inf2, row_l2_norms
from .models import ForwardCache, Model, forward

log = logging.getLogger(__name__)

PROBE_RETRIES = 50
_STREAM_PROBE = 31


@dataclass
class LipReport:
    lb_matrix: np.ndarray
    global_lip: float
    layerwise_bound: float
    argmax_node: int
    empirical_lower: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "global_lip": self.global_lip,
            "layerwise_bound": self.layerwise_bound,
            "argmax_node": self.argmax_node,
            "empirical_lower": self.empirical_lower,
            "lb_rows": int(self.lb_matrix.shape[0]),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def lb_matrix(jacobians: NodeJacobianSet, n_nodes: int | None = None) -> np.ndarray:
    """LB(J): entry (i, j) is the l2-norm of row j of J_i."""
    if n_nodes is not None and jacobians.n_nodes != n_nodes:
        raise ValueError(f"expected Jacobian blocks for {n_nodes} nodes, got {jacobians.n_nodes}")
    return jacobians.lb_rows()


def global_lip(lb: np.ndarray) -> tuple[float, int]:
    """(||LB||_{inf,2}, first row attaining it)."""
    value = norm_inf2(lb)
    return value, int(np.argmax(row_l2_norms(lb)))


def layerwise_bound(model: Model, cache: ForwardCache) -> float:
    """max_j prod_l F'^l * ||[J(h^l)]_j||_inf over the layer-wise same-node blocks.

    Layer l's node-j block is d(P_l H W_l)_j / dH_j = (P_l)_jj W_l^T, whose
    c-th row norm is |(P_l)_jj| * ||W_l[:, c]||. The activation is excluded
    (ReLU is 1-Lipschitz).
    """
    n = cache.n_nodes
    per_node = np.ones(n)
    for spec, w, op in zip(model.layers, model.weights, cache.ops):
        col_norms = np.sqrt(np.sum(w * w, axis=0))
        per_node = per_node * spec.out_dim * np.abs(op.diag(n)) * col_norms.max()
    return float(per_node.max())


def lip_report(model: Model, a_hat, x, probes: int = 0, eps: float = 1e-3, seed: int = 0) -> LipReport:
    _, cache = forward(model, a_hat, x)
    jac = node_jacobians(model, cache)
    lb = lb_matrix(jac)
    value, node = global_lip(lb)
    empirical = empirical_lip(model, a_hat, x, probes, eps, seed) if probes else None
    return LipReport(lb, value, layerwise_bound(model, cache), node, empirical)


# ----------------------------------------------------------- empirical probes


@dataclass
class ProbeResult:
    nodes: np.ndarray
    ratios: np.ndarray
    deltas: list
    skipped: int


def _same_region(a: ForwardCache, b: ForwardCache) -> bool:
    return all(
        (ma is None and mb is None) or np.array_equal(ma, mb)
        for ma, mb in zip(a.relu_masks, b.relu_masks)
    )


def probe_ratios(model: Model, a_hat, x, n_probes: int, eps: float, seed: int = 0,
                 keep_region: bool = True) -> ProbeResult:
    """Single-node perturbation probes ||f(X+d)_i - f(X)_i|| / ||d_i||.

    Each probe picks a node uniformly and a random direction of norm ``eps``.
    With ``keep_region`` the probe is redrawn (up to 50 times) whenever any
    ReLU mask flips, so the ratio is exact inside one linear region.
    """
    if n_probes <= 0:
        raise ValueError("n_probes must be positive")
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    rng = make_rng(seed, _STREAM_PROBE)
    y0, base = forward(model, a_hat, x)
    nodes, ratios, deltas, skipped = [], [], [], 0
    for _ in range(n_probes):
        i = int(rng.integers(0, x.shape[0]))
        for _attempt in range(PROBE_RETRIES):
            d = rng.normal(size=x.shape[1])
            d *= eps / np.linalg.norm(d)
            xp = x.copy()
            xp[i] += d
            y1, cache = forward(model, a_hat, xp)
            if not keep_region or _same_region(base, cache):
                break
        else:
            skipped += 1
            continue
        nodes.append(i)
        ratios.append(float(np.linalg.norm(y1[i] - y0[i]) / np.linalg.norm(d)))
        deltas.append(d)
    if skipped:
        log.warning("%d of %d probes skipped after %d mask-flip retries", skipped, n_probes, PROBE_RETRIES)
    return ProbeResult(np.array(nodes, dtype=np.int64), np.array(ratios), deltas, skipped)


def empirical_lip(model: Model, a_hat, x, n_probes: int, eps: float, seed: int = 0) -> float:
    """Monte-Carlo lower estimate of the same-node Lipschitz constant."""
    res = probe_ratios(model, a_hat, x, n_probes, eps, seed)
    return float(res.ratios.max()) if res.ratios.size else 0.0


def empirical_lip_full(model: Model, a_hat, x, n_probes: int, eps: float, seed: int = 0) -> float:
    """Whole-matrix perturbation probe, ||dY||_F / ||dX||_F.

    Includes cross-node sensitivities, which LB(J) does not bound; reported
    for comparison only.
    """
    if n_probes <= 0:
        raise ValueError("n_probes must be positive")
    x = np.asarray(x, dtype=np.float64)
    rng = make_rng(seed, _STREAM_PROBE, 1)
    y0, _ = forward(model, a_hat, x)
    best = 0.0
    for _ in range(n_probes):
        d = rng.normal(size=x.shape)
        d *= eps / np.linalg.norm(d)
        y1, _ = forward(model, a_hat, x + d)
        best = max(best, float(np.linalg.norm(y1 - y0) / eps))
    return best


# ------------------------------------------------- component-wise inequality


def lemma1_check(g: Callable[[np.ndarray], np.ndarray], x, y) -> tuple[float, float, bool]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dist = float(np.linalg.norm(x - y))
    if dist == 0.0:
        raise ValueError("lemma1_check needs x != y")
    gx = np.atleast_1d(np.asarray(g(x), dtype=np.float64))
    gy = np.atleast_1d(np.asarray(g(y), dtype=np.float64))
    lhs = float(np.linalg.norm(gx - gy) / dist)
    rhs = float(np.linalg.norm(np.abs(gx - gy) / dist))
    return lhs, rhs, lhs <= rhs + 1e-12

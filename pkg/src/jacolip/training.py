"""AdamW and the vanilla / JacoLip full-batch training loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import grad as G
from .graph import (EdgeSplit, Graph, NodeMasks, normalize_adjacency, sample_negative_edges,
                    split_edges, split_nodes, _pair_keys)
from .lipschitz import global_lip, lb_matrix
from .linalg import frobenius, make_rng
from .metrics import (SimilarityMatrix, accuracy, auc, jaccard_similarity, ndcg_at_k, err_at_k,
                      outcome_similarity, similarity_for)
from .models import (Model, ModelShape, decode_edges, forward, gae_shape, gcn_shape, init_params,
                     sgc_shape)

log = logging.getLogger(__name__)

_STREAM_DROPOUT = 41
_STREAM_NEGATIVES = 42

DEFAULT_U_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: Model, log_so_far):
        super().__init__(msg)
        self.last_good = last_good
        self.log = log_so_far


@dataclass
class TrainConfig:
    arch: str = "GCN"
    task: str = "node"  # "node" | "link"
    epochs: int = 200
    pretrain_epochs: int = 0  # leading epochs without the regularizer (counted in ``epochs``)
    learning_rate: float = 0.01
    weight_decay: float = 1e-5
    u: float = 0.0
    k: int = 10
    dropout: float = 0.0
    seed: int = 0
    similarity: str = "feature"
    hidden: Optional[tuple] = None  # node: hidden widths (16,); link: encoder widths incl. embedding (32, 16)
    sgc_power: int = 2
    node_ratios: tuple = (0.6, 0.2, 0.2)
    edge_ratios: tuple = (0.85, 0.05, 0.10)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.arch = self.arch.upper()
        if self.hidden is None:
            self.hidden = (16,) if self.task == "node" else (32, 16)
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h < 1 for h in self.hidden) or (self.task == "link" and not self.hidden):
            raise ValueError("hidden widths must be positive (link tasks need at least one)")
        self.node_ratios = tuple(float(r) for r in self.node_ratios)
        self.edge_ratios = tuple(float(r) for r in self.edge_ratios)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.u < 0:
            raise ValueError("u must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.task not in ("node", "link"):
            raise ValueError(f"unknown task {self.task!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.task == "link" and self.arch == "SGC":
            raise ValueError("SGC is only used for node classification")
        if self.task == "node" and self.arch == "GAE":
            raise ValueError("GAE is only used for link prediction")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, model: Model) -> "OptimizerState":
        return cls([np.zeros_like(w) for w in model.weights], [np.zeros_like(w) for w in model.weights], 0)


def adamw_step(model: Model, grads, state: OptimizerState, config: TrainConfig):
    """One decoupled-weight-decay Adam step; returns (new_model, new_state)."""
    for l, g in enumerate(grads):
        if g.shape != model.weights[l].shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {model.weights[l].shape} (layer {l})")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {l}")
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_w, new_m, new_v = [], [], []
    for w, g, m, v in zip(model.weights, grads, state.m, state.v):
        w = w * (1.0 - lr * wd)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        denom = np.sqrt(v) / math.sqrt(bc2) + eps
        w = w - (lr / bc1) * (m / denom)
        new_w.append(w)
        new_m.append(m)
        new_v.append(v)
    return model.with_weights(new_w), OptimizerState(new_m, new_v, t)


# ---------------------------------------------------------------- dynamics


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    reg: float
    utility: float
    ndcg: float
    weight_norm: float
    grad_norm: float


CSV_HEADER = ["epoch", "loss", "reg", "utility", "ndcg", "weight_norm", "grad_norm"]


@dataclass
class DynamicsLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in CSV_HEADER[1:]])

    @classmethod
    def read_csv(cls, path) -> "DynamicsLog":
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: empty dynamics CSV")
            if header != CSV_HEADER:
                raise ValueError(f"{path}:1: unexpected header {header}")
            for row_no, row in enumerate(reader, 2):
                if len(row) != len(CSV_HEADER):
                    raise ValueError(f"{path}:{row_no}: expected {len(CSV_HEADER)} fields")
                try:
                    out.records.append(EpochRecord(int(row[0]), *(float(x) for x in row[1:])))
                except ValueError:
                    raise ValueError(f"{path}:{row_no}: non-numeric field") from None
        if not out.records:
            raise ValueError(f"{path}: dynamics CSV has no rows")
        return out


# ------------------------------------------------------------------ tasks


@dataclass
class TaskData:
    """Everything derived from (graph, config) that stays fixed during training."""

    graph: Graph
    a_hat: object
    s_g: SimilarityMatrix
    masks: Optional[NodeMasks] = None
    split: Optional[EdgeSplit] = None
    train_keys: Optional[np.ndarray] = None


def prepare_task(graph: Graph, config: TrainConfig) -> TaskData:
    if config.task == "node":
        if graph.labels is None:
            raise ValueError("node classification needs labels")
        masks = graph.masks or split_nodes(graph, config.node_ratios, config.seed)
        s_g = similarity_for(config.similarity, graph)
        return TaskData(graph, normalize_adjacency(graph), s_g, masks=masks)
    split = split_edges(graph, config.edge_ratios, config.seed)
    train_adj = split.train_adjacency()
    if config.similarity == "structural":
        s_g = jaccard_similarity(train_adj)
    else:
        s_g = similarity_for(config.similarity, graph)
    return TaskData(graph, normalize_adjacency(train_adj), s_g, split=split,
                    train_keys=_pair_keys(split.train_pos, graph.n_nodes))


def build_shape(graph: Graph, config: TrainConfig) -> ModelShape:
    if config.arch == "SGC":
        return sgc_shape(graph.n_features, graph.n_classes, config.sgc_power)
    if config.task == "node":
        return gcn_shape(graph.n_features, graph.n_classes, config.hidden)
    if config.arch == "GAE":
        return gae_shape(graph.n_features, config.hidden)
    shape = gae_shape(graph.n_features, config.hidden)
    return ModelShape("GCN", shape.layers)


def _utility(data: TaskData, y: np.ndarray) -> float:
    if data.masks is not None:
        return accuracy(y, data.graph.labels, data.masks.test)
    s = data.split
    edges = np.concatenate([s.test_pos, s.test_neg])
    labels = np.concatenate([np.ones(len(s.test_pos)), np.zeros(len(s.test_neg))])
    return auc(decode_edges(y, edges).logits, labels)


def evaluate(model: Model, data: TaskData, k: int = 10) -> dict:
    """Dropout-free utility, rank metrics and Lipschitz bound of ``model``."""
    y, cache = forward(model, data.a_hat, data.graph.features)
    s_y = outcome_similarity(y)
    lb = lb_matrix(G.node_jacobians(model, cache))
    value, node = global_lip(lb)
    return {
        "utility": _utility(data, y),
        "utility_name": "acc" if data.masks is not None else "auc",
        "ndcg": float(np.mean(ndcg_at_k(data.s_g, s_y, k))),
        "err": float(np.mean(err_at_k(data.s_g, s_y, k))),
        "global_lip": value,
        "argmax_node": node,
    }


def _task_step(model, data, config, rng_drop, rng_neg):
    g = data.graph
    y, cache = forward(model, data.a_hat, g.features, dropout=config.dropout, rng=rng_drop)
    if data.masks is not None:
        loss = G.ce_loss(y, g.labels, data.masks.train).value
        grads = G.backward_params(model, cache, "ce", (g.labels, data.masks.train))
    else:
        pos = data.split.train_pos
        neg = sample_negative_edges(g.n_nodes, data.train_keys, len(pos), rng_neg)
        edges = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        loss = G.bce_edge_loss(decode_edges(y, edges), labels).value
        grads = G.backward_params(model, cache, "bce", (edges, labels))
    return loss, grads, cache


def _train(graph: Graph, config: TrainConfig, regularize: bool, data: TaskData | None = None,
           on_epoch: Callable | None = None, model: Model | None = None):
    data = data or prepare_task(graph, config)
    if model is None:
        model = init_params(build_shape(graph, config), config.seed)
    state = OptimizerState.zeros_like(model)
    rng_drop = make_rng(config.seed, _STREAM_DROPOUT)
    rng_neg = make_rng(config.seed, _STREAM_NEGATIVES)
    dyn = DynamicsLog()
    for epoch in range(config.epochs):
        loss, grads, cache = _task_step(model, data, config, rng_drop, rng_neg)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model, dyn)
        if config.dropout:
            y_eval, eval_cache = forward(model, data.a_hat, graph.features)
        else:
            y_eval, eval_cache = cache.output, cache
        jac = G.node_jacobians(model, eval_cache)
        lip, _ = global_lip(lb_matrix(jac))
        if regularize and config.u > 0 and epoch >= config.pretrain_epochs:
            rg = G.reg_gradient(model, eval_cache, jac)
            if rg.degenerate:
                log.warning("epoch %d: zero Jacobian at node %d, regularizer gradient skipped", epoch, rg.node)
            grads = [g + config.u * r for g, r in zip(grads, rg.grads)]
            loss = loss + config.u * lip
        rec = EpochRecord(
            epoch=epoch,
            loss=loss,
            reg=lip,
            utility=_utility(data, y_eval),
            ndcg=float(np.mean(ndcg_at_k(data.s_g, outcome_similarity(y_eval), config.k))),
            weight_norm=math.sqrt(sum(frobenius(w) ** 2 for w in model.weights)),
            grad_norm=math.sqrt(sum(frobenius(g) ** 2 for g in grads)),
        )
        dyn.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model, grads)
        try:
            new_model, state = adamw_step(model, grads, state, config)
        except FloatingPointError as exc:
            raise TrainingDiverged(str(exc), model, dyn) from exc
        model = new_model
    return model, dyn


def train_vanilla(graph: Graph, config: TrainConfig, data: TaskData | None = None,
                  on_epoch: Callable | None = None):
    """Task loss only. ``on_epoch(record, model, grads)`` sees pre-step weights."""
    return _train(graph, config, regularize=False, data=data, on_epoch=on_epoch)


def train_jacolip(graph: Graph, config: TrainConfig, data: TaskData | None = None,
                  on_epoch: Callable | None = None):
    """Task loss plus ``u * ||LB(J)||_{inf,2}`` after ``pretrain_epochs`` epochs."""
    return _train(graph, config, regularize=True, data=data, on_epoch=on_epoch)

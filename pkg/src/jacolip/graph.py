"""Attributed graphs: file I/O, normalization, synthetic generation and splits."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .linalg import as_csr, make_rng

FEATURE_MAGIC = b"JLFM"

# substreams of the user seed
_STREAM_SBM = 11
_STREAM_NODE_SPLIT = 12
_STREAM_EDGE_SPLIT = 13


@dataclass(frozen=True, eq=False)
class NodeMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def as_tuple(self):
        return self.train, self.val, self.test

    def __eq__(self, other):
        if not isinstance(other, NodeMasks):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.as_tuple(), other.as_tuple()))


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class Graph:
    n_nodes: int
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    masks: Optional[NodeMasks] = None
    # generator-side block ids; not persisted by save_graph
    blocks: Optional[np.ndarray] = None

    def __eq__(self, other):
        """Value equality on nodes, edges, features, labels and masks (blocks ignored)."""
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n_nodes == other.n_nodes
            and self.adjacency.shape == other.adjacency.shape
            and (self.adjacency != other.adjacency).nnz == 0
            and np.array_equal(self.features, other.features)
            and _opt_equal(self.labels, other.labels)
            and (self.masks == other.masks if self.masks is not None and other.masks is not None
                 else self.masks is None and other.masks is None)
        )

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        if self.labels is None:
            return 0
        return int(self.labels.max()) + 1

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with u < v, in sorted order."""
        upper = sp.triu(self.adjacency, k=1, format="coo")
        order = np.lexsort((upper.col, upper.row))
        return np.stack([upper.row[order], upper.col[order]], axis=1).astype(np.int64)

    @property
    def n_edges(self) -> int:
        return int(sp.triu(self.adjacency, k=1).nnz)


@dataclass(frozen=True)
class NormalizedAdjacency:
    matrix: sp.csr_matrix
    convention: str = "symmetric-renormalized"


@dataclass(frozen=True)
class EdgeSplit:
    n_nodes: int
    train_pos: np.ndarray
    val_pos: np.ndarray
    test_pos: np.ndarray
    train_neg: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray

    def train_adjacency(self) -> sp.csr_matrix:
        return adjacency_from_edges(self.n_nodes, self.train_pos)


@dataclass(frozen=True)
class SynthSpec:
    n_nodes: int = 300
    n_blocks: int = 2
    p_in: float = 0.1
    p_out: float = 0.01
    feature_dim: int = 4
    n_classes: int = 2
    class_signal: float = 3.0
    bias_strength: float = 0.0
    bias_noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_in <= 1.0 and 0.0 <= self.p_out <= 1.0):
            raise ValueError("edge probabilities must lie in [0, 1]")
        if self.n_blocks < 2:
            raise ValueError("n_blocks must be >= 2")
        if self.bias_strength < 0:
            raise ValueError("bias_strength must be >= 0")
        if self.n_nodes < 1 or self.feature_dim < 1 or self.n_classes < 1:
            raise ValueError("n_nodes, feature_dim and n_classes must be positive")


def adjacency_from_edges(n_nodes: int, edges) -> sp.csr_matrix:
    """Binary symmetric adjacency with self-loops and duplicates removed."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    keep = edges[:, 0] != edges[:, 1]
    u, v = edges[keep, 0], edges[keep, 1]
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    a = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n_nodes, n_nodes))
    a = as_csr(a)
    a.data[:] = 1.0
    return a


def _freeze(*arrays):
    for a in arrays:
        if a is not None:
            a.setflags(write=False)


def make_graph(adjacency, features, labels=None, masks=None, blocks=None) -> Graph:
    features = np.array(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    n = features.shape[0]
    adjacency = as_csr(adjacency)
    if adjacency.shape != (n, n):
        raise ValueError(f"adjacency shape {adjacency.shape} does not match {n} feature rows")
    adjacency = as_csr(sp.triu(adjacency, k=1) + sp.tril(adjacency, k=-1))
    adjacency.eliminate_zeros()
    adjacency.data[:] = 1.0
    if (adjacency != adjacency.T).nnz:
        raise ValueError("adjacency must be symmetric")
    if labels is not None:
        labels = np.array(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"label count {labels.shape[0]} does not match {n} feature rows")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
    if masks is not None:
        masks = NodeMasks(*(np.array(m, dtype=bool) for m in masks.as_tuple()))
        for m in masks.as_tuple():
            if m.shape != (n,):
                raise ValueError("mask length does not match node count")
        _freeze(*masks.as_tuple())
    if blocks is not None:
        blocks = np.array(blocks, dtype=np.int64)
    _freeze(features, labels, blocks)
    return Graph(n, adjacency, features, labels, masks, blocks)


# ---------------------------------------------------------------- file I/O


def read_edges(path, n_nodes: int | None = None) -> np.ndarray:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'u v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: node ids must be integers") from None
            if u < 0 or v < 0 or (n_nodes is not None and (u >= n_nodes or v >= n_nodes)):
                raise ValueError(f"{path}:{lineno}: node index out of range [0, {n_nodes})")
            edges.append((u, v))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == FEATURE_MAGIC:
            n, f = struct.unpack("<QQ", fh.read(16))
            data = np.frombuffer(fh.read(8 * n * f), dtype="<f8")
            if data.size != n * f:
                raise ValueError(f"{path}: truncated binary feature file")
            return data.reshape(n, f).astype(np.float64)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}:1: expected header 'N F'")
        n, f = int(header[0]), int(header[1])
        out = np.empty((n, f), dtype=np.float64)
        for i in range(n):
            row = fh.readline().split()
            if len(row) != f:
                raise ValueError(f"{path}:{i + 2}: expected {f} values, got {len(row)}")
            out[i] = [float(x) for x in row]
        if fh.readline().strip():
            raise ValueError(f"{path}: more than {n} feature rows")
    return out


def read_labels(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([int(l) for l in fh if l.strip()], dtype=np.int64)


def read_masks(path) -> NodeMasks:
    """Mask file: one line per node holding three 0/1 flags (train val test)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3 or any(p not in ("0", "1") for p in parts):
                raise ValueError(f"{path}:{lineno}: expected three 0/1 flags")
            rows.append([p == "1" for p in parts])
    arr = np.array(rows, dtype=bool).reshape(-1, 3)
    return NodeMasks(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())


def _read_mask_column(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([l.strip() == "1" for l in fh if l.strip()], dtype=bool)


def load_graph(edge_path, feature_path, label_path=None, mask_path=None) -> Graph:
    """Load a graph from the text/binary formats described in the README.

    ``mask_path`` may be a single three-column file or a tuple of three
    per-split single-column files.
    """
    features = read_features(feature_path)
    n = features.shape[0]
    edges = read_edges(edge_path, n_nodes=n)
    labels = read_labels(label_path) if label_path is not None else None
    if labels is not None and labels.shape[0] != n:
        raise ValueError(f"label rows ({labels.shape[0]}) != feature rows ({n})")
    masks = None
    if mask_path is not None:
        if isinstance(mask_path, (tuple, list)):
            masks = NodeMasks(*(_read_mask_column(p) for p in mask_path))
        else:
            masks = read_masks(mask_path)
        if any(m.shape[0] != n for m in masks.as_tuple()):
            raise ValueError(f"mask rows != feature rows ({n})")
    return make_graph(adjacency_from_edges(n, edges), features, labels, masks)


DATASET_FILES = {
    "edges": "edges.txt",
    "features": "features.txt",
    "labels": "labels.txt",
    "masks": "masks.txt",
}


def load_dataset_dir(directory) -> Graph:
    paths = {k: os.path.join(directory, v) for k, v in DATASET_FILES.items()}
    features = paths["features"]
    if not os.path.exists(features) and os.path.exists(os.path.join(directory, "features.bin")):
        features = os.path.join(directory, "features.bin")
    return load_graph(
        paths["edges"],
        features,
        paths["labels"] if os.path.exists(paths["labels"]) else None,
        paths["masks"] if os.path.exists(paths["masks"]) else None,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def save_graph(g: Graph, directory, binary_features: bool = False) -> dict:
    """Write ``g`` in the on-disk formats; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    out = {}
    out["edges"] = os.path.join(directory, DATASET_FILES["edges"])
    with open(out["edges"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {g.n_nodes} nodes {g.n_edges} edges\n")
        for u, v in g.edge_list():
            fh.write(f"{u}\t{v}\n")
    if binary_features:
        out["features"] = os.path.join(directory, "features.bin")
        with open(out["features"], "wb") as fh:
            n, f = g.features.shape
            fh.write(FEATURE_MAGIC + struct.pack("<QQ", n, f))
            fh.write(np.ascontiguousarray(g.features, dtype="<f8").tobytes())
    else:
        out["features"] = os.path.join(directory, DATASET_FILES["features"])
        with open(out["features"], "w", encoding="utf-8", newline="\n") as fh:
            n, f = g.features.shape
            fh.write(f"{n} {f}\n")
            for row in g.features:
                fh.write(" ".join(_fmt(x) for x in row) + "\n")
    if g.labels is not None:
        out["labels"] = os.path.join(directory, DATASET_FILES["labels"])
        with open(out["labels"], "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{int(l)}\n" for l in g.labels)
    if g.masks is not None:
        out["masks"] = os.path.join(directory, DATASET_FILES["masks"])
        with open(out["masks"], "w", encoding="utf-8", newline="\n") as fh:
            for t, v, s in zip(*g.masks.as_tuple()):
                fh.write(f"{int(t)} {int(v)} {int(s)}\n")
    return out


# ----------------------------------------------------------- normalization


def normalize_adjacency(g_or_adj) -> NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2 with degrees taken after adding self-loops."""
    a = g_or_adj.adjacency if isinstance(g_or_adj, Graph) else g_or_adj
    a = as_csr(a)
    n = a.shape[0]
    a_hat = as_csr(a + sp.identity(n, format="csr"))
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    return NormalizedAdjacency(as_csr(d @ a_hat @ d))


# --------------------------------------------------------------- synthetic


def synth_sbm_biased(spec: SynthSpec) -> Graph:
    """Stochastic block model with a spurious block-correlated feature channel.

    Class labels are drawn independently of block membership, so the final
    feature column (``bias_strength * block_indicator + noise``) carries no
    information about the label.
    """
    rng = make_rng(spec.seed, _STREAM_SBM)
    n = spec.n_nodes
    blocks = np.arange(n) % spec.n_blocks
    blocks = blocks[rng.permutation(n)]
    labels = rng.integers(0, spec.n_classes, size=n)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(blocks[iu] == blocks[ju], spec.p_in, spec.p_out)
    hit = rng.random(iu.size) < prob
    adjacency = adjacency_from_edges(n, np.stack([iu[hit], ju[hit]], axis=1))

    centers = rng.normal(size=(spec.n_classes, spec.feature_dim))
    centers *= spec.class_signal / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    signal = centers[labels] + rng.normal(size=(n, spec.feature_dim))
    indicator = blocks / (spec.n_blocks - 1)
    bias = spec.bias_strength * indicator + spec.bias_noise * rng.normal(size=n)
    features = np.concatenate([signal, bias[:, None]], axis=1)
    return make_graph(adjacency, features, labels, blocks=blocks)


# ------------------------------------------------------------------ splits


def _check_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    return ratios


def _split_sizes(total: int, ratios) -> tuple[int, int, int]:
    n_val = int(round(ratios[1] * total))
    n_test = int(round(ratios[2] * total))
    return total - n_val - n_test, n_val, n_test


def split_nodes(g: Graph, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> NodeMasks:
    ratios = _check_ratios(ratios)
    labeled = np.arange(g.n_nodes)
    perm = labeled[make_rng(seed, _STREAM_NODE_SPLIT).permutation(labeled.size)]
    n_train, n_val, _ = _split_sizes(labeled.size, ratios)
    masks = [np.zeros(g.n_nodes, dtype=bool) for _ in range(3)]
    masks[0][perm[:n_train]] = True
    masks[1][perm[n_train:n_train + n_val]] = True
    masks[2][perm[n_train + n_val:]] = True
    return NodeMasks(*masks)


def with_masks(g: Graph, masks: NodeMasks) -> Graph:
    return make_graph(g.adjacency, g.features, g.labels, masks, g.blocks)


def _pair_keys(edges: np.ndarray, n: int) -> np.ndarray:
    u = np.minimum(edges[:, 0], edges[:, 1])
    v = np.maximum(edges[:, 0], edges[:, 1])
    return u * n + v


def sample_negative_edges(n: int, forbidden: np.ndarray, count: int, rng) -> np.ndarray:
    """Uniformly sample ``count`` distinct unordered non-edges (u < v).

    ``forbidden`` holds pair keys ``u * n + v`` that must not be drawn.
    """
    available = n * (n - 1) // 2 - np.unique(forbidden).size
    if count > available:
        raise ValueError(f"cannot sample {count} negative edges: only {available} absent pairs")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    forbidden_set = np.unique(forbidden)
    if available <= 4 * count:
        iu, ju = np.triu_indices(n, k=1)
        keys = iu * n + ju
        keys = keys[~np.isin(keys, forbidden_set)]
        chosen = np.sort(rng.choice(keys, size=count, replace=False))
    else:
        chosen = np.zeros(0, dtype=np.int64)
        while chosen.size < count:
            u = rng.integers(0, n, size=2 * (count - chosen.size) + 16)
            v = rng.integers(0, n, size=u.size)
            ok = u != v
            keys = np.minimum(u, v)[ok] * n + np.maximum(u, v)[ok]
            keys = keys[~np.isin(keys, forbidden_set)]
            # keep first occurrence, preserving draw order
            merged = np.concatenate([chosen, keys])
            _, first = np.unique(merged, return_index=True)
            chosen = merged[np.sort(first)][:count]
    return np.stack([chosen // n, chosen % n], axis=1).astype(np.int64)


def split_edges(g: Graph, ratios=(0.85, 0.05, 0.10), seed: int = 0) -> EdgeSplit:
    ratios = _check_ratios(ratios)
    edges = g.edge_list()
    if edges.shape[0] == 0:
        raise ValueError("graph has no edges to split")
    rng = make_rng(seed, _STREAM_EDGE_SPLIT)
    perm = rng.permutation(edges.shape[0])
    n_train, n_val, n_test = _split_sizes(edges.shape[0], ratios)
    parts = [edges[np.sort(perm[:n_train])],
             edges[np.sort(perm[n_train:n_train + n_val])],
             edges[np.sort(perm[n_train + n_val:])]]
    n = g.n_nodes
    neg = sample_negative_edges(n, _pair_keys(edges, n), edges.shape[0], rng)
    neg = neg[rng.permutation(neg.shape[0])]
    negs = [neg[:n_train], neg[n_train:n_train + n_val], neg[n_train + n_val:]]
    return EdgeSplit(n, *parts, *negs)

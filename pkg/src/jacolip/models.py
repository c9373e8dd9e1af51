"""GCN / SGC / GAE forward passes with caches for gradients and Jacobians."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .linalg import as_csr, make_rng, spmm

ARCHS = ("GCN", "SGC", "GAE")
CHECKPOINT_MAGIC = b"JLCK"
_ARCH_TAG = {"GCN": 0, "SGC": 1, "GAE": 2}
_KIND_TAG = {"graph-conv": 0, "linear": 1}
_ACT_TAG = {"none": 0, "relu": 1}

_STREAM_INIT = 21


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in _KIND_TAG:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACT_TAG:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")


@dataclass(frozen=True)
class ModelShape:
    arch: str
    layers: tuple
    sgc_power: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].activation != "none":
            raise ValueError("final layer must have no activation")
        if self.sgc_power < 0:
            raise ValueError("sgc_power must be >= 0")
        if self.arch == "SGC" and (len(self.layers) != 1 or self.layers[0].kind != "linear"):
            raise ValueError("SGC is a single linear layer after K propagation steps")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass(frozen=True)
class Model:
    arch: str
    layers: tuple
    weights: tuple
    sgc_power: int = 0

    def __post_init__(self):
        ModelShape(self.arch, self.layers, self.sgc_power)
        if len(self.weights) != len(self.layers):
            raise ValueError("one weight matrix per layer required")
        for spec, w in zip(self.layers, self.weights):
            if w.shape != (spec.in_dim, spec.out_dim):
                raise ValueError(f"weight shape {w.shape} != {(spec.in_dim, spec.out_dim)}")

    @property
    def shape(self) -> ModelShape:
        return ModelShape(self.arch, self.layers, self.sgc_power)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def with_weights(self, weights: Sequence[np.ndarray]) -> "Model":
        return replace(self, weights=tuple(np.array(w, dtype=np.float64) for w in weights))

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for w in self.weights:
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()


def gcn_shape(in_dim: int, out_dim: int, hidden: Sequence[int] = (16,)) -> ModelShape:
    dims = [in_dim, *hidden, out_dim]
    layers = tuple(
        LayerSpec("graph-conv", dims[i], dims[i + 1], "relu" if i < len(dims) - 2 else "none")
        for i in range(len(dims) - 1)
    )
    return ModelShape("GCN", layers)


def sgc_shape(in_dim: int, out_dim: int, power: int = 2) -> ModelShape:
    return ModelShape("SGC", (LayerSpec("linear", in_dim, out_dim, "none"),), power)


def gae_shape(in_dim: int, dims: Sequence[int] = (32, 16)) -> ModelShape:
    shape = gcn_shape(in_dim, dims[-1], dims[:-1])
    return replace(shape, arch="GAE")


def init_params(shape: ModelShape, seed: int) -> Model:
    """Glorot-uniform weights, U(-sqrt(6/(fan_in+fan_out)), +...)."""
    rng = make_rng(seed, _STREAM_INIT)
    weights = []
    for spec in shape.layers:
        bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        weights.append(rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)))
    return Model(shape.arch, shape.layers, tuple(weights), shape.sgc_power)


# ------------------------------------------------------------- propagation


@dataclass(frozen=True)
class Propagation:
    """The message-passing operator a layer applies before its weight."""

    kind: str  # "identity" | "adjacency" | "power"
    matrix: Optional[sp.csr_matrix] = None
    power: int = 1

    def apply(self, h: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return h
        steps = 1 if self.kind == "adjacency" else self.power
        for _ in range(steps):
            h = spmm(self.matrix, h)
        return h

    def apply_t(self, h: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return h
        at = self.matrix.T.tocsr()
        steps = 1 if self.kind == "adjacency" else self.power
        for _ in range(steps):
            h = spmm(at, h)
        return h

    def sparse(self, n: int) -> sp.csr_matrix:
        if self.kind == "identity":
            return sp.identity(n, format="csr")
        if self.kind == "adjacency":
            return self.matrix
        out = sp.identity(n, format="csr")
        for _ in range(self.power):
            out = as_csr(out @ self.matrix)
        return out

    def diag(self, n: int) -> np.ndarray:
        if self.kind == "identity":
            return np.ones(n)
        if self.kind == "adjacency":
            return self.matrix.diagonal().astype(np.float64)
        return diag_of_power(self.matrix, self.power)


def diag_of_power(a: sp.csr_matrix, k: int) -> np.ndarray:
    """diag(A^k) without forming A^k when A is symmetric."""
    n = a.shape[0]
    if k == 0:
        return np.ones(n)
    half = sp.identity(n, format="csr")
    for _ in range(k // 2):
        half = as_csr(half @ a)
    if k % 2 == 0:
        return np.asarray(half.multiply(half.T).sum(axis=1)).ravel()
    return np.asarray(as_csr(half @ a).multiply(half.T).sum(axis=1)).ravel()


def _adj_matrix(a_hat) -> sp.csr_matrix:
    return as_csr(getattr(a_hat, "matrix", a_hat))


def propagations(model: Model, a_hat) -> list[Propagation]:
    a = _adj_matrix(a_hat)
    ops = []
    for i, spec in enumerate(model.layers):
        if model.arch == "SGC" and i == 0:
            ops.append(Propagation("power", a, model.sgc_power) if model.sgc_power else Propagation("identity"))
        elif spec.kind == "graph-conv":
            ops.append(Propagation("adjacency", a))
        else:
            ops.append(Propagation("identity"))
    return ops


# ----------------------------------------------------------------- forward


@dataclass
class ForwardCache:
    inputs: list  # H^{l-1} as fed to layer l (dropout applied)
    propagated: list  # P^l = op_l(H^{l-1})
    pre: list  # Z^l = P^l W^l
    relu_masks: list  # 1.0 where Z^l > 0, None for linear-output layers
    dropout_masks: list  # scaled keep-mask on H^l, None when inactive
    output: np.ndarray
    ops: list
    weights_digest: str

    @property
    def x(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def n_nodes(self) -> int:
        return self.output.shape[0]

    @property
    def dropout_active(self) -> bool:
        return any(m is not None for m in self.dropout_masks)


def forward(model: Model, a_hat, x, dropout: float = 0.0, rng=None, dropout_masks=None):
    """Run the layer stack; returns (output, cache).

    Dropout is applied to hidden activations only. Pass ``dropout_masks``
    (e.g. from an earlier cache) to replay a fixed mask.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layers[0].in_dim:
        raise ValueError(f"input shape {x.shape} incompatible with in_dim {model.layers[0].in_dim}")
    a = _adj_matrix(a_hat)
    if a.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"adjacency shape {a.shape} incompatible with {x.shape[0]} nodes")
    if dropout and rng is None and dropout_masks is None:
        raise ValueError("dropout requires an rng")
    ops = propagations(model, a)
    cache = ForwardCache([], [], [], [], [], None, ops, model.digest())
    h = x
    last = model.n_layers - 1
    for l, (spec, w, op) in enumerate(zip(model.layers, model.weights, ops)):
        cache.inputs.append(h)
        p = op.apply(h)
        z = p @ w
        cache.propagated.append(p)
        cache.pre.append(z)
        if spec.activation == "relu":
            m = (z > 0).astype(np.float64)
            h = np.where(z > 0, z, 0.0)
        else:
            m = None
            h = z
        cache.relu_masks.append(m)
        d = None
        if l < last:
            if dropout_masks is not None:
                d = dropout_masks[l]
            elif dropout:
                d = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            if d is not None:
                h = h * d
        cache.dropout_masks.append(d)
    cache.output = h
    return h, cache


def _require_arch(model: Model, *archs):
    if model.arch not in archs:
        raise ValueError(f"expected arch in {archs}, got {model.arch}")


def gcn_forward(model: Model, a_hat, x, **kw):
    _require_arch(model, "GCN")
    return forward(model, a_hat, x, **kw)


def sgc_forward(model: Model, a_hat, x, **kw):
    _require_arch(model, "SGC")
    return forward(model, a_hat, x, **kw)


@dataclass(frozen=True)
class EdgeScores:
    edges: np.ndarray
    logits: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_edges(z: np.ndarray, edges) -> EdgeScores:
    """Inner-product decoder: logit(u, v) = <z_u, z_v>."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = z.shape[0]
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ValueError(f"edge references a node outside [0, {n})")
    logits = np.einsum("ij,ij->i", z[edges[:, 0]], z[edges[:, 1]])
    return EdgeScores(edges, logits)


def gae_forward(model: Model, a_hat, x, edges, **kw):
    """Encode with the graph-conv stack, then score ``edges``.

    Also accepts GCN weights so the GCN link-prediction backbone shares the
    decoder.
    """
    _require_arch(model, "GAE", "GCN")
    z, cache = forward(model, a_hat, x, **kw)
    return decode_edges(z, edges), cache


# -------------------------------------------------------------- checkpoint


def save_checkpoint(model: Model, path) -> None:
    """Binary layout (little-endian): magic, u8 arch, u32 K, u32 L, per layer
    (u8 kind, u8 activation, u64 in, u64 out), then f64 weights row-major."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BII", _ARCH_TAG[model.arch], model.sgc_power, model.n_layers))
        for spec in model.layers:
            fh.write(struct.pack("<BBQQ", _KIND_TAG[spec.kind], _ACT_TAG[spec.activation],
                                 spec.in_dim, spec.out_dim))
        for w in model.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    inv = lambda d: {v: k for k, v in d.items()}
    arches, kinds, acts = inv(_ARCH_TAG), inv(_KIND_TAG), inv(_ACT_TAG)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    try:
        arch, power, n_layers = struct.unpack_from("<BII", blob, 4)
        off = 4 + struct.calcsize("<BII")
        layers = []
        for _ in range(n_layers):
            k, a, fi, fo = struct.unpack_from("<BBQQ", blob, off)
            off += struct.calcsize("<BBQQ")
            layers.append(LayerSpec(kinds[k], fi, fo, acts[a]))
        weights = []
        for spec in layers:
            count = spec.in_dim * spec.out_dim
            w = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += 8 * count
            weights.append(w.reshape(spec.in_dim, spec.out_dim).astype(np.float64))
    except (struct.error, ValueError, KeyError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Model(arches[arch], tuple(layers), tuple(weights), power)

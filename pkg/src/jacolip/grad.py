"""Losses, reverse-mode parameter gradients, per-node Jacobian blocks and the
gradient of the Lipschitz regularizer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .models import ForwardCache, Model, decode_edges, sigmoid


class StaleCacheError(RuntimeError):
    """A ForwardCache was used with weights other than those it was built from."""


@dataclass(frozen=True)
class LossValue:
    value: float
    kind: str  # "cross-entropy" | "edge-bce" | "regularizer" | "total" | "squared-error"

    def __float__(self):
        return self.value


def _check_fresh(model: Model, cache: ForwardCache):
    if cache.weights_digest != model.digest():
        raise StaleCacheError("forward cache does not match current model weights")


# ------------------------------------------------------------------ losses


def _mask_index(mask, n):
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise ValueError("loss mask selects no nodes")
    if idx.max() >= n:
        raise ValueError("mask index out of range")
    return idx


def log_softmax(y: np.ndarray) -> np.ndarray:
    shifted = y - y.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_loss(y, labels, mask) -> LossValue:
    y = np.asarray(y, dtype=np.float64)
    idx = _mask_index(mask, y.shape[0])
    lsm = log_softmax(y[idx])
    nll = -lsm[np.arange(idx.size), np.asarray(labels)[idx]]
    return LossValue(float(nll.mean()), "cross-entropy")


def ce_grad(y, labels, mask) -> np.ndarray:
    """d ce_loss / d Y (zero on unmasked rows)."""
    y = np.asarray(y, dtype=np.float64)
    idx = _mask_index(mask, y.shape[0])
    p = np.exp(log_softmax(y[idx]))
    p[np.arange(idx.size), np.asarray(labels)[idx]] -= 1.0
    out = np.zeros_like(y)
    out[idx] = p / idx.size
    return out


def bce_with_logits(logits, labels) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))


def bce_edge_loss(scores, labels) -> LossValue:
    logits = getattr(scores, "logits", scores)
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.size == 0 or logits.shape != labels.shape:
        raise ValueError("bce_edge_loss needs equally sized, non-empty scores and labels")
    return LossValue(float(bce_with_logits(logits, labels).mean()), "edge-bce")


def bce_edge_grad_z(z, edges, labels) -> np.ndarray:
    """d bce_edge_loss / d Z for the inner-product decoder."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    scores = decode_edges(z, edges)
    g = (sigmoid(scores.logits) - np.asarray(labels, dtype=np.float64)) / edges.shape[0]
    dz = np.zeros_like(z)
    np.add.at(dz, edges[:, 0], g[:, None] * z[edges[:, 1]])
    np.add.at(dz, edges[:, 1], g[:, None] * z[edges[:, 0]])
    return dz


def squared_error_loss(y, targets) -> LossValue:
    d = np.asarray(y) - np.asarray(targets)
    return LossValue(float(np.sum(d * d) / d.shape[0]), "squared-error")


def output_gradient(cache: ForwardCache, loss_kind: str, targets) -> np.ndarray:
    y = cache.output
    if loss_kind == "ce":
        labels, mask = targets
        return ce_grad(y, labels, mask)
    if loss_kind == "bce":
        edges, labels = targets
        return bce_edge_grad_z(y, edges, labels)
    if loss_kind == "mse":
        return 2.0 * (y - np.asarray(targets)) / y.shape[0]
    if loss_kind == "upstream":
        return np.asarray(targets, dtype=np.float64)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


# ---------------------------------------------------------------- backward


def backward_from_output(model: Model, cache: ForwardCache, d_out: np.ndarray) -> list:
    """Reverse pass through the layer stack given dL/dY; dropout masks are constants."""
    _check_fresh(model, cache)
    grads = [None] * model.n_layers
    dz = d_out
    for l in range(model.n_layers - 1, -1, -1):
        grads[l] = cache.propagated[l].T @ dz
        if l == 0:
            break
        dh = cache.ops[l].apply_t(dz @ model.weights[l].T)
        if cache.dropout_masks[l - 1] is not None:
            dh = dh * cache.dropout_masks[l - 1]
        if cache.relu_masks[l - 1] is not None:
            dh = dh * cache.relu_masks[l - 1]
        dz = dh
    return grads


def backward_params(model: Model, cache: ForwardCache, loss_kind: str, targets) -> list:
    """Gradients of the scalar task loss w.r.t. every weight matrix.

    ``loss_kind``: ``"ce"`` with ``(labels, mask)``, ``"bce"`` with
    ``(edges, edge_labels)``, ``"mse"`` with a target matrix, or
    ``"upstream"`` with dL/dY itself.
    """
    _check_fresh(model, cache)
    return backward_from_output(model, cache, output_gradient(cache, loss_kind, targets))


# --------------------------------------------------------------- jacobians


@dataclass
class NodeJacobianSet:
    """Per-node diagonal Jacobian blocks J_i = dY_i / dX_i (F_out x F_in).

    Stored factored as ``J_i^T = left @ diag(scale[i]) @ right``; an explicit
    ``(N, F_out, F_in)`` array may be supplied instead.
    """

    left: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    right: Optional[np.ndarray] = None
    explicit: Optional[np.ndarray] = None
    mask_digest: str = ""
    weights_digest: str = ""

    @classmethod
    def from_blocks(cls, blocks) -> "NodeJacobianSet":
        blocks = np.asarray(blocks, dtype=np.float64)
        if blocks.ndim != 3:
            raise ValueError("blocks must have shape (N, F_out, F_in)")
        return cls(explicit=blocks)

    @property
    def n_nodes(self) -> int:
        return self.explicit.shape[0] if self.explicit is not None else self.scale.shape[0]

    @property
    def out_dim(self) -> int:
        return self.explicit.shape[1] if self.explicit is not None else self.right.shape[1]

    @property
    def in_dim(self) -> int:
        return self.explicit.shape[2] if self.explicit is not None else self.left.shape[0]

    def block(self, i: int) -> np.ndarray:
        if self.explicit is not None:
            return self.explicit[i]
        return ((self.left * self.scale[i]) @ self.right).T

    def blocks(self) -> np.ndarray:
        if self.explicit is not None:
            return self.explicit
        return np.stack([self.block(i) for i in range(self.n_nodes)])

    def lb_rows(self, chunk: int = 512) -> np.ndarray:
        """N x F_out matrix of row norms ||J_ij|| (gradient norm of output j of node i)."""
        if self.explicit is not None:
            return np.sqrt(np.einsum("njf,njf->nj", self.explicit, self.explicit))
        left = self.left
        if left.shape[0] > left.shape[1]:
            # ||left v|| == ||R v|| for the QR factor R; keeps cost independent of F_in
            left = np.linalg.qr(left, mode="r")
        out = np.empty((self.n_nodes, self.out_dim))
        for s in range(0, self.n_nodes, chunk):
            b = self.scale[s:s + chunk, :, None] * self.right[None]
            c = np.einsum("kh,nhj->nkj", left, b)
            out[s:s + chunk] = np.sqrt(np.einsum("nkj,nkj->nj", c, c))
        return out


def _mask_digest(cache: ForwardCache) -> str:
    h = hashlib.blake2b(digest_size=16)
    for m in cache.relu_masks:
        if m is not None:
            h.update(np.packbits(m > 0).tobytes())
    return h.hexdigest()


def node_jacobians(model: Model, cache: ForwardCache) -> NodeJacobianSet:
    """Closed-form same-node Jacobian blocks for 1- and 2-layer stacks.

    Two layers: J_i^T = W1 diag(s_i) W2 with s = (P2 o P1^T) M1, where P_l is
    layer l's propagation operator and M1 the hidden ReLU mask. One layer:
    J_i^T = (P1)_ii W1.
    """
    _check_fresh(model, cache)
    if cache.dropout_active:
        raise ValueError("node_jacobians requires a dropout-free forward cache")
    n = cache.n_nodes
    if model.n_layers == 1:
        diag = cache.ops[0].diag(n)
        f_out = model.layers[0].out_dim
        scale = np.repeat(diag[:, None], f_out, axis=1)
        right = np.eye(f_out)
        left = model.weights[0]
    elif model.n_layers == 2:
        p1 = cache.ops[0].sparse(n)
        p2 = cache.ops[1].sparse(n)
        m1 = cache.relu_masks[0]
        if m1 is None:
            m1 = np.ones((n, model.layers[0].out_dim))
        weight = sp.csr_matrix(p2.multiply(p1.T))
        scale = np.asarray(weight @ m1)
        left, right = model.weights
    else:
        raise ValueError(f"no closed-form Jacobian for a {model.n_layers}-layer {model.arch}")
    return NodeJacobianSet(left=left, scale=scale, right=right,
                           mask_digest=_mask_digest(cache), weights_digest=cache.weights_digest)


# -------------------------------------------------------------- regularizer


@dataclass
class RegGradient:
    grads: list
    value: float  # ||J_{i*}||_F
    node: int
    degenerate: bool


def reg_gradient(model: Model, cache: ForwardCache, jacobians: NodeJacobianSet, node: int | None = None) -> RegGradient:
    """Gradient of ||J_{i*}||_F w.r.t. the weights with masks and i* frozen.

    i* is the row of the largest LB(J) row norm (lowest index on ties) unless
    ``node`` pins it explicitly.
    """
    _check_fresh(model, cache)
    if jacobians.explicit is not None:
        raise ValueError("reg_gradient needs factored jacobians from node_jacobians")
    if jacobians.weights_digest != cache.weights_digest:
        raise StaleCacheError("jacobians do not belong to this cache")
    if node is None:
        lb = jacobians.lb_rows()
        node = int(np.argmax(np.sqrt(np.einsum("ij,ij->i", lb, lb))))
    s = jacobians.scale[node]
    left, right = jacobians.left, jacobians.right
    a = (left * s) @ right  # J_{i*}^T
    f = float(np.sqrt(np.sum(a * a)))
    if f == 0.0:
        return RegGradient([np.zeros_like(w) for w in model.weights], 0.0, node, True)
    g_left = (a @ (s[:, None] * right).T) / f
    if model.n_layers == 1:
        grads = [g_left]
    else:
        g_right = ((left * s).T @ a) / f
        grads = [g_left, g_right]
    return RegGradient(grads, f, node, False)


# -------------------------------------------------------------- fd harness


def central_difference(f: Callable[[np.ndarray], float], point: np.ndarray, eps: float) -> np.ndarray:
    point = np.array(point, dtype=np.float64)
    out = np.empty_like(point)
    flat = point.reshape(-1)
    of = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(point)
        flat[k] = orig - eps
        fm = f(point)
        flat[k] = orig
        of[k] = (fp - fm) / (2.0 * eps)
    return out


def fd_check(f: Callable[[np.ndarray], float], analytic, point, eps: float = 1e-5) -> float:
    """Max over entries of |analytic - central difference| / max(|analytic|, 1e-8)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = central_difference(f, point, eps)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise ValueError("fd_check saw non-finite values")
    err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8)
    return float(err.max()) if err.size else 0.0

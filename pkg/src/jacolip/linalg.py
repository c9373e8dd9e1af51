"""Dense/sparse kernels and norms shared by every other module.

Dense matrices are plain float64 ``numpy.ndarray`` objects; sparse matrices
are ``scipy.sparse.csr_matrix`` with canonical (sorted, deduplicated)
indices.
"""

import numpy as np
import scipy.sparse as sp


def as_dense(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def as_csr(m) -> sp.csr_matrix:
    """Return ``m`` as a canonical float64 CSR matrix."""
    a = sp.csr_matrix(m, dtype=np.float64)
    a.sum_duplicates()
    a.sort_indices()
    return a


def sparse_identity(n: int) -> sp.csr_matrix:
    return sp.identity(n, dtype=np.float64, format="csr")


def matmul(a, b) -> np.ndarray:
    a = as_dense(a)
    b = as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def spmm(a, b) -> np.ndarray:
    """Sparse (CSR) times dense."""
    b = as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"spmm shape mismatch: {a.shape} x {b.shape}")
    return np.asarray(a @ b, dtype=np.float64)


def row_l2_norms(m) -> np.ndarray:
    m = as_dense(m)
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def norm_inf2(m) -> float:
    """(inf, 2)-norm: the largest row l2-norm."""
    m = as_dense(m)
    if m.size == 0:
        raise ValueError("norm_inf2 of an empty matrix")
    return float(row_l2_norms(m).max())


def frobenius(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator; ``stream`` selects an independent substream.

    Identical ``(seed, *stream)`` always yields an identical sequence.
    """
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(seq))

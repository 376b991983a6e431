"""Third-order tensor utilities: unfoldings, Khatri-Rao products, Kruskal forms.

Index convention
----------------
Every flattening in this module orders multi-indices with the lowest-numbered
dimension fastest (column-major).  For ``T`` of shape ``(d1, d2, d3)``:

* ``unfold(T, 0)`` has shape ``(d1, d2*d3)``; column ``k*d2 + j`` holds the
  fiber ``T[:, j, k]``.
* ``unfold(T, 1)`` has shape ``(d2, d1*d3)``; column ``k*d1 + i`` holds
  ``T[i, :, k]``.
* ``unfold(T, 2)`` has shape ``(d3, d1*d2)``; column ``j*d1 + i`` holds
  ``T[i, j, :]``.
* ``vectorize(T)[k*d1*d2 + j*d1 + i] == T[i, j, k]``.

With this ordering the Kruskal identities hold literally with the Khatri-Rao
product defined column-wise as ``kron(a_u, b_u)``:

    unfold(T, 0) == A @ khatri_rao(R, B).T
    unfold(T, 1) == B @ khatri_rao(R, A).T
    unfold(T, 2) == R @ khatri_rao(B, A).T
    vectorize(T) == khatri_rao(R, khatri_rao(B, A)) @ ones(rank)

(The popular alternative that pairs mode-1 columns as ``j*d3 + k`` breaks the
Kronecker expansion of the column fibers; we do not use it anywhere.)
"""

from __future__ import annotations

import numpy as np


def outer3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Rank-1 tensor ``T[i, j, k] = a[i] * b[j] * c[k]``."""
    return np.einsum("i,j,k->ijk", a, b, c)


def unfold(tensor: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding (0-based) under the column-major convention."""
    if tensor.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={tensor.ndim}")
    if mode not in (0, 1, 2):
        raise ValueError(f"mode must be 0, 1 or 2, got {mode}")
    return np.reshape(
        np.moveaxis(tensor, mode, 0), (tensor.shape[mode], -1), order="F"
    )


def fold(matrix: np.ndarray, mode: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given shape."""
    rest = [shape[ax] for ax in range(3) if ax != mode]
    moved = np.reshape(matrix, (shape[mode], rest[0], rest[1]), order="F")
    return np.moveaxis(moved, 0, mode)


def vectorize(tensor: np.ndarray) -> np.ndarray:
    """Column-major vectorization (dimension 1 fastest)."""
    return np.reshape(tensor, -1, order="F")


def tensor_from_vec(vec: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    return np.reshape(vec, shape, order="F")


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; column u is ``kron(a[:, u], b[:, u])``."""
    if a.shape[1] != b.shape[1]:
        raise ValueError("factors must have the same number of columns")
    out = np.einsum("iu,ju->iju", a, b)
    return out.reshape(a.shape[0] * b.shape[0], a.shape[1])


def mat_fold(vec: np.ndarray, n_rows: int, n_cols: int) -> np.ndarray:
    """Reshape a length ``n_rows*n_cols`` vector column-by-column into a matrix.

    Inverse of column-stacking: ``mat_fold(v, P, Q)[p, q] == v[q*P + p]``, so
    for ``v = kron(r, a)`` the result is exactly ``outer(a, r)``.
    """
    return np.reshape(vec, (n_rows, n_cols), order="F")


def kruskal_build(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Dense tensor of the Kruskal form with factor matrices ``(a, b, c)``.

    ``T[i, j, k] = sum_u a[i, u] * b[j, u] * c[k, u]``; any column scaling
    (path gains) is expected to be absorbed into one factor.
    """
    if not (a.shape[1] == b.shape[1] == c.shape[1]):
        raise ValueError("factors must share the rank dimension")
    return np.einsum("iu,ju,ku->ijk", a, b, c)


def kruskal_inner(
    first: tuple[np.ndarray, np.ndarray, np.ndarray],
    second: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> complex:
    """Frobenius inner product ``<X, Y> = sum(conj(X) * Y)`` of two Kruskal forms.

    Uses the Gram identity ``<X, Y> = sum_{u,v} (A^H A')(B^H B')(C^H C')`` so the
    dense tensors are never formed.
    """
    a1, b1, c1 = first
    a2, b2, c2 = second
    gram = (a1.conj().T @ a2) * (b1.conj().T @ b2) * (c1.conj().T @ c2)
    return complex(gram.sum())


def kruskal_norm_sq(factors: tuple[np.ndarray, np.ndarray, np.ndarray]) -> float:
    """Squared Frobenius norm of a Kruskal form (Gram identity, non-negative)."""
    return max(kruskal_inner(factors, factors).real, 0.0)

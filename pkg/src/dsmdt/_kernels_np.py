"""Pure-numpy kernel backend (mirror of the compiled versions).

Both backends work on *unnormalized* steering phases exp(-1j*pi*i*x); the
callers only ever use argmax locations and normalized ratios, which are
invariant to the 1/X steering scale.
"""

from __future__ import annotations

import numpy as np


def music_spectrum_ula(basis_h: np.ndarray, grid: np.ndarray, norm_sq: float) -> np.ndarray:
    """Subspace pseudospectrum on a ULA steering grid.

    ``basis_h`` holds the conjugate-transposed *signal* subspace basis
    (n_sources x m, orthonormal rows).  For unit-norm-squared steering
    ``norm_sq = m`` the noise-subspace projection satisfies
    ``||En^H a||^2 = norm_sq - ||basis_h @ a||^2``, so the returned value is
    the classic 1 / ||En^H a||^2 without forming the large noise basis.
    """
    m = basis_h.shape[1]
    a = np.exp((-1j * np.pi) * np.outer(np.arange(m), grid))
    proj = basis_h @ a
    denom = norm_sq - np.einsum("kg,kg->g", proj, proj.conj()).real
    return 1.0 / np.maximum(denom, norm_sq * 1e-16)


def upa_corr_scores(
    theta_t: np.ndarray,
    r: np.ndarray,
    w_grid: np.ndarray,
    s_grid: np.ndarray,
    n1: int,
    n2: int,
) -> np.ndarray:
    """Normalized correlation |a~^H r| / ||a~|| on a 2-D UPA grid.

    ``theta_t`` is the Q x N transposed RIS configuration and
    ``a~(w, s) = theta_t @ kron(a_ula(n1, w), a_ula(n2, s))``.  Returns a
    (len(w_grid), len(s_grid)) array.
    """
    a1 = np.exp((-1j * np.pi) * np.outer(np.arange(n1), w_grid))
    a2 = np.exp((-1j * np.pi) * np.outer(np.arange(n2), s_grid))
    awin = (a1[:, None, :, None] * a2[None, :, None, :]).reshape(
        n1 * n2, len(w_grid) * len(s_grid)
    )
    proj = theta_t @ awin
    num = np.abs(np.einsum("qg,q->g", proj.conj(), r))
    den = np.sqrt(np.einsum("qg,qg->g", proj, proj.conj()).real)
    den = np.maximum(den, 1e-300)
    return (num / den).reshape(len(w_grid), len(s_grid))

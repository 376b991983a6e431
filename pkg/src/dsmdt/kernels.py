"""Kernel backend selection: compiled extension if available, numpy otherwise.

Set ``DSMDT_PURE_PYTHON=1`` to force the numpy fallback.  ``KERNEL_BACKEND``
reports which one is active; both expose identical signatures and agree to
floating-point reordering (asserted in the test suite and timed in
``benchmarks/kernel_bench.py``).
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_np

if os.environ.get("DSMDT_PURE_PYTHON"):
    _impl = _kernels_np
    KERNEL_BACKEND = "numpy"
else:
    try:
        from . import _kernels_cy as _impl

        KERNEL_BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_np
        KERNEL_BACKEND = "numpy"


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def music_spectrum_ula(basis_h, grid, norm_sq):
    """See :func:`dsmdt._kernels_np.music_spectrum_ula`."""
    return _impl.music_spectrum_ula(
        _c(basis_h, np.complex128), _c(grid, np.float64), float(norm_sq)
    )


def upa_corr_scores(theta_t, r, w_grid, s_grid, n1, n2):
    """See :func:`dsmdt._kernels_np.upa_corr_scores`."""
    return _impl.upa_corr_scores(
        _c(theta_t, np.complex128),
        _c(r, np.complex128),
        _c(w_grid, np.float64),
        _c(s_grid, np.float64),
        int(n1),
        int(n2),
    )

# Compiled kernel backend: fused steering-grid evaluation for the subspace
# spectrum search and the 2-D RIS-response correlation.  Matches
# _kernels_np.py to floating-point reordering.

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, sqrt
from scipy.linalg.cython_blas cimport zgemm

cnp.import_array()

cdef double PI = 3.141592653589793238462643383279502884


def music_spectrum_ula(
    const double complex[:, ::1] basis_h,
    const double[::1] grid,
    double norm_sq,
):
    cdef Py_ssize_t n_src = basis_h.shape[0]
    cdef Py_ssize_t m = basis_h.shape[1]
    cdef Py_ssize_t n_grid = grid.shape[0]
    out_arr = np.empty(n_grid, dtype=np.float64)
    acc_arr = np.empty(2 * n_src, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] acc = acc_arr
    cdef Py_ssize_t g, i, k
    cdef double sr, si, pr, pi, tmp, br, bi, power, denom
    cdef double floor_val = norm_sq * 1e-16
    for g in range(n_grid):
        sr = cos(-PI * grid[g])
        si = sin(-PI * grid[g])
        pr = 1.0
        pi = 0.0
        for k in range(2 * n_src):
            acc[k] = 0.0
        for i in range(m):
            for k in range(n_src):
                br = basis_h[k, i].real
                bi = basis_h[k, i].imag
                acc[2 * k] += br * pr - bi * pi
                acc[2 * k + 1] += br * pi + bi * pr
            tmp = pr * sr - pi * si
            pi = pr * si + pi * sr
            pr = tmp
        power = 0.0
        for k in range(n_src):
            power += acc[2 * k] * acc[2 * k] + acc[2 * k + 1] * acc[2 * k + 1]
        denom = norm_sq - power
        if denom < floor_val:
            denom = floor_val
        out[g] = 1.0 / denom
    return out_arr


cdef void _phase_table(const double[::1] grid, Py_ssize_t n, double complex[:, ::1] table):
    # table[i, g] = exp(-1j*pi*i*grid[g]) via per-column recurrence
    cdef Py_ssize_t g, i
    cdef double sr, si, pr, pi, tmp
    for g in range(grid.shape[0]):
        sr = cos(-PI * grid[g])
        si = sin(-PI * grid[g])
        pr = 1.0
        pi = 0.0
        for i in range(n):
            table[i, g].real = pr
            table[i, g].imag = pi
            tmp = pr * sr - pi * si
            pi = pr * si + pi * sr
            pr = tmp


def upa_corr_scores(
    const double complex[:, ::1] theta_t,
    const double complex[::1] r,
    const double[::1] w_grid,
    const double[::1] s_grid,
    Py_ssize_t n1,
    Py_ssize_t n2,
):
    cdef Py_ssize_t nq = theta_t.shape[0]
    cdef Py_ssize_t n = theta_t.shape[1]
    cdef Py_ssize_t gw = w_grid.shape[0]
    cdef Py_ssize_t gs = s_grid.shape[0]
    cdef Py_ssize_t n_grid = gw * gs
    if n != n1 * n2:
        raise ValueError("theta_t column count must equal n1*n2")

    a1_arr = np.empty((n1, gw), dtype=np.complex128)
    a2_arr = np.empty((n2, gs), dtype=np.complex128)
    cdef double complex[:, ::1] a1 = a1_arr
    cdef double complex[:, ::1] a2 = a2_arr
    _phase_table(w_grid, n1, a1)
    _phase_table(s_grid, n2, a2)

    # awin row g = kron(a1[:, gw], a2[:, gs]); C-contig (n_grid, n) is the
    # column-major (n, n_grid) operand expected by zgemm.
    awin_arr = np.empty((n_grid, n), dtype=np.complex128)
    proj_arr = np.empty((n_grid, nq), dtype=np.complex128)
    out_arr = np.empty((gw, gs), dtype=np.float64)
    cdef double complex[:, ::1] awin = awin_arr
    cdef double complex[:, ::1] proj = proj_arr
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t iw, js, i, j, g, q
    cdef double complex x1
    for iw in range(gw):
        for js in range(gs):
            g = iw * gs + js
            for i in range(n1):
                x1 = a1[i, iw]
                for j in range(n2):
                    awin[g, i * n2 + j] = x1 * a2[j, js]

    cdef int bm = <int> nq, bn = <int> n_grid, bk = <int> n
    cdef int lda = <int> n, ldb = <int> n, ldc = <int> nq
    cdef double complex one = 1.0, zero = 0.0
    # theta_t C-contig (nq, n) is column-major (n, nq); transpose gives Q x N.
    zgemm("T", "N", &bm, &bn, &bk, &one,
          <double complex*> &theta_t[0, 0], &lda,
          <double complex*> &awin[0, 0], &ldb,
          &zero, <double complex*> &proj[0, 0], &ldc)

    cdef double den, nr, ni, ar, ai, rr, ri
    for iw in range(gw):
        for js in range(gs):
            g = iw * gs + js
            den = 0.0
            nr = 0.0
            ni = 0.0
            for q in range(nq):
                ar = proj[g, q].real
                ai = proj[g, q].imag
                rr = r[q].real
                ri = r[q].imag
                den += ar * ar + ai * ai
                # conj(proj) * r
                nr += ar * rr + ai * ri
                ni += ar * ri - ai * rr
            den = sqrt(den)
            if den < 1e-300:
                den = 1e-300
            out[iw, js] = sqrt(nr * nr + ni * ni) / den
    return out_arr

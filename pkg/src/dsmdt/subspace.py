"""Subspace estimation primitives: covariance, MDL, MUSIC, 2-D correlation.

The pseudospectrum is evaluated through the signal-subspace identity
``||En^H a||^2 = ||a||^2 - ||Us^H a||^2`` (En, Us orthonormal complements), so
only the handful of signal eigenvectors ever touch the grid kernels.  Search
ranges: directional cosines are sampled on [0, 1); cascaded sums of two such
draws live on [0, 2), which is exactly one period of the steering phase, so
those grids wrap circularly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels


@dataclass(frozen=True)
class MusicGrid:
    """Grid-search spec: coarse scan plus shrinking local refinement.

    Refinement round t re-samples ``refine_points`` points on a window of
    half-width ``cell * refine_shrink**t`` around the incumbent, so the final
    resolution is well below ``(hi - lo) * refine_shrink**refine_iters /
    coarse`` while never leaving the incumbent's coarse cell.
    """

    lo: float = 0.0
    hi: float = 1.0
    coarse: int = 512
    refine_points: int = 33
    refine_iters: int = 3
    refine_shrink: float = 0.1
    wrap: bool = False

    def __post_init__(self):
        if self.hi <= self.lo:
            raise ValueError("grid needs hi > lo")
        if self.coarse < 8 or self.refine_points < 3:
            raise ValueError("grid too small")

    @property
    def cell(self) -> float:
        return (self.hi - self.lo) / self.coarse

    @property
    def resolution(self) -> float:
        return (
            2.0
            * self.cell
            * self.refine_shrink ** (self.refine_iters - 1)
            / (self.refine_points - 1)
        )

    def coarse_points(self) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * np.arange(self.coarse) / self.coarse


def default_phi_grid() -> MusicGrid:
    return MusicGrid(0.0, 1.0, coarse=512, wrap=False)


def default_tau_grid() -> MusicGrid:
    return MusicGrid(0.0, 2.0, coarse=512, wrap=True)


def default_aoa_grid() -> tuple[MusicGrid, MusicGrid]:
    g = MusicGrid(0.0, 2.0, coarse=64, refine_points=17, wrap=True)
    return g, g


def sample_covariance(x: np.ndarray) -> np.ndarray:
    """(1/n) X X^H for an m x n snapshot matrix."""
    return x @ x.conj().T / x.shape[1]


def eig_descending(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hermitian eigendecomposition with eigenvalues sorted descending."""
    vals, vecs = np.linalg.eigh(r)
    return vals[::-1], vecs[:, ::-1]


def mdl_detect(
    eigenvalues: np.ndarray, n_snapshots: int, max_sources: int | None = None
) -> int:
    """Source count by minimum description length.

    ``MDL(k) = -n (m-k) log(GM_k / AM_k) + 0.5 k (2m - k) log n`` where GM/AM
    are the geometric/arithmetic means of the m-k smallest eigenvalues
    (descending input).  Eigenvalues are clipped at ``max * 1e-12`` (double
    precision floor) so exact low-rank covariances behave.  Ties break toward
    the smaller count.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    m = len(lam)
    if n_snapshots < 2 or m < 2:
        raise ValueError("need at least 2 eigenvalues and 2 snapshots")
    if np.any(np.diff(lam) > 1e-9 * max(lam[0], 1e-300)):
        raise ValueError("eigenvalues must be sorted descending")
    if lam[0] <= 0:
        return 0
    lam = np.maximum(lam, lam[0] * 1e-12)
    kmax = m - 1 if max_sources is None else min(max_sources, m - 1)
    log_lam = np.log(lam)
    crit = np.empty(kmax + 1)
    for k in range(kmax + 1):
        tail = m - k
        log_gm = np.mean(log_lam[k:])
        log_am = np.log(np.mean(lam[k:]))
        crit[k] = -n_snapshots * tail * (log_gm - log_am) + 0.5 * k * (
            2 * m - k
        ) * np.log(n_snapshots)
    return int(np.argmin(crit))


def _local_maxima(s: np.ndarray, wrap: bool) -> np.ndarray:
    left = np.roll(s, 1)
    right = np.roll(s, -1)
    if not wrap:
        left = left.copy()
        right = right.copy()
        left[0] = -np.inf
        right[-1] = -np.inf
    idx = np.nonzero((s > left) & (s >= right))[0]
    if len(idx) == 0:
        idx = np.array([int(np.argmax(s))])
    return idx


def _refine_1d(evalf, grid: MusicGrid, center: float) -> float:
    c = center
    for t in range(grid.refine_iters):
        h = grid.cell * grid.refine_shrink**t
        pts = np.linspace(c - h, c + h, grid.refine_points)
        if not grid.wrap:
            pts = np.clip(pts, grid.lo, grid.hi)
        vals = evalf(pts)
        c = float(pts[int(np.argmax(vals))])
    if grid.wrap:
        c = float(np.mod(c - grid.lo, grid.hi - grid.lo) + grid.lo)
    return c


def _search_1d(
    basis_h: np.ndarray,
    m: int,
    n_sources: int,
    grid: MusicGrid,
    min_peak_ratio: float | None = None,
) -> tuple[np.ndarray, bool]:
    evalf = lambda pts: kernels.music_spectrum_ula(basis_h, pts, float(m))
    pts = grid.coarse_points()
    s = evalf(pts)
    idx = _local_maxima(s, grid.wrap)
    if min_peak_ratio is not None:
        # Floor ripples form local maxima at about the spectrum median while
        # genuine sources tower decades above it; dropping sub-threshold
        # maxima keeps merged or absent sources from minting phantom ones.
        sig = idx[s[idx] >= min_peak_ratio * np.median(s)]
        if len(sig) > 0:
            idx = sig
    # strongest peaks first; ties toward the smaller parameter value
    order = np.lexsort((idx, -s[idx]))
    chosen = idx[order[:n_sources]]
    refined = [_refine_1d(evalf, grid, float(pts[i])) for i in chosen]
    return np.sort(np.asarray(refined)), len(refined) < n_sources


def music_from_basis(
    basis_h: np.ndarray,
    m: int,
    n_sources: int,
    grid: MusicGrid | None = None,
    min_peak_ratio: float | None = None,
) -> tuple[np.ndarray, bool]:
    """MUSIC search given a precomputed conjugate-transposed signal basis."""
    grid = grid or default_phi_grid()
    return _search_1d(
        np.ascontiguousarray(basis_h), m, n_sources, grid, min_peak_ratio
    )


def root_music_from_basis(
    basis_h: np.ndarray, m: int, n_sources: int
) -> tuple[np.ndarray, bool]:
    """Polynomial-rooting MUSIC for the ULA steering family (period-2 x).

    The null spectrum a(x)^H (I - S S^H) a(x) is a Laurent polynomial in
    z = exp(-j pi x), so source locations are roots instead of sampled-grid
    maxima: pairs closer than a beamwidth, which merge into one maximum of
    the sampled spectrum, still produce distinct roots on the unit circle.
    Candidates are the inside-the-circle roots nearest the circle (each has a
    conjugate-reciprocal partner outside; exactly-on-circle twins share an
    angle and are deduplicated).  Returns (ascending estimates, degraded).
    """
    if not 1 <= n_sources < m:
        raise ValueError(f"need 1 <= n_sources < {m}, got {n_sources}")
    basis = np.asarray(basis_h).conj().T
    proj = np.eye(m) - basis @ basis.conj().T
    coeffs = np.array([np.trace(proj, offset=k) for k in range(m - 1, -m, -1)])
    roots = np.roots(coeffs)
    roots = roots[np.abs(roots) <= 1.0]
    picked: list = []
    for z in roots[np.argsort(1.0 - np.abs(roots))]:
        if len(picked) == n_sources:
            break
        if all(abs(np.angle(z / w)) > 1e-9 for w in picked):
            picked.append(z)
    est = np.sort(np.mod(-np.angle(np.array(picked)) / np.pi, 2.0))
    return est, len(picked) < n_sources


def root_music_from_snapshots(x: np.ndarray, n_sources: int) -> tuple[np.ndarray, bool]:
    """Polynomial-rooting MUSIC straight from an m x n snapshot matrix."""
    m, n = x.shape
    if not 1 <= n_sources < m:
        raise ValueError(f"need 1 <= n_sources < {m}, got {n_sources}")
    if n_sources > n:
        raise ValueError("more sources than snapshots")
    u, _, _ = np.linalg.svd(x, full_matrices=False)
    basis_h = np.ascontiguousarray(u[:, :n_sources].conj().T)
    return root_music_from_basis(basis_h, m, n_sources)


def _signal_basis_from_cov(r: np.ndarray, n_sources: int) -> np.ndarray:
    m = r.shape[0]
    _, vecs = scipy.linalg.eigh(r, subset_by_index=[m - n_sources, m - 1])
    return np.ascontiguousarray(vecs[:, ::-1].conj().T)


def music_1d(
    r: np.ndarray,
    n_sources: int,
    grid: MusicGrid | None = None,
    min_peak_ratio: float | None = None,
) -> tuple[np.ndarray, bool]:
    """MUSIC parameter estimates from an m x m sample covariance.

    Returns (ascending estimates, degraded) where ``degraded`` is True when
    the coarse spectrum had fewer local maxima than requested; the caller
    decides how to proceed with the shorter list.
    """
    grid = grid or default_phi_grid()
    m = r.shape[0]
    if not 1 <= n_sources < m:
        raise ValueError(f"need 1 <= n_sources < {m}, got {n_sources}")
    return _search_1d(
        _signal_basis_from_cov(r, n_sources), m, n_sources, grid, min_peak_ratio
    )


def music_from_snapshots(
    x: np.ndarray,
    n_sources: int,
    grid: MusicGrid | None = None,
    min_peak_ratio: float | None = None,
) -> tuple[np.ndarray, bool]:
    """MUSIC straight from an m x n snapshot matrix.

    The left singular vectors of X are the eigenvectors of X X^H / n, so this
    matches :func:`music_1d` on ``sample_covariance(x)`` while skipping the
    m x m eigendecomposition (n << m in the delay stage).
    """
    grid = grid or default_phi_grid()
    m, n = x.shape
    if not 1 <= n_sources < m:
        raise ValueError(f"need 1 <= n_sources < {m}, got {n_sources}")
    if n_sources > n:
        raise ValueError("more sources than snapshots")
    u, _, _ = np.linalg.svd(x, full_matrices=False)
    basis_h = np.ascontiguousarray(u[:, :n_sources].conj().T)
    return _search_1d(basis_h, m, n_sources, grid, min_peak_ratio)


def spectrum_1d(
    r: np.ndarray, n_sources: int, grid: MusicGrid | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Coarse pseudospectrum (grid points, values) for diagnostics/dumps."""
    grid = grid or default_phi_grid()
    basis_h = _signal_basis_from_cov(r, n_sources)
    pts = grid.coarse_points()
    return pts, kernels.music_spectrum_ula(basis_h, pts, float(r.shape[0]))


@dataclass
class CorrCache:
    """Per-trial precomputation for the coarse 2-D correlation scan."""

    theta_t: np.ndarray
    proj_h: np.ndarray
    norms: np.ndarray
    w_pts: np.ndarray
    s_pts: np.ndarray
    n1: int
    n2: int
    grid_w: MusicGrid = field(repr=False, default=None)
    grid_s: MusicGrid = field(repr=False, default=None)


def build_corr_cache(
    theta: np.ndarray,
    n1: int,
    n2: int,
    grid_w: MusicGrid | None = None,
    grid_s: MusicGrid | None = None,
) -> CorrCache:
    """Project every coarse UPA steering vector through theta once."""
    if grid_w is None or grid_s is None:
        gw, gs = default_aoa_grid()
        grid_w = grid_w or gw
        grid_s = grid_s or gs
    w_pts = grid_w.coarse_points()
    s_pts = grid_s.coarse_points()
    a1 = np.exp((-1j * np.pi) * np.outer(np.arange(n1), w_pts))
    a2 = np.exp((-1j * np.pi) * np.outer(np.arange(n2), s_pts))
    awin = (a1[:, None, :, None] * a2[None, :, None, :]).reshape(
        n1 * n2, len(w_pts) * len(s_pts)
    )
    theta_t = np.ascontiguousarray(theta.T)
    proj = theta_t @ awin
    norms = np.maximum(np.sqrt(np.einsum("qg,qg->g", proj, proj.conj()).real), 1e-300)
    return CorrCache(
        theta_t=theta_t,
        proj_h=np.ascontiguousarray(proj.conj().T),
        norms=norms,
        w_pts=w_pts,
        s_pts=s_pts,
        n1=n1,
        n2=n2,
        grid_w=grid_w,
        grid_s=grid_s,
    )


def correlate_2d(
    r: np.ndarray,
    theta: np.ndarray | None = None,
    n1: int | None = None,
    n2: int | None = None,
    grid_w: MusicGrid | None = None,
    grid_s: MusicGrid | None = None,
    cache: CorrCache | None = None,
) -> tuple[float, float, float]:
    """Maximize |a~(w, s)^H r| / ||a~(w, s)|| over a 2-D steering grid.

    ``a~ = theta^T kron(a_ula(n1, w), a_ula(n2, s))``.  Pass either ``theta``
    with (n1, n2) or a prebuilt ``cache``.  Returns (w, s, score); argmax
    ties break toward the smaller w, then smaller s.
    """
    if cache is None:
        if theta is None or n1 is None or n2 is None:
            raise ValueError("need theta/n1/n2 when no cache is given")
        cache = build_corr_cache(theta, n1, n2, grid_w, grid_s)
    grid_w = cache.grid_w
    grid_s = cache.grid_s
    num = np.abs(cache.proj_h @ r)
    flat = int(np.argmax(num / cache.norms))
    iw, js = divmod(flat, len(cache.s_pts))
    cw = float(cache.w_pts[iw])
    cs = float(cache.s_pts[js])
    score = 0.0
    for t in range(grid_w.refine_iters):
        hw = grid_w.cell * grid_w.refine_shrink**t
        hs = grid_s.cell * grid_s.refine_shrink**t
        pw = np.linspace(cw - hw, cw + hw, grid_w.refine_points)
        ps = np.linspace(cs - hs, cs + hs, grid_s.refine_points)
        if not grid_w.wrap:
            pw = np.clip(pw, grid_w.lo, grid_w.hi)
        if not grid_s.wrap:
            ps = np.clip(ps, grid_s.lo, grid_s.hi)
        scores = kernels.upa_corr_scores(cache.theta_t, r, pw, ps, cache.n1, cache.n2)
        best = int(np.argmax(scores))
        bw, bs = divmod(best, len(ps))
        cw = float(pw[bw])
        cs = float(ps[bs])
        score = float(scores.flat[best])
    if grid_w.wrap:
        cw = float(np.mod(cw - grid_w.lo, grid_w.hi - grid_w.lo) + grid_w.lo)
    if grid_s.wrap:
        cs = float(np.mod(cs - grid_s.lo, grid_s.hi - grid_s.lo) + grid_s.lo)
    return cw, cs, score

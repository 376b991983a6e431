"""The DS-MDT estimation pipeline.

Stages, in order:

1. Reference UE selection by measurement energy (optionally mis-selected with
   probability ``p_mis`` to study robustness).
2. Joint common-AoD estimation: the K mode-2 unfoldings share the same BS
   steering factor, so one stacked covariance + MDL + root-MUSIC yields the
   shared ``phi`` set and its count L1_hat.
3. Reference delays: project the reference mode-2 unfolding onto the AoD
   groups, run per-group delay MUSIC, exploit the additive offset feature
   (row ell - row 1 is constant across columns) to pair rows, reject spurious
   columns by MAD, and extract the per-row delay offsets.
4. Other UEs reuse those offsets: one delay MUSIC run on group 1 only.
5. RIS-side AoA via least squares against the Khatri-Rao of the first two
   factors followed by a normalized 2-D steering correlation per composite
   path (reference: all columns; others: group-1 columns plus the reference's
   AoA offsets).
6. Path gains by least squares on the vectorized tensor; the multiplicative
   offset feature of the gain rows detects the per-UE path count for
   non-reference UEs (one re-solve after dropping outlier columns).
7. A validity indicator checks row-difference constancy of the delay and
   log-gain matrices; an invalid trial re-runs with offset sharing disabled
   (every UE processed like the reference).

``dsmdt_kpn`` injects the true path counts (skipping MDL and the MAD count
detection); ``independent_fallback`` runs stage 7's fallback unconditionally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import expand_phi, flatten_paths, ula_matrix, upa_matrix
from .scenario import MeasurementSet
from .stats import (
    circ_mean_about,
    circ_median,
    circ_residual,
    mad_keep_mask,
    match_by_circular_offset,
    wrap_to,
)
from .subspace import (
    CorrCache,
    MusicGrid,
    build_corr_cache,
    correlate_2d,
    default_aoa_grid,
    default_tau_grid,
    eig_descending,
    mdl_detect,
    music_from_snapshots,
    root_music_from_basis,
    root_music_from_snapshots,
)
from .tensor_ops import khatri_rao, kruskal_build, unfold

ALGORITHMS = ("dsmdt", "dsmdt_kpn", "independent_fallback")


class EstimationError(RuntimeError):
    """A pipeline stage could not produce usable estimates."""


@dataclass
class PipelineOptions:
    """Estimator knobs; defaults reproduce the standard configuration."""

    algorithm: str = "dsmdt"
    epsilon: float = 0.1
    k0: int | None = None
    p_mis: float = 0.0
    l2_overestimate: int | None = None
    max_common_paths: int | None = None
    mad_threshold: float = 3.0
    tau_grid: MusicGrid = field(default_factory=default_tau_grid)
    aoa_grid_w: MusicGrid = field(default_factory=lambda: default_aoa_grid()[0])
    aoa_grid_s: MusicGrid = field(default_factory=lambda: default_aoa_grid()[1])

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if not 0.0 <= self.p_mis <= 1.0:
            raise ValueError("p_mis must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class EstimateReport:
    """Estimates and bookkeeping for one trial.

    Per-UE matrices are L1_hat x L2_hat_k (``None`` for a failed UE).
    Non-reference tau/omega/psi rows beyond the first are constructed as
    row 1 + offset, so their row differences are constant by construction.
    """

    algorithm: str
    dims: dict
    reference_index: int
    l1_hat: int
    phi: np.ndarray
    tau_offsets: np.ndarray
    omega_offsets: np.ndarray
    psi_offsets: np.ndarray
    tau: list
    omega: list
    psi: list
    beta: list
    l2_hat: list
    reliable: list
    validity: bool
    fallback_used: bool = False
    failure: bool = False
    failure_reason: str | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.tau)

    def factors(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Kruskal factors (A, B, D) of UE k's estimated channel tensor."""
        if self.tau[k] is None:
            raise EstimationError(f"UE {k} produced no estimates")
        d = self.dims
        n_cols = self.tau[k].shape[1]
        a = ula_matrix(d["p"], flatten_paths(self.tau[k]))
        b = ula_matrix(d["m"], expand_phi(self.phi, n_cols))
        dd = upa_matrix(
            d["n1"], d["n2"], flatten_paths(self.omega[k]), flatten_paths(self.psi[k])
        ) * flatten_paths(self.beta[k])
        return a, b, dd

    def channel_estimate(self, k: int) -> np.ndarray:
        """Dense P x M x N estimated channel tensor for UE k."""
        return kruskal_build(*self.factors(k))

    def to_json(self) -> str:
        def real_mat(x):
            return None if x is None else np.asarray(x, dtype=float).tolist()

        def complex_mat(x):
            if x is None:
                return None
            x = np.asarray(x, dtype=complex)
            return {"re": x.real.tolist(), "im": x.imag.tolist()}

        doc = {
            "format": "dsmdt-report-v1",
            "algorithm": self.algorithm,
            "dims": self.dims,
            "reference_index": self.reference_index,
            "l1_hat": self.l1_hat,
            "phi": real_mat(self.phi),
            "tau_offsets": real_mat(self.tau_offsets),
            "omega_offsets": real_mat(self.omega_offsets),
            "psi_offsets": real_mat(self.psi_offsets),
            "tau": [real_mat(x) for x in self.tau],
            "omega": [real_mat(x) for x in self.omega],
            "psi": [real_mat(x) for x in self.psi],
            "beta": [complex_mat(x) for x in self.beta],
            "l2_hat": list(self.l2_hat),
            "reliable": [bool(x) for x in self.reliable],
            "validity": self.validity,
            "fallback_used": self.fallback_used,
            "failure": self.failure,
            "failure_reason": self.failure_reason,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        doc = json.loads(text)
        if doc.get("format") != "dsmdt-report-v1":
            raise ValueError(f"unsupported report format: {doc.get('format')!r}")

        def real_mat(x):
            return None if x is None else np.asarray(x, dtype=float)

        def complex_mat(x):
            if x is None:
                return None
            return np.asarray(x["re"]) + 1j * np.asarray(x["im"])

        return cls(
            algorithm=doc["algorithm"],
            dims=doc["dims"],
            reference_index=doc["reference_index"],
            l1_hat=doc["l1_hat"],
            phi=real_mat(doc["phi"]),
            tau_offsets=real_mat(doc["tau_offsets"]),
            omega_offsets=real_mat(doc["omega_offsets"]),
            psi_offsets=real_mat(doc["psi_offsets"]),
            tau=[real_mat(x) for x in doc["tau"]],
            omega=[real_mat(x) for x in doc["omega"]],
            psi=[real_mat(x) for x in doc["psi"]],
            beta=[complex_mat(x) for x in doc["beta"]],
            l2_hat=list(doc["l2_hat"]),
            reliable=[bool(x) for x in doc["reliable"]],
            validity=doc["validity"],
            fallback_used=doc["fallback_used"],
            failure=doc["failure"],
            failure_reason=doc["failure_reason"],
        )


def select_reference(
    ms: MeasurementSet, p_mis: float = 0.0, rng: np.random.Generator | None = None
) -> int:
    """Index of the most energetic measurement tensor (ties: smaller index).

    With probability ``p_mis`` the *least* energetic UE is returned instead,
    emulating a mis-informed selection.
    """
    energies = np.array([np.linalg.norm(t) ** 2 for t in ms.tensors])
    if p_mis > 0.0:
        if rng is None:
            raise ValueError("p_mis > 0 requires an rng")
        if rng.random() < p_mis:
            return int(np.argmin(energies))
    return int(np.argmax(energies))


def estimate_common_aod(
    ms: MeasurementSet,
    l1_known: int | None = None,
    max_sources: int | None = None,
) -> tuple[np.ndarray, int]:
    """Shared AoD set from the stacked mode-2 unfoldings of all K tensors.

    Returns (ascending phi estimates, L1_hat), with L1_hat from MDL unless
    ``l1_known`` injects it.  Locations come from polynomial rooting of the
    null spectrum rather than a sampled search: with P*Q*K snapshots behind
    the covariance, AoD pairs far closer than a beamwidth remain separable,
    which a sampled spectrum (single merged maximum) cannot deliver.
    """
    p, m, q = ms.tensors[0].shape
    n_snap = p * q * ms.n_users
    cov = np.zeros((m, m), dtype=complex)
    for t in ms.tensors:
        y2 = unfold(t, 1)
        cov += y2 @ y2.conj().T
    cov /= n_snap
    vals, vecs = eig_descending(cov)
    l1_hat = l1_known if l1_known is not None else mdl_detect(vals, n_snap, max_sources)
    if l1_hat < 1:
        raise EstimationError("no common paths detected")
    basis_h = vecs[:, :l1_hat].conj().T
    phi, degraded = root_music_from_basis(basis_h, m, l1_hat)
    if degraded:
        l1_hat = len(phi)
        if l1_hat < 1:
            raise EstimationError("empty AoD spectrum")
    return phi, l1_hat


def _project_rows(y: np.ndarray, phi_hat: np.ndarray) -> np.ndarray:
    """LS projection of the mode-2 unfolding onto the AoD steering columns."""
    b = ula_matrix(y.shape[1], phi_hat)
    return np.linalg.lstsq(b, unfold(y, 1), rcond=None)[0]


# A sampled delay spectrum merges paths closer than about a beamwidth and
# mints a phantom elsewhere; both leave two estimates suspiciously close.
# Reference rows whose estimates gap below this re-run through polynomial
# rooting, which keeps such pairs separable at ordinary snapshot counts.
# Only the reference gets this protection: its delay matrix feeds every
# user through the offset feature, so a merged reference pair corrupts the
# whole trial, while a merged pair in one user's own row stays local.
ROOT_RESCAN_GAP = 0.04


def _row_delays(
    x: np.ndarray, n_sources: int, grid: MusicGrid, rescan: bool = True
) -> np.ndarray:
    """Delay estimates for one P x Q snapshot matrix (rooting on suspicion)."""
    vals, degraded = music_from_snapshots(x, n_sources, grid)
    if not rescan:
        return vals
    gaps = np.diff(np.concatenate([vals, [vals[0] + 2.0]])) if len(vals) > 1 else None
    if degraded or (gaps is not None and gaps.min() < ROOT_RESCAN_GAP):
        rooted, root_degraded = root_music_from_snapshots(x, n_sources)
        if not root_degraded:
            return rooted
    return vals


def estimate_reference_delays(
    y: np.ndarray,
    phi_hat: np.ndarray,
    l2_init: int,
    grid: MusicGrid | None = None,
    mad_threshold: float = 3.0,
    use_mad: bool = True,
    l2_known: int | None = None,
) -> tuple[np.ndarray, np.ndarray, int, dict]:
    """Reference UE delay matrix, per-row offsets, and detected path count.

    Each AoD group's projected row folds into a P x Q snapshot matrix for
    delay MUSIC over [0, 2).  Rows are paired against row 1 by nearest value
    under a robust shared-shift estimate (see ``match_by_circular_offset``).
    With ``use_mad`` the per-column offsets are MAD-filtered (intersection
    across rows) and flagged columns are dropped, which is the blind path
    count detection.  With a known count (``use_mad=False``) every column is
    retained, but the per-row offsets still average only over the matched,
    MAD-consistent columns so that one corrupted column cannot poison the
    offsets handed to the other users.
    """
    grid = grid or default_tau_grid()
    p, _, q = y.shape
    l1 = len(phi_hat)
    n_req = l2_known if l2_known is not None else l2_init
    f = _project_rows(y, phi_hat)
    rows = []
    for ell in range(l1):
        x = np.reshape(f[ell], (p, q), order="F")
        rows.append(_row_delays(x, n_req, grid))
    diag: dict = {}
    if l1 == 1:
        tau = rows[0][None, :]
        diag["single_common_path"] = True
        return tau, np.zeros(1), tau.shape[1], diag

    base = rows[0]
    n_cols = len(base)
    aligned = [base]
    off_lists = []
    good_lists = []
    keep = np.ones(n_cols, dtype=bool)
    for ell in range(1, l1):
        cand, offs, matched = match_by_circular_offset(base, rows[ell], 2.0)
        aligned.append(cand)
        off_lists.append(offs)
        good = matched.copy()
        if matched.sum() >= 2:
            resid = circ_residual(offs[matched], circ_median(offs[matched], 2.0), 2.0)
            sub = mad_keep_mask(resid, mad_threshold, atol=16.0 * grid.resolution)
            good[np.flatnonzero(matched)[~sub]] = False
        good_lists.append(good)
        keep &= good

    if use_mad:
        if not keep.any():
            raise EstimationError("offset structure absent")
        tau = np.vstack([row[keep] for row in aligned])
        off_masks = [keep] * (l1 - 1)
    else:
        tau = np.vstack(aligned)
        off_masks = [
            g if g.any() else np.ones(n_cols, dtype=bool) for g in good_lists
        ]
        diag["offset_inconsistent_columns"] = int(n_cols - keep.sum())
        keep = np.ones(n_cols, dtype=bool)

    offsets = np.concatenate(
        ([0.0], [circ_mean_about(o[m], 2.0) for o, m in zip(off_lists, off_masks)])
    )
    diag["delay_offset_spreads"] = [
        float(np.max(np.abs(circ_residual(o[m], circ_median(o[m], 2.0), 2.0))))
        for o, m in zip(off_lists, off_masks)
    ]
    diag["delay_columns_dropped"] = int(n_cols - keep.sum())
    return tau, offsets, int(keep.sum()), diag


def estimate_other_delays(
    y: np.ndarray,
    phi_hat: np.ndarray,
    tau_offsets: np.ndarray,
    l2: int,
    grid: MusicGrid | None = None,
) -> np.ndarray:
    """Non-reference delay matrix: MUSIC on group 1, other rows by offset."""
    grid = grid or default_tau_grid()
    p, _, q = y.shape
    f = _project_rows(y, phi_hat)
    x = np.reshape(f[0], (p, q), order="F")
    vals = _row_delays(x, l2, grid, rescan=False)
    l1 = len(phi_hat)
    tau = np.empty((l1, len(vals)))
    tau[0] = vals
    for ell in range(1, l1):
        tau[ell] = vals + tau_offsets[ell]
    return tau


def _robust_circ_mean(
    vals: np.ndarray, period: float, mad_threshold: float, atol: float = 0.0
) -> float:
    """Circular mean over the MAD-consistent subset of ``vals``."""
    resid = circ_residual(vals, circ_median(vals, period), period)
    m = mad_keep_mask(resid, mad_threshold, atol)
    if not m.any():
        m = np.ones(len(vals), dtype=bool)
    return circ_mean_about(vals[m], period)


def estimate_aoa(
    y: np.ndarray,
    tau_matrix: np.ndarray,
    phi_hat: np.ndarray,
    cache: CorrCache,
    is_reference: bool,
    omega_offsets: np.ndarray | None = None,
    psi_offsets: np.ndarray | None = None,
    mad_threshold: float = 3.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, dict]:
    """RIS-side AoA matrices for one UE.

    Recovers the RIS response factor by LS against the Khatri-Rao of the
    first two estimated factors, then runs the normalized 2-D correlation on
    every composite-path column (reference) or only the group-1 columns plus
    the reference AoA offsets (others).  Reference AoA offsets are robust
    circular means of the per-column row differences, so a single corrupted
    column cannot skew them.  Returns (omega, psi, omega_offsets,
    psi_offsets, diagnostics).
    """
    l1, n_cols = tau_matrix.shape
    n_comp = l1 * n_cols
    a = ula_matrix(y.shape[0], flatten_paths(tau_matrix))
    b = ula_matrix(y.shape[1], expand_phi(phi_hat, n_cols))
    kr = khatri_rao(b, a)
    sol, _, rank, _ = np.linalg.lstsq(kr, unfold(y, 2).T, rcond=None)
    if rank < n_comp:
        raise EstimationError("factor collinearity")
    r_mat = sol.T
    omega = np.empty((l1, n_cols))
    psi = np.empty((l1, n_cols))
    cols = range(n_comp) if is_reference else [l * l1 for l in range(n_cols)]
    scores = []
    for u in cols:
        w, s, score = correlate_2d(r_mat[:, u], cache=cache)
        omega[u % l1, u // l1] = w
        psi[u % l1, u // l1] = s
        scores.append(score)
    diag = {"corr_score_min": float(min(scores)) if scores else float("nan")}
    if is_reference:
        if l1 >= 2:
            w_atol = 16.0 * (cache.grid_w or default_aoa_grid()[0]).resolution
            s_atol = 16.0 * (cache.grid_s or default_aoa_grid()[1]).resolution
            omega_offsets = np.concatenate(
                ([0.0], [_robust_circ_mean(wrap_to(omega[e] - omega[0], 2.0), 2.0, mad_threshold, w_atol) for e in range(1, l1)])
            )
            psi_offsets = np.concatenate(
                ([0.0], [_robust_circ_mean(wrap_to(psi[e] - psi[0], 2.0), 2.0, mad_threshold, s_atol) for e in range(1, l1)])
            )
        else:
            omega_offsets = np.zeros(1)
            psi_offsets = np.zeros(1)
    else:
        if omega_offsets is None or psi_offsets is None:
            raise ValueError("non-reference UEs need the reference AoA offsets")
        for ell in range(1, l1):
            omega[ell] = omega[0] + omega_offsets[ell]
            psi[ell] = psi[0] + psi_offsets[ell]
    return omega, psi, omega_offsets, psi_offsets, diag


def _gain_factors(ms, tau, phi_hat, omega, psi):
    n_cols = tau.shape[1]
    cfg = ms.config
    a = ula_matrix(cfg.p, flatten_paths(tau))
    b = ula_matrix(cfg.m, expand_phi(phi_hat, n_cols))
    c = ms.theta.T @ upa_matrix(cfg.n1, cfg.n2, flatten_paths(omega), flatten_paths(psi))
    return a, b, c


def _solve_gains_ls(y, a, b, c) -> tuple[np.ndarray, bool]:
    """LS gains via the separable normal equations of the Khatri-Rao system.

    The Gram of G = kr(C, kr(B, A)) is the Hadamard product of the three small
    Grams and the RHS follows from three mode contractions, so G (P*M*Q x U)
    is never formed.  A tiny ridge kicks in on near-singular Grams.
    """
    gram = (a.conj().T @ a) * (b.conj().T @ b) * (c.conj().T @ c)
    t1 = np.einsum("pu,pmq->umq", a.conj(), y)
    t2 = np.einsum("mu,umq->uq", b.conj(), t1)
    rhs = np.einsum("qu,uq->u", c.conj(), t2)
    ridged = False
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        gram = gram + np.eye(gram.shape[0]) * (np.trace(gram).real / gram.shape[0]) * 1e-10
        ridged = True
    beta = np.linalg.solve(gram, rhs)
    return beta, ridged


def detect_gain_outliers(beta_matrix: np.ndarray, mad_threshold: float = 3.0) -> np.ndarray:
    """Column keep-mask from the multiplicative offset feature of the gains.

    Rows of a structured gain matrix differ by constant per-row factors, so
    log-magnitude row differences are constant across columns; columns whose
    difference is a MAD outlier in any row pair are dropped.  The absolute
    slack of 0.05 nepers keeps well-estimated columns from being flagged when
    the differences agree to within estimation precision.  Returns all-True
    when the matrix is too small to test or the filter rejects everything
    (inconclusive).
    """
    l1, n_cols = beta_matrix.shape
    if l1 < 2 or n_cols < 2:
        return np.ones(n_cols, dtype=bool)
    mags = np.abs(beta_matrix)
    logmag = np.log(np.maximum(mags, mags.max() * 1e-30 + 1e-300))
    keep = np.ones(n_cols, dtype=bool)
    for ell in range(1, l1):
        keep &= mad_keep_mask(logmag[ell] - logmag[0], mad_threshold, atol=0.05)
    if not keep.any():
        return np.ones(n_cols, dtype=bool)
    return keep


def estimate_gains(
    ms: MeasurementSet,
    k: int,
    tau: np.ndarray,
    phi_hat: np.ndarray,
    omega: np.ndarray,
    psi: np.ndarray,
) -> tuple[np.ndarray, bool]:
    """Gain matrix for UE k by least squares (no count detection)."""
    a, b, c = _gain_factors(ms, tau, phi_hat, omega, psi)
    vec, ridged = _solve_gains_ls(ms.tensors[k], a, b, c)
    return np.reshape(vec, tau.shape, order="F"), ridged


def validity_indicator(
    report: EstimateReport, epsilon: float = 0.1, k0: int | None = None
) -> tuple[bool, list]:
    """Dual-structure validity check on the stored estimates.

    Per UE, ``d = row1 - row2`` of the delay matrix and of the log-magnitude
    gain matrix must be constant across columns: the UE is reliable iff
    ``max|d - mean(d)| < epsilon`` for both.  The system is valid iff at
    least ``k0`` (default ceil(K/2)) UEs are reliable.  With fewer than two
    estimated common paths the test is vacuous and returns True.
    """
    k_users = report.n_users
    if k0 is None:
        k0 = math.ceil(k_users / 2)
    if report.l1_hat < 2:
        return True, [report.tau[k] is not None for k in range(k_users)]
    reliable = []
    for k in range(k_users):
        tau, beta = report.tau[k], report.beta[k]
        if tau is None or beta is None or tau.shape[0] < 2:
            reliable.append(False)
            continue
        d_tau = tau[0] - tau[1]
        mags = np.abs(beta)
        logmag = np.log(np.maximum(mags, mags.max() * 1e-30 + 1e-300))
        d_beta = logmag[0] - logmag[1]
        dev_tau = float(np.max(np.abs(d_tau - np.mean(d_tau))))
        dev_beta = float(np.max(np.abs(d_beta - np.mean(d_beta))))
        reliable.append(dev_tau < epsilon and dev_beta < epsilon)
    return sum(reliable) >= k0, reliable


def _empty_user():
    return {"tau": None, "omega": None, "psi": None, "beta": None, "l2": 0}


def _assemble(ms, opts, ref, phi, l1_hat, users, offsets, diagnostics, fallback):
    cfg = ms.config
    dims = {"p": cfg.p, "m": cfg.m, "q": cfg.q, "n1": cfg.n1, "n2": cfg.n2}
    report = EstimateReport(
        algorithm=opts.algorithm,
        dims=dims,
        reference_index=ref,
        l1_hat=l1_hat,
        phi=phi,
        tau_offsets=offsets[0],
        omega_offsets=offsets[1],
        psi_offsets=offsets[2],
        tau=[u["tau"] for u in users],
        omega=[u["omega"] for u in users],
        psi=[u["psi"] for u in users],
        beta=[u["beta"] for u in users],
        l2_hat=[u["l2"] for u in users],
        reliable=[],
        validity=False,
        fallback_used=fallback,
        diagnostics=diagnostics,
    )
    report.validity, report.reliable = validity_indicator(report, opts.epsilon, opts.k0)
    return report


def _shared_pipeline(ms, opts, ref, phi, l1_hat, kpn: bool) -> EstimateReport:
    cfg = ms.config
    l2_init = opts.l2_overestimate or cfg.l2_overestimate
    diagnostics: dict = {}
    users = [_empty_user() for _ in range(ms.n_users)]

    tau_ref, tau_offsets, l2_ref, ddiag = estimate_reference_delays(
        ms.tensors[ref],
        phi,
        l2_init,
        opts.tau_grid,
        opts.mad_threshold,
        use_mad=not kpn,
        l2_known=ms.scenario.l2(ref) if kpn else None,
    )
    if kpn and ddiag.get("offset_inconsistent_columns", 0) > 0:
        # With the true count injected, a reference column that defies the
        # offset structure signals a compromised reference; sharing its
        # offsets would poison every user, so treat it as an anomaly.
        raise EstimationError("reference delay columns inconsistent")
    diagnostics.update(ddiag)

    cache = build_corr_cache(ms.theta, cfg.n1, cfg.n2, opts.aoa_grid_w, opts.aoa_grid_s)
    omega_ref, psi_ref, w_offs, p_offs, adiag = estimate_aoa(
        ms.tensors[ref], tau_ref, phi, cache, is_reference=True,
        mad_threshold=opts.mad_threshold,
    )
    diagnostics.update(adiag)
    beta_ref, _ = estimate_gains(ms, ref, tau_ref, phi, omega_ref, psi_ref)
    users[ref] = {
        "tau": tau_ref,
        "omega": omega_ref,
        "psi": psi_ref,
        "beta": beta_ref,
        "l2": l2_ref,
    }

    for k in range(ms.n_users):
        if k == ref:
            continue
        try:
            l2_k = ms.scenario.l2(k) if kpn else l2_init
            tau_k = estimate_other_delays(
                ms.tensors[k], phi, tau_offsets, l2_k, opts.tau_grid
            )
            omega_k, psi_k, _, _, _ = estimate_aoa(
                ms.tensors[k],
                tau_k,
                phi,
                cache,
                is_reference=False,
                omega_offsets=w_offs,
                psi_offsets=p_offs,
            )
            beta_k, _ = estimate_gains(ms, k, tau_k, phi, omega_k, psi_k)
            if not kpn:
                keep = detect_gain_outliers(beta_k, opts.mad_threshold)
                if keep.sum() < tau_k.shape[1]:
                    tau_k = tau_k[:, keep]
                    omega_k = omega_k[:, keep]
                    psi_k = psi_k[:, keep]
                    beta_k, _ = estimate_gains(ms, k, tau_k, phi, omega_k, psi_k)
            users[k] = {
                "tau": tau_k,
                "omega": omega_k,
                "psi": psi_k,
                "beta": beta_k,
                "l2": tau_k.shape[1],
            }
        except EstimationError as exc:
            users[k] = _empty_user()
            diagnostics.setdefault("user_errors", {})[k] = str(exc)

    return _assemble(
        ms, opts, ref, phi, l1_hat, users, (tau_offsets, w_offs, p_offs), diagnostics, False
    )


def _independent_pipeline(ms, opts, ref, phi, l1_hat, kpn: bool = False) -> EstimateReport:
    """Offset sharing disabled: every UE is processed like the reference."""
    cfg = ms.config
    l2_init = opts.l2_overestimate or cfg.l2_overestimate
    diagnostics: dict = {}
    users = [_empty_user() for _ in range(ms.n_users)]
    cache = build_corr_cache(ms.theta, cfg.n1, cfg.n2, opts.aoa_grid_w, opts.aoa_grid_s)
    offsets = (np.zeros(l1_hat), np.zeros(l1_hat), np.zeros(l1_hat))
    for k in range(ms.n_users):
        try:
            tau_k, offs_k, l2_k, _ = estimate_reference_delays(
                ms.tensors[k],
                phi,
                l2_init,
                opts.tau_grid,
                opts.mad_threshold,
                use_mad=not kpn,
                l2_known=ms.scenario.l2(k) if kpn else None,
            )
            omega_k, psi_k, w_offs, p_offs, _ = estimate_aoa(
                ms.tensors[k], tau_k, phi, cache, is_reference=True,
                mad_threshold=opts.mad_threshold,
            )
            beta_k, _ = estimate_gains(ms, k, tau_k, phi, omega_k, psi_k)
            users[k] = {
                "tau": tau_k,
                "omega": omega_k,
                "psi": psi_k,
                "beta": beta_k,
                "l2": l2_k,
            }
            if k == ref:
                offsets = (offs_k, w_offs, p_offs)
        except EstimationError as exc:
            users[k] = _empty_user()
            diagnostics.setdefault("user_errors", {})[k] = str(exc)
    return _assemble(ms, opts, ref, phi, l1_hat, users, offsets, diagnostics, False)


def _failure_report(ms, opts, reason: str) -> EstimateReport:
    cfg = ms.config
    dims = {"p": cfg.p, "m": cfg.m, "q": cfg.q, "n1": cfg.n1, "n2": cfg.n2}
    k_users = ms.n_users
    return EstimateReport(
        algorithm=opts.algorithm,
        dims=dims,
        reference_index=-1,
        l1_hat=0,
        phi=np.empty(0),
        tau_offsets=np.empty(0),
        omega_offsets=np.empty(0),
        psi_offsets=np.empty(0),
        tau=[None] * k_users,
        omega=[None] * k_users,
        psi=[None] * k_users,
        beta=[None] * k_users,
        l2_hat=[0] * k_users,
        reliable=[False] * k_users,
        validity=False,
        failure=True,
        failure_reason=reason,
    )


def run_ds_mdt(
    ms: MeasurementSet,
    opts: PipelineOptions | None = None,
    rng: np.random.Generator | None = None,
) -> EstimateReport:
    """Run the full pipeline on one measurement set.

    ``rng`` feeds only the reference mis-selection draw (``opts.p_mis``).
    Unrecoverable common-stage errors yield a failure report; per-UE errors
    only blank that UE.  An invalid validity indicator re-runs with offset
    sharing disabled (keeping known counts in KPN mode) and flags
    ``fallback_used``.
    """
    opts = opts or PipelineOptions()
    if ms.config is None:
        raise ValueError("MeasurementSet must carry its ScenarioConfig")
    kpn = opts.algorithm == "dsmdt_kpn"
    try:
        ref = select_reference(ms, opts.p_mis, rng)
        phi, l1_hat = estimate_common_aod(
            ms,
            l1_known=ms.scenario.l1 if kpn else None,
            max_sources=opts.max_common_paths,
        )
    except EstimationError as exc:
        return _failure_report(ms, opts, str(exc))

    if opts.algorithm == "independent_fallback":
        return _independent_pipeline(ms, opts, ref, phi, l1_hat)

    try:
        report = _shared_pipeline(ms, opts, ref, phi, l1_hat, kpn)
    except EstimationError:
        report = None

    if report is None or not report.validity:
        fallback = _independent_pipeline(ms, opts, ref, phi, l1_hat, kpn)
        fallback.fallback_used = True
        if report is not None:
            fallback.diagnostics["pre_fallback_reliable"] = report.reliable
        return fallback
    return report

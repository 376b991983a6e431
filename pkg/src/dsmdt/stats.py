"""Robust and circular statistics used by the offset-feature stages."""

from __future__ import annotations

import numpy as np

# 1 / (sqrt(2) * erfcinv(3/2)): scales MAD to the normal sigma, the same
# constant MATLAB's isoutlier/rmoutliers use.
MAD_SCALE = 1.4826022185056018


def mad_keep_mask(
    values: np.ndarray, threshold: float = 3.0, atol: float = 0.0
) -> np.ndarray:
    """True for samples within ``threshold`` scaled MADs (plus ``atol``) of the median.

    ``atol`` is an absolute slack for quantized inputs: when most samples tie
    (grid-refined estimates often agree to machine steps) the MAD degenerates
    to zero and without slack everything off the exact median would be
    rejected.
    """
    values = np.asarray(values, dtype=float)
    med = np.median(values)
    mad = np.median(np.abs(values - med))
    return np.abs(values - med) <= threshold * MAD_SCALE * mad + atol


def wrap_to(values, period: float):
    """Wrap into [0, period)."""
    return np.mod(values, period)


def circ_residual(values, center, period: float):
    """Signed circular deviation in [-period/2, period/2)."""
    return np.mod(np.asarray(values) - center + period / 2.0, period) - period / 2.0


def circ_median(values: np.ndarray, period: float) -> float:
    """Circular median: the sample minimizing total circular deviation.

    O(n^2); the inputs here are per-row offset lists of a handful of values.
    Ties break toward the smaller wrapped value.
    """
    values = wrap_to(np.asarray(values, dtype=float), period)
    costs = np.abs(circ_residual(values[None, :], values[:, None], period)).sum(axis=1)
    order = np.lexsort((values, costs))
    return float(values[order[0]])


def circ_mean_about(values: np.ndarray, period: float) -> float:
    """Mean of a tight circular cluster: arithmetic mean of deviations around
    the circular median, wrapped back to [0, period)."""
    values = np.asarray(values, dtype=float)
    center = circ_median(values, period)
    return float(np.mod(center + np.mean(circ_residual(values, center, period)), period))


def align_sorted_circular(
    base: np.ndarray, other: np.ndarray, period: float
) -> tuple[np.ndarray, np.ndarray, int]:
    """Pair two ascending value lists that differ by a common circular shift.

    Tries every cyclic shift of ``other`` against ``base`` and keeps the one
    whose per-column offsets cluster tightest (total absolute circular
    deviation from their circular median; ties toward the smaller shift).

    Returns (aligned_other, offsets, shift) with
    ``offsets[i] = (aligned_other[i] - base[i]) mod period``.
    """
    base = np.asarray(base, dtype=float)
    other = np.asarray(other, dtype=float)
    n = len(base)
    if len(other) != n:
        raise ValueError("value lists must have equal length")
    best = None
    for shift in range(n):
        cand = np.roll(other, -shift)
        offs = wrap_to(cand - base, period)
        spread = float(
            np.sum(np.abs(circ_residual(offs, circ_median(offs, period), period)))
        )
        if best is None or spread < best[0] - 1e-15:
            best = (spread, cand, offs, shift)
    _, cand, offs, shift = best
    return cand, offs, shift


# A genuine pair's circular difference lands within estimator precision of
# the true shift; chance proximities between unrelated values scatter over
# the whole period.  One percent of the period comfortably covers the former
# while keeping the latter rare enough that pair counts separate them.
SHIFT_CONSENSUS_CAP = 0.01


def estimate_shared_shift(
    base: np.ndarray, other: np.ndarray, period: float
) -> tuple[float, float]:
    """Robust common circular shift between two value lists.

    Every pairwise circular difference anchors a candidate shift; the winner
    supports the most one-to-one pairs within ``SHIFT_CONSENSUS_CAP`` periods
    of itself, with ties broken toward the tightest support cluster.  Keying
    on the consensus count rather than a fixed cluster multiplicity keeps the
    estimate correct no matter how many spurious values each list carries, as
    long as the genuine pairs outnumber any coincidental agreement.

    Returns (shift, tightness) where tightness is the radius of the
    supporting cluster (distance to its outermost member).
    """
    from scipy.optimize import linear_sum_assignment

    base = np.asarray(base, dtype=float)
    other = np.asarray(other, dtype=float)
    diffs = wrap_to(other[None, :] - base[:, None], period)
    cap = SHIFT_CONSENSUS_CAP * period
    best = None
    for d0 in np.sort(diffs.ravel()):
        dev = np.abs(circ_residual(diffs, d0, period))
        # one-to-one support: a single base value cannot vouch for a shift
        # through two different partners (and vice versa)
        rows, cols = linear_sum_assignment(np.minimum(dev, cap))
        costs = dev[rows, cols]
        members = costs < cap
        key = (-int(members.sum()), float(costs[members].sum()), float(d0))
        if best is None or key < best[0]:
            best = (key, d0, rows[members], cols[members])
    _, d0, rows, cols = best
    devs = circ_residual(diffs[rows, cols], d0, period)
    if len(devs) == 0:
        return float(wrap_to(d0, period)), 0.0
    shift = float(wrap_to(d0 + devs.mean(), period))
    radius = float(np.max(np.abs(devs - devs.mean())))
    return shift, radius


def match_by_circular_offset(
    base: np.ndarray,
    other: np.ndarray,
    period: float,
    window: float | None = None,
    enforce_window: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pair ``other`` to ``base`` when they share a common circular shift but
    may each carry extra unrelated values.

    A pure cyclic rotation of the sorted lists cannot recover the true pairs
    once a spurious value sits at different sorted positions in the two
    lists; instead the shared shift comes from ``estimate_shared_shift`` and
    entries are paired by a one-to-one assignment whose per-pair cost is the
    deviation from that shift *truncated at* a window: many exact matches
    then always beat pairings that spread the deviation thinly, which
    matters because a value leaked from a third source into both lists
    mimics a competing shift.  The window defaults to four cluster radii,
    clipped to [0.002, 0.04] periods, so it tracks the estimator precision.

    Returns (aligned_other, offsets, matched) indexed by base position, with
    unpaired or beyond-window positions zero-filled and flagged False in
    ``matched`` (beyond-window pairs are kept when ``enforce_window`` is
    False, for callers that know the true pair counts).
    """
    from scipy.optimize import linear_sum_assignment

    base = np.asarray(base, dtype=float)
    other = np.asarray(other, dtype=float)
    n_base, n_other = len(base), len(other)
    if n_base == 0 or n_other == 0:
        return np.zeros(n_base), np.zeros(n_base), np.zeros(n_base, dtype=bool)
    shift, radius = estimate_shared_shift(base, other, period)
    if window is None:
        window = float(np.clip(4.0 * radius, 0.002 * period, 0.04 * period))
    raw = np.abs(circ_residual(other[None, :] - base[:, None], shift, period))
    rows, cols = linear_sum_assignment(np.minimum(raw, window))
    aligned = np.zeros(n_base)
    offsets = np.zeros(n_base)
    matched = np.zeros(n_base, dtype=bool)
    aligned[rows] = other[cols]
    offsets[rows] = wrap_to(other[cols] - base[rows], period)
    matched[rows] = (raw[rows, cols] < window) | (not enforce_window)
    return aligned, offsets, matched

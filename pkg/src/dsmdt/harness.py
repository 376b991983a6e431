"""Monte-Carlo experiment harness: metrics, sweeps, and file emission.

An experiment is a grid of (sweep value, algorithm) cells; each cell runs
``trials`` independent seeded trials and aggregates into one summary row.
Per-trial records can be dumped as JSON lines so any summary statistic is
recomputable after the fact.  All randomness is keyed by
``(experiment_seed, sweep_index, trial)``, so cells are reproducible in
isolation and workers cannot race on a shared stream.
"""

from __future__ import annotations

import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import channel_factors, map_cascaded, ula_matrix
from .estimator import ALGORITHMS, EstimateReport, PipelineOptions, run_ds_mdt
from .scenario import (
    MeasurementSet,
    ScenarioConfig,
    apply_awgn,
    build_measurement_set,
    misc_stream,
    substream,
)
from .subspace import MusicGrid, music_from_snapshots, sample_covariance, spectrum_1d
from .tensor_ops import kruskal_inner, kruskal_norm_sq

SWEEP_FIELDS = ("snr_db", "p", "q", "m", "p_mis")
SWEEP_SCHEMA = "dsmdt-sweep-v1"
TRIAL_SCHEMA = "dsmdt-trial-v1"
APPENDIX_C_SCHEMA = "dsmdt-appendix-c-v1"
WORKERS_ENV = "DSMDT_WORKERS"
NMSE_FLOOR_DB = -120.0

CSV_COLUMNS = (
    "schema",
    "sweep_field",
    "sweep_value",
    "algorithm",
    "trials",
    "successes",
    "failures",
    "mean_nmse_db",
    "nmse_std_db",
    "pesr_l1",
    "pesr_l2",
    "encp_l1_mean",
    "encp_l1_std",
    "encp_l2_ref_mean",
    "encp_l2_ref_std",
    "encp_l2_mean",
    "encp_l2_std",
    "validity_rate",
    "fallback_rate",
    "wall_time_s",
)


def to_db(linear: float) -> float:
    """10 log10 with a -120 dB floor for exact recoveries."""
    return float(10.0 * np.log10(max(float(linear), 10.0 ** (NMSE_FLOOR_DB / 10.0))))


def nmse(h_hat: np.ndarray, h_true: np.ndarray) -> float:
    """Squared-error ratio ||h_hat - h||_F^2 / ||h||_F^2 on dense arrays."""
    h_hat = np.asarray(h_hat)
    h_true = np.asarray(h_true)
    if h_hat.shape != h_true.shape:
        raise ValueError("shape mismatch")
    denom = float(np.sum(np.abs(h_true) ** 2))
    if denom == 0.0:
        raise ValueError("zero-energy reference")
    return float(np.sum(np.abs(h_hat - h_true) ** 2) / denom)


def per_user_nmse(ms: MeasurementSet, report: EstimateReport) -> np.ndarray:
    """Per-UE channel NMSE (linear) from Kruskal factors, without densifying.

    ||H_hat - H||^2 expands into three Gram-product inner products, so the
    P x M x N tensors never materialize.  A UE with no estimate counts as
    ratio 1.0 (total miss).
    """
    cfg = ms.config
    out = np.empty(ms.n_users)
    for k in range(ms.n_users):
        casc = map_cascaded(ms.scenario.bs, ms.scenario.ues[k])
        truth = channel_factors(casc, cfg.m, cfg.p, cfg.n1, cfg.n2)
        tn = kruskal_norm_sq(truth)
        if report.tau[k] is None:
            out[k] = 1.0
            continue
        est = report.factors(k)
        en = kruskal_norm_sq(est)
        cross = kruskal_inner(est, truth)
        out[k] = max((en + tn - 2.0 * cross.real) / tn, 0.0)
    return out


@dataclass
class ExperimentSpec:
    """One sweep: base scenario, swept field, trial count, outputs."""

    base: ScenarioConfig = field(default_factory=ScenarioConfig)
    sweep_field: str = "snr_db"
    sweep_values: tuple = (0.0, 10.0, 20.0)
    trials: int = 200
    seed: int = 0
    algorithms: tuple = ("dsmdt",)
    p_mis: float = 0.0
    output_path: str | None = None
    output_format: str = "csv"
    trial_dump_path: str | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.sweep_field not in SWEEP_FIELDS:
            raise ValueError(f"sweep_field must be one of {SWEEP_FIELDS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if len(self.sweep_values) < 1:
            raise ValueError("need at least one sweep value")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithms {bad}; choose from {ALGORITHMS}")
        if self.output_format not in ("csv", "json"):
            raise ValueError("output_format must be 'csv' or 'json'")
        for v in self.sweep_values:
            self.cell_config(v)  # validates dimension combinations early

    def cell_config(self, value) -> tuple[ScenarioConfig, float]:
        """(ScenarioConfig, p_mis) for one sweep value."""
        if self.sweep_field == "p_mis":
            if not 0.0 <= value <= 1.0:
                raise ValueError("p_mis sweep values must lie in [0, 1]")
            return self.base, float(value)
        if self.sweep_field == "snr_db":
            return replace(self.base, snr_db=float(value)), self.p_mis
        return replace(self.base, **{self.sweep_field: int(value)}), self.p_mis


@dataclass
class ResultRow:
    """Aggregated metrics for one (sweep value, algorithm) cell."""

    sweep_field: str
    sweep_value: float
    algorithm: str
    trials: int
    successes: int
    failures: int
    mean_nmse_db: float
    nmse_std_db: float
    pesr_l1: float
    pesr_l2: float
    encp_l1_mean: float
    encp_l1_std: float
    encp_l2_ref_mean: float
    encp_l2_ref_std: float
    encp_l2_mean: float
    encp_l2_std: float
    validity_rate: float
    fallback_rate: float
    wall_time_s: float

    def as_record(self) -> dict:
        rec = {"schema": SWEEP_SCHEMA}
        rec.update(self.__dict__)
        return rec


def resolve_workers(requested: int | None = None) -> int:
    """Worker count: WORKERS_ENV overrides, then ``requested``, then 1."""
    env = os.environ.get(WORKERS_ENV)
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer")
        return n
    return max(int(requested or 1), 1)


def run_trial(cfg: ScenarioConfig, algorithm: str, p_mis: float, seed) -> dict:
    """One seeded trial: build measurements, estimate, score.  Picklable."""
    t0 = time.perf_counter()
    ms = build_measurement_set(cfg, seed)
    t1 = time.perf_counter()
    opts = PipelineOptions(algorithm=algorithm, p_mis=p_mis)
    report = run_ds_mdt(ms, opts, rng=misc_stream(seed))
    t2 = time.perf_counter()
    rec = {
        "schema": TRIAL_SCHEMA,
        "seed": list(seed) if isinstance(seed, (tuple, list)) else int(seed),
        "algorithm": algorithm,
        "l1_true": ms.scenario.l1,
        "l1_hat": report.l1_hat,
        "l2_true": [ms.scenario.l2(k) for k in range(ms.n_users)],
        "l2_hat": report.l2_hat,
        "reference_index": report.reference_index,
        "validity": bool(report.validity),
        "fallback": bool(report.fallback_used),
        "failure": bool(report.failure),
        "build_s": round(t1 - t0, 6),
        "estimate_s": round(t2 - t1, 6),
    }
    if report.failure:
        rec["nmse"] = None
        rec["per_ue_nmse"] = None
    else:
        per_ue = per_user_nmse(ms, report)
        rec["nmse"] = float(per_ue.mean())
        rec["per_ue_nmse"] = [float(v) for v in per_ue]
    return rec


def _run_cell_trial(args) -> dict:
    cfg, algorithm, p_mis, seed = args
    return run_trial(cfg, algorithm, p_mis, seed)


def aggregate_cell(
    records: list[dict],
    sweep_field: str,
    sweep_value: float,
    algorithm: str,
    wall_time_s: float,
) -> ResultRow:
    """Summary row from per-trial records (the JSONL dump uses the same)."""
    trials = len(records)
    ok = [r for r in records if not r["failure"]]
    ratios = np.array([r["nmse"] for r in ok], dtype=float)
    mean_db = to_db(ratios.mean()) if len(ratios) else float("nan")
    db_vals = np.array([to_db(v) for v in ratios]) if len(ratios) else np.array([])
    l1_hits = [r["l1_hat"] == r["l1_true"] for r in ok]
    l2_hits, l2_ref, l2_other, l1_counts = [], [], [], []
    for r in ok:
        l1_counts.append(r["l1_hat"])
        for k, (hat, true) in enumerate(zip(r["l2_hat"], r["l2_true"])):
            if hat is None:
                continue
            l2_hits.append(hat == true)
            (l2_ref if k == r["reference_index"] else l2_other).append(hat)

    def _mean(x):
        return float(np.mean(x)) if len(x) else float("nan")

    def _std(x):
        return float(np.std(x)) if len(x) else float("nan")

    return ResultRow(
        sweep_field=sweep_field,
        sweep_value=float(sweep_value),
        algorithm=algorithm,
        trials=trials,
        successes=len(ok),
        failures=trials - len(ok),
        mean_nmse_db=mean_db,
        nmse_std_db=_std(db_vals),
        pesr_l1=_mean(l1_hits),
        pesr_l2=_mean(l2_hits),
        encp_l1_mean=_mean(l1_counts),
        encp_l1_std=_std(l1_counts),
        encp_l2_ref_mean=_mean(l2_ref),
        encp_l2_ref_std=_std(l2_ref),
        encp_l2_mean=_mean(l2_other),
        encp_l2_std=_std(l2_other),
        validity_rate=_mean([r["validity"] for r in ok]),
        fallback_rate=_mean([r["fallback"] for r in ok]),
        wall_time_s=round(wall_time_s, 3),
    )


def run_experiment(spec: ExperimentSpec) -> list[ResultRow]:
    """Execute every (sweep value, algorithm) cell and write outputs.

    Deterministic for a given spec (modulo the wall-time columns): trial
    seeds derive from (spec.seed, sweep_index, trial) and results are
    collected in submission order regardless of worker scheduling.
    """
    workers = resolve_workers(spec.workers)
    rows: list[ResultRow] = []
    dump = open(spec.trial_dump_path, "w") if spec.trial_dump_path else None
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    step = max(spec.trials // 10, 1)
    try:
        for vi, value in enumerate(spec.sweep_values):
            cfg, p_mis = spec.cell_config(value)
            for algorithm in spec.algorithms:
                t0 = time.perf_counter()
                args = [
                    (cfg, algorithm, p_mis, (spec.seed, vi, t))
                    for t in range(spec.trials)
                ]
                print(
                    f"[{spec.sweep_field}={value} {algorithm}] "
                    f"{spec.trials} trials, {workers} worker(s)",
                    file=sys.stderr,
                )
                records = []
                runner = pool.map(_run_cell_trial, args) if pool else map(_run_cell_trial, args)
                for t, rec in enumerate(runner):
                    records.append(rec)
                    if (t + 1) % step == 0 or t + 1 == spec.trials:
                        print(f"  trial {t + 1}/{spec.trials}", file=sys.stderr)
                wall = time.perf_counter() - t0
                if dump:
                    for t, rec in enumerate(records):
                        line = {
                            "sweep_field": spec.sweep_field,
                            "sweep_value": float(value),
                            "trial": t,
                        }
                        line.update(rec)
                        dump.write(json.dumps(line, sort_keys=True) + "\n")
                rows.append(
                    aggregate_cell(records, spec.sweep_field, value, algorithm, wall)
                )
    finally:
        if dump:
            dump.close()
        if pool:
            pool.shutdown()
    if spec.output_path:
        if spec.output_format == "csv":
            write_csv(rows, spec.output_path)
        else:
            write_json(rows, spec.output_path)
    return rows


def write_csv(rows: list[ResultRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row.as_record())


def write_json(rows: list[ResultRow], path: str) -> None:
    with open(path, "w") as fh:
        json.dump([row.as_record() for row in rows], fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_trial_dump(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- overestimated-count MUSIC study (two close sources on one ULA) ---------

SOURCE_COSINE = float(np.sin(np.deg2rad(5.0)))


def appendix_c_grid() -> MusicGrid:
    """Directional-cosine search over [-1, 1) (period-2 wrap)."""
    return MusicGrid(-1.0, 1.0, coarse=512, wrap=True)


def run_appendix_c(
    m_list=(8, 16, 32, 64, 128),
    overestimates=(2, 3, 4, 5),
    seed: int = 0,
    trials: int = 100,
    snr_db: float = 10.0,
    n_snapshots: int = 16,
    output_path: str | None = None,
    output_format: str = "csv",
    spectrum_dir: str | None = None,
) -> list[dict]:
    """Angle NMSE of raw MUSIC for two sources at +/-5 deg vs assumed count.

    For every array size and assumed source count the estimator runs with no
    peak-significance gating, so the behavior of overestimated counts (extra
    peaks, and at small apertures a bias on the true ones) is observable.
    Optionally dumps the first trial's coarse pseudospectrum per (m, count)
    as two-column text.
    """
    x_true = np.array([-SOURCE_COSINE, SOURCE_COSINE])
    grid = appendix_c_grid()
    rows = []
    for mi, m in enumerate(m_list):
        for count in overestimates:
            t0 = time.perf_counter()
            ratios = []
            for t in range(trials):
                rng = substream((seed, mi, t), 0)
                s = rng.normal(size=(2, n_snapshots)) + 1j * rng.normal(
                    size=(2, n_snapshots)
                )
                clean = ula_matrix(m, x_true) @ (s / np.sqrt(2.0))
                noisy, _ = apply_awgn(clean, snr_db, rng)
                est, _ = music_from_snapshots(noisy, count, grid)
                err = 0.0
                for x in x_true:
                    d = np.mod(est - x + 1.0, 2.0) - 1.0
                    err += float(np.min(np.abs(d))) ** 2
                ratios.append(err / float(np.sum(x_true**2)))
                if t == 0 and spectrum_dir:
                    pts, vals = spectrum_1d(sample_covariance(noisy), count, grid)
                    out = os.path.join(spectrum_dir, f"spectrum_m{m}_count{count}.txt")
                    np.savetxt(out, np.column_stack([pts, vals]), fmt="%.10e")
            rows.append(
                {
                    "schema": APPENDIX_C_SCHEMA,
                    "m": int(m),
                    "assumed_count": int(count),
                    "angle_nmse_db": to_db(float(np.mean(ratios))),
                    "trials": trials,
                    "wall_time_s": round(time.perf_counter() - t0, 3),
                }
            )
    if output_path:
        if output_format == "csv":
            cols = tuple(rows[0].keys())
            with open(output_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
        else:
            with open(output_path, "w") as fh:
                json.dump(rows, fh, indent=2, sort_keys=True)
                fh.write("\n")
    return rows

"""Command-line entry points: simulate, sweep, appendix-c, selftest."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import (
    PRESETS,
    SCENARIO_KEYS,
    ConfigError,
    build_experiment,
    build_scenario,
    load_config,
    merge_settings,
    resolve_settings,
)
from .estimator import ALGORITHMS, PipelineOptions, run_ds_mdt
from .harness import per_user_nmse, run_appendix_c, run_experiment, to_db
from .scenario import build_measurement_set, misc_stream

_SCENARIO_FLAG_HELP = {
    "m": "BS antenna count",
    "n1": "RIS rows",
    "n2": "RIS columns",
    "k": "number of UEs",
    "p": "pilot subcarriers",
    "q": "RIS training configurations",
    "l1": "deployment-side path count",
    "l2": "per-UE path count",
    "snr_db": "signal-to-noise ratio in dB",
    "carrier_hz": "carrier frequency in Hz",
    "bs_ris_distance_m": "BS to RIS distance in meters",
    "ue_distance_lo": "minimum UE to RIS distance in meters",
    "ue_distance_hi": "maximum UE to RIS distance in meters",
    "l2_overestimate": "assumed per-UE path cap fed to detection",
    "min_separation": "normalized minimum parameter spacing, or 'none'",
}

SELFTEST_NMSE_DB = -60.0
SELFTEST_PASS_RATE = 0.98


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario overrides")
    for key in SCENARIO_KEYS:
        g.add_argument(
            f"--{key.replace('_', '-')}",
            dest=key,
            metavar="V",
            help=_SCENARIO_FLAG_HELP[key],
        )


def _add_source_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="named base profile")
    p.add_argument("--config", metavar="PATH", help="key=value settings file")


def _layered_settings(args: argparse.Namespace, cli: dict) -> dict:
    preset = PRESETS.get(getattr(args, "preset", None) or "", {})
    file_cfg = load_config(args.config) if getattr(args, "config", None) else {}
    scenario_cli = {k: getattr(args, k, None) for k in SCENARIO_KEYS}
    return resolve_settings(merge_settings(preset, file_cfg, scenario_cli, cli))


def _cmd_simulate(args: argparse.Namespace) -> int:
    typed = _layered_settings(args, {})
    cfg = build_scenario(typed)
    if args.algo not in ALGORITHMS:
        raise ConfigError(f"--algo must be one of {ALGORITHMS}")
    ms = build_measurement_set(cfg, args.seed)
    opts = PipelineOptions(algorithm=args.algo, p_mis=args.p_mis)
    report = run_ds_mdt(ms, opts, rng=misc_stream(args.seed))
    if report.failure:
        print(f"estimation failed: {report.failure_reason}", file=sys.stderr)
    else:
        per_ue = per_user_nmse(ms, report)
        print(
            f"L1_hat={report.l1_hat} L2_hat={report.l2_hat} "
            f"validity={report.validity} fallback={report.fallback_used} "
            f"NMSE={to_db(per_ue.mean()):.2f} dB",
            file=sys.stderr,
        )
    doc = report.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(doc + "\n")
    else:
        print(doc)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cli = {
        "seed": args.seed,
        "trials": args.trials,
        "algorithms": args.algo,
        "sweep_field": args.sweep_field,
        "sweep_values": args.sweep_values,
        "p_mis": args.p_mis,
        "out": args.out,
        "format": args.format,
        "trial_dump": args.trial_dump,
        "workers": args.workers,
    }
    spec = build_experiment(_layered_settings(args, cli))
    rows = run_experiment(spec)
    if not spec.output_path:
        for row in rows:
            print(
                f"{row.sweep_field}={row.sweep_value:g} {row.algorithm}: "
                f"mean NMSE {row.mean_nmse_db:.2f} dB "
                f"({row.successes}/{row.trials} ok)"
            )
    return 0


def _cmd_appendix_c(args: argparse.Namespace) -> int:
    try:
        m_list = tuple(int(v) for v in args.m_list.split(","))
        counts = tuple(int(v) for v in args.counts.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad list value: {exc}") from exc
    rows = run_appendix_c(
        m_list=m_list,
        overestimates=counts,
        seed=args.seed,
        trials=args.trials,
        snr_db=args.snr_db,
        n_snapshots=args.snapshots,
        output_path=args.out,
        output_format=args.format,
        spectrum_dir=args.spectrum_dir,
    )
    if not args.out:
        for r in rows:
            print(
                f"M={r['m']} count={r['assumed_count']}: "
                f"angle NMSE {r['angle_nmse_db']:.2f} dB"
            )
    return 0


def _cmd_selftest(args: argparse.Namespace) -> int:
    cfg = build_scenario(_layered_settings(args, {}))
    if cfg.min_separation is None:
        cfg = cfg.with_updates(min_separation=4.0 / min(cfg.m, cfg.p))
    hits = 0
    for t in range(args.trials):
        ms = build_measurement_set(cfg, (args.seed, 0, t), snr_db=np.inf)
        report = run_ds_mdt(ms, PipelineOptions(algorithm="dsmdt_kpn"))
        db = to_db(1.0) if report.failure else to_db(per_user_nmse(ms, report).mean())
        ok = db < SELFTEST_NMSE_DB
        hits += ok
        print(f"trial {t:3d}: {db:8.2f} dB {'ok' if ok else 'MISS'}", file=sys.stderr)
    rate = hits / args.trials
    print(
        f"selftest: {hits}/{args.trials} noiseless recoveries below "
        f"{SELFTEST_NMSE_DB:.0f} dB (need {SELFTEST_PASS_RATE:.0%})"
    )
    return 0 if rate >= SELFTEST_PASS_RATE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsmdt",
        description="Channel estimation simulator for RIS-aided multi-user systems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario and dump the report")
    _add_source_flags(p)
    _add_scenario_flags(p)
    p.add_argument("--seed", type=int, default=0, help="trial seed")
    p.add_argument("--algo", default="dsmdt", help=f"one of {ALGORITHMS}")
    p.add_argument("--p-mis", type=float, default=0.0, help="reference mis-selection probability")
    p.add_argument("--out", metavar="PATH", help="write report JSON here (default stdout)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="run a Monte-Carlo sweep to CSV/JSON")
    _add_source_flags(p)
    _add_scenario_flags(p)
    p.add_argument("--seed", type=int, required=True, help="experiment seed (required)")
    p.add_argument("--trials", metavar="N", help="trials per cell")
    p.add_argument("--algo", metavar="LIST", help="comma-separated algorithms")
    p.add_argument("--sweep-field", metavar="FIELD", help="swept scenario field")
    p.add_argument("--sweep-values", metavar="LIST", help="comma-separated values")
    p.add_argument("--p-mis", metavar="P", help="reference mis-selection probability")
    p.add_argument("--out", metavar="PATH", help="summary table destination")
    p.add_argument("--format", choices=("csv", "json"), help="summary format")
    p.add_argument("--trial-dump", metavar="PATH", help="per-trial JSON-lines dump")
    p.add_argument("--workers", metavar="N", help="parallel worker count")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("appendix-c", help="overestimated-count MUSIC study")
    p.add_argument("--m-list", default="8,16,32,64,128", metavar="LIST")
    p.add_argument("--counts", default="2,3,4,5", metavar="LIST")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--snapshots", type=int, default=16)
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--spectrum-dir", metavar="DIR", help="dump pseudospectra here")
    p.set_defaults(func=_cmd_appendix_c)

    p = sub.add_parser("selftest", help="noiseless exact-recovery suite")
    _add_source_flags(p)
    _add_scenario_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.set_defaults(func=_cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``mliotrim <command> [options]``.

Every command takes ``--seed`` and ``--config FILE``.  The config file is a
JSON object; top-level keys apply to every command, and an object stored
under a command name (``{"eval": {"window": 10}}``) applies to that command
only.  ``MLIOTRIM_CONFIG`` names a default config file.  Flags given on the
command line always win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

logger = logging.getLogger("mliotrim")

CONFIG_ENV = "MLIOTRIM_CONFIG"
COMMANDS = ("ingest", "label", "train", "eval", "run", "bench", "synth")


class CliError(Exception):
    """Reported as ``mliotrim: error: ...`` with exit status 1."""


def _int_list(text: str) -> list[int]:
    try:
        out = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mliotrim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("ingest", help="captures -> feature CSV")
    _common(p)
    p.add_argument("captures", nargs="+", help="pcap files (device taken from the name via --roster)")
    p.add_argument("--roster", help="JSON object: device id -> local address")
    p.add_argument("--device", help="device id for every capture")
    p.add_argument("--addr", help="local address of --device")
    p.add_argument("--window", type=int, default=60)
    p.add_argument("--labels", help="labels CSV to join onto the rows")
    p.add_argument("--default", choices=("drop", "non_essential"), default="drop", help="policy for unlabeled destinations")
    p.add_argument("--dns-out", help="directory for per-device DNS table CSVs")
    p.add_argument("--out", required=True, help="feature CSV to write")

    p = sub.add_parser("label", help="consensus labeling simulation or label join")
    lsub = p.add_subparsers(dest="action", metavar="action")
    lsub.required = True
    q = lsub.add_parser("simulate", help="run block-and-probe consensus on simulated devices")
    _common(q)
    q.add_argument("--devices", help="JSON file of simulated devices")
    q.add_argument("--random", type=int, default=0, help="also simulate N random devices")
    q.add_argument("--flakiness", type=float, help="override every device's probe flakiness")
    q.add_argument("--noise", choices=("spurious_failure", "per_function"), default="spurious_failure")
    q.add_argument("--min-iterations", type=int, default=30)
    q.add_argument("--max-iterations", type=int, default=200)
    q.add_argument("--report", help="per-destination vote tallies CSV")
    q.add_argument("--out", required=True, help="labels CSV to write")
    q = lsub.add_parser("join", help="attach labels to a feature CSV")
    _common(q)
    q.add_argument("--features", required=True)
    q.add_argument("--labels", required=True)
    q.add_argument("--default", choices=("drop", "non_essential"), default="drop")
    q.add_argument("--out", required=True)

    p = sub.add_parser("train", help="labeled features -> model file")
    _common(p)
    p.add_argument("--features", required=True, help="labeled feature CSV")
    p.add_argument("--model-kind", choices=("rf", "ann"), default="rf")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--val-fraction", type=float, default=0.15, help="latest rows per device held out for ANN early stopping")
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("eval", help="run an evaluation experiment")
    _common(p)
    p.add_argument("--experiment", choices=("global", "temporal", "unseen", "all-vs-one"), default="global")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--features", help="labeled feature CSV")
    src.add_argument("--synthetic", action="store_true", help="use the built-in 8-device generator")
    p.add_argument("--days", type=int, help="synthetic days (default depends on the experiment)")
    p.add_argument("--fresh", type=int, help="synthetic fresh non-essential destinations after --train-days")
    p.add_argument("--window", type=int, default=60)
    p.add_argument("--model-kind", choices=("rf", "ann"), default="rf")
    p.add_argument("--train-days", type=int, help="temporal: 30, unseen: 15")
    p.add_argument("--chunk-days", type=int, default=5)
    p.add_argument("--held-out", help="all-vs-one: device to hold out (default: each in turn)")
    p.add_argument("--out", help="report CSV")
    p.add_argument("--plot", help="plot series CSV (index -> F1)")

    p = sub.add_parser("run", help="gateway rotation loop")
    _common(p)
    p.add_argument("--rotation", type=int, default=60)
    p.add_argument("--window", type=int, default=60)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--models", required=True, help="model file")
    p.add_argument("--out", required=True, help="directory for rule files and logs")
    p.add_argument("--capture-dir", required=True, help="directory of <device>-<cycle>.pcap files")
    p.add_argument("--roster", required=True, help="JSON object: device id -> local address")
    p.add_argument("--follow", action="store_true", help="wait for new rotations instead of replaying")
    p.add_argument("--cycles", type=int, help="stop after this many cycles")
    p.add_argument("--unblock", action="append", default=[], metavar="DEVICE:DEST", help="remove rules, then exit")

    p = sub.add_parser("bench", help="scalability benchmark over rotation periods and threads")
    _common(p)
    p.add_argument("--rotations", type=_int_list, default=[60, 120, 180, 300, 600])
    p.add_argument("--threads", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--window", type=int, default=60)
    p.add_argument("--devices", type=int, default=50, help="fleet size for the sequential total")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--models", help="model file (default: train a forest on synthetic data)")
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--sequential-out", help="sequential totals CSV (default: <out stem>_sequential.csv)")

    p = sub.add_parser("synth", help="write synthetic captures, roster and labels")
    _common(p)
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--span", type=int, default=86400, help="seconds per capture file")
    p.add_argument("--window", type=int, default=60)
    p.add_argument("--fresh", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    return parser


# --------------------------------------------------------------------------
# config handling


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fp:
            cfg = json.load(fp)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must be a JSON object")
    return cfg


def _find_subparser(parser: argparse.ArgumentParser, argv: Sequence[str]) -> Optional[argparse.ArgumentParser]:
    p = parser
    for tok in argv:
        actions = [a for a in p._actions if isinstance(a, argparse._SubParsersAction)]
        if not actions:
            break
        if tok in actions[0].choices:
            p = actions[0].choices[tok]
    return p if p is not parser else None


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    path = known.config or os.environ.get(CONFIG_ENV)
    cfg = _load_config(path)
    if not cfg:
        return
    target = _find_subparser(parser, argv)
    if target is None:
        return
    dests = {a.dest for a in target._actions}
    command = next((t for t in argv if t in COMMANDS), None)
    section = cfg.get(command, {}) if command else {}
    if not isinstance(section, dict):
        raise CliError(f"config section {command!r} must be an object")
    defaults = {k.replace("-", "_"): v for k, v in cfg.items() if k not in COMMANDS}
    defaults = {k: v for k, v in defaults.items() if k in dests}
    for k, v in section.items():
        k = k.replace("-", "_")
        if k not in dests:
            raise CliError(f"config: unknown option {k!r} for {command}")
        defaults[k] = v
    for a in target._actions:
        if a.dest in defaults and a.type is _int_list and isinstance(defaults[a.dest], list):
            defaults[a.dest] = [int(x) for x in defaults[a.dest]]
    # config values become defaults, so explicit flags still take precedence;
    # required options satisfied by the config are no longer required
    for a in target._actions:
        if a.dest in defaults:
            a.required = False
    target.set_defaults(**defaults)


# --------------------------------------------------------------------------
# commands


def _read_roster(path: Optional[str]) -> dict[str, str]:
    if not path:
        return {}
    try:
        with open(path) as fp:
            roster = json.load(fp)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read roster {path}: {exc}")
    if not isinstance(roster, dict):
        raise CliError(f"roster {path} must map device ids to addresses")
    return {str(k): str(v) for k, v in roster.items()}


_CYCLE_SUFFIX = re.compile(r"^(?P<device>.+?)-(?P<cycle>\d+)$")


def _device_for(path: Path, roster: dict[str, str], device: Optional[str]) -> str:
    if device:
        return device
    m = _CYCLE_SUFFIX.match(path.stem)
    name = m["device"] if m else path.stem
    if name in roster:
        return name
    raise CliError(f"{path}: cannot tell which device it belongs to (use --device or --roster)")


def cmd_ingest(args) -> int:
    from .capture import DnsTable, extract_dns_table, parse_capture
    from .features import FeatureTable, check_window, window_packets
    from .labeling import assign_labels, read_labels

    check_window(args.window)
    roster = _read_roster(args.roster)
    per_device: dict[str, list[Path]] = {}
    for c in args.captures:
        path = Path(c)
        if not path.exists():
            raise CliError(f"capture not found: {path}")
        per_device.setdefault(_device_for(path, roster, args.device), []).append(path)

    def order(p: Path):
        m = _CYCLE_SUFFIX.match(p.stem)
        return (int(m["cycle"]) if m else -1, p.name)

    tables = []
    for dev in sorted(per_device):
        addr = args.addr if args.device else roster.get(dev)
        if not addr:
            raise CliError(f"no local address for device {dev} (use --addr or --roster)")
        records, dns = [], DnsTable(dev)
        for path in sorted(per_device[dev], key=order):
            cap = parse_capture(path, dev, addr)
            records += cap.records
            dns = dns.merged(extract_dns_table(cap, dev))
        if args.dns_out:
            Path(args.dns_out).mkdir(parents=True, exist_ok=True)
            dns.to_csv(Path(args.dns_out) / f"{dev}.dns.csv")
        tables.append(FeatureTable.from_windows(window_packets(records, dns, args.window, dev)))
        logger.info("%s: %d packets, %d dns entries", dev, len(records), len(dns))
    table = FeatureTable.concat(tables)
    if args.labels:
        table = assign_labels(table, read_labels(args.labels), args.default)
    table.to_csv(args.out)
    print(f"wrote {len(table)} rows to {args.out}")
    return 0


def cmd_label(args) -> int:
    import numpy as np

    from .features import FeatureTable
    from .labeling import (
        assign_labels,
        label_summary,
        load_devices,
        read_labels,
        run_consensus,
        write_consensus_report,
        write_labels,
    )

    if args.action == "join":
        table = assign_labels(FeatureTable.from_csv(args.features), read_labels(args.labels), args.default)
        table.to_csv(args.out, include_label=True)
        print(f"wrote {len(table)} labeled rows to {args.out}")
        return 0

    from dataclasses import replace

    from .synthetic import random_simulated_device

    devices = load_devices(args.devices) if args.devices else []
    rng = np.random.default_rng(args.seed)
    devices += [random_simulated_device(rng, i) for i in range(args.random)]
    if not devices:
        raise CliError("nothing to simulate: give --devices and/or --random N")
    if args.flakiness is not None:
        devices = [replace(d, probe_flakiness=args.flakiness) for d in devices]
    labels, runs = set(), []
    for i, dev in enumerate(devices):
        run = run_consensus(
            dev,
            seed=args.seed + i,
            min_iterations=args.min_iterations,
            max_iterations=args.max_iterations,
            noise=args.noise,
        )
        runs.append(run)
        labels |= run.labels(dev)
    write_labels(args.out, labels)
    if args.report:
        write_consensus_report(args.report, runs)
    for dev, (e, ne) in label_summary(labels).items():
        print(f"{dev}: {e} essential, {ne} non-essential")
    return 0


def cmd_train(args) -> int:
    from .evaluation import SplitSpec, split_time_oriented, train_model
    from .features import FeatureTable
    from .models import ForestConfig, MlpConfig, save_model

    table = FeatureTable.from_csv(args.features)
    table = table.subset(table.label >= 0)
    if not len(table):
        raise CliError(f"{args.features} has no labeled rows")
    val = None
    if args.model_kind == "ann" and args.val_fraction > 0:
        table, val, _ = split_time_oriented(table, SplitSpec(ratios=(1 - args.val_fraction, args.val_fraction, 0.0)))
    model = train_model(
        table,
        args.model_kind,
        args.seed,
        val=val,
        forest_config=ForestConfig(n_trees=args.trees, max_depth=args.max_depth, seed=args.seed),
        mlp_config=MlpConfig(epochs=args.epochs, seed=args.seed),
    )
    save_model(model, args.out)
    print(f"wrote {args.model_kind} model trained on {len(table)} rows to {args.out}")
    return 0


def _eval_table(args):
    from .features import FeatureTable
    from .synthetic import make_corpus

    if args.features:
        return FeatureTable.from_csv(args.features)
    train_days = args.train_days or (15 if args.experiment == "unseen" else 30)
    days = args.days
    if days is None:
        days = train_days + 30 if args.experiment == "temporal" else 30
    fresh = args.fresh if args.fresh is not None else (5 if args.experiment == "unseen" else 0)
    return make_corpus(days, args.window, args.seed, fresh_destinations=fresh, fresh_after_day=train_days).table


def cmd_eval(args) -> int:
    from . import evaluation as ev
    from .features import check_window

    check_window(args.window)
    if not args.features and not args.synthetic:
        raise CliError("eval needs --features FILE or --synthetic")
    table = _eval_table(args)
    table = table.subset(table.window_len == args.window)
    if not len(table):
        raise CliError(f"no rows with window length {args.window}s")
    kind = args.model_kind
    if args.experiment == "global":
        reports = [ev.run_global_experiment(table, args.window, kind, args.seed)]
    elif args.experiment == "temporal":
        reports = ev.run_temporal_experiment(table, args.train_days or 30, args.chunk_days, kind, args.seed)
    elif args.experiment == "unseen":
        rep = ev.run_unseen_destination_experiment(table, args.train_days or 15, kind, args.seed)
        print(f"unseen destinations: {rep.flags['unseen_destinations']}, shared keys: {rep.flags['shared_keys']}")
        reports = [rep]
    else:
        held = [args.held_out] if args.held_out else table.devices()
        reports = [ev.run_all_vs_one(table, d, kind, args.seed) for d in held]
    if args.out:
        ev.write_reports_csv(args.out, reports)
    if args.plot:
        ev.write_plot_series(args.plot, reports)
    sys.stdout.write(ev.summary_text(reports))
    return 0


def cmd_run(args) -> int:
    from .core import ROTATION_PERIODS
    from .runtime import Gateway, RotationConfig, load_runtime_model

    if args.rotation not in ROTATION_PERIODS:
        raise CliError(f"--rotation must be one of {', '.join(map(str, ROTATION_PERIODS))}")
    capture_dir = Path(args.capture_dir)
    if not args.unblock and not capture_dir.is_dir():
        raise CliError(f"capture directory not found: {capture_dir}")
    config = RotationConfig(
        rotation=args.rotation,
        window=args.window,
        capture_dir=capture_dir,
        roster=_read_roster(args.roster),
        model_path=Path(args.models),
        workers=args.workers,
        out_dir=Path(args.out),
    )
    config.out_dir.mkdir(parents=True, exist_ok=True)
    gw = Gateway(config, load_runtime_model(config.model_path))
    if args.unblock:
        for spec in args.unblock:
            dev, sep, dest = spec.partition(":")
            if not sep or not dest:
                raise CliError(f"--unblock expects DEVICE:DESTINATION, got {spec!r}")
            dropped = gw.unblock(dev, dest)
            print(f"{'unblocked' if dropped else 'not blocked'}: {dev} {dest}")
        return 0
    if args.follow:
        gw.follow(max_cycles=args.cycles)
    else:
        from .runtime import available_cycles

        cycles = available_cycles(capture_dir, config.roster)
        if args.cycles is not None:
            cycles = cycles[: args.cycles]
        gw.replay(cycles)
    st = gw.state
    enforced = sum(d.enforced for d in gw.history)
    print(
        f"{len(gw.history)} decisions, {enforced} enforced, "
        f"{len(st.blocklist.dns_overrides)} dns overrides, {len(st.blocklist.ip_rules)} ip rules, "
        f"{len(st.deadline_misses)} deadline misses"
    )
    return 0


def cmd_bench(args) -> int:
    from .core import ROTATION_PERIODS
    from .runtime import benchmark_scalability, load_runtime_model, write_benchmark_csv, write_sequential_csv

    bad = [r for r in args.rotations if r not in ROTATION_PERIODS]
    if bad:
        raise CliError(f"unsupported rotation periods {bad}; choose from {ROTATION_PERIODS}")
    if any(n < 1 for n in args.threads):
        raise CliError("thread counts must be >= 1")
    model = load_runtime_model(args.models) if args.models else None
    report = benchmark_scalability(
        args.rotations, args.threads, model, args.window, args.devices, args.repeats, seed=args.seed
    )
    out = Path(args.out)
    seq = Path(args.sequential_out) if args.sequential_out else out.with_name(out.stem + "_sequential.csv")
    write_benchmark_csv(out, report)
    write_sequential_csv(seq, report)
    print(f"{'r':>4} {'t_f[s]':>9} {'t_i[ms]':>8} {f'total({args.devices})[s]':>16}")
    for r, (t_f, t_i, total) in sorted(report.sequential.items()):
        print(f"{r:>4} {t_f:9.3f} {t_i * 1e3:8.2f} {total:16.2f}")
    print(f"wrote {out} and {seq}")
    return 0


def cmd_synth(args) -> int:
    from .features import check_window
    from .labeling import write_labels
    from .synthetic import DAY, EPOCH_START, default_roster, write_device_capture

    check_window(args.window)
    if args.span <= 0 or args.days <= 0:
        raise CliError("--days and --span must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    devices = default_roster(args.seed, args.fresh, days=args.days)
    roster = {d.device_id: d.addr for d in devices}
    (out / "roster.json").write_text(json.dumps(roster, indent=2, sort_keys=True) + "\n")
    labels = set()
    for d in devices:
        labels |= d.labels()
    write_labels(out / "labels.csv", labels)
    n_files = -(-args.days * DAY // args.span)
    for idx, dev in enumerate(devices):
        for i in range(n_files):
            write_device_capture(
                out / f"{dev.device_id}-{i}.pcap", dev, idx, EPOCH_START + i * args.span, args.span, args.window, args.seed
            )
    print(f"wrote {n_files * len(devices)} captures, roster.json and labels.csv to {out}")
    return 0


HANDLERS = {
    "ingest": cmd_ingest,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "run": cmd_run,
    "bench": cmd_bench,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except CliError as exc:
        parser.print_usage(sys.stderr)
        print(f"mliotrim: error: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    from .core import ContractViolation
    from .evaluation import ExperimentError
    from .labeling import ConsensusError
    from .models import ModelFileError, TrainingDiverged
    from .runtime import RuntimeFatal

    expected = (CliError, RuntimeFatal, ExperimentError, ContractViolation, ConsensusError)
    expected += (ModelFileError, TrainingDiverged, OSError, ValueError)
    try:
        return HANDLERS[args.command](args)
    except expected as exc:
        print(f"mliotrim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

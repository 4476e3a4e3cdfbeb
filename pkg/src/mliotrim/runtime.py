"""Gateway loop: rotate captures, classify destinations, emit block rules.

Each cycle reads one rotated pcap per device (``<device_id>-<cycle>.pcap``),
windows and featurizes it, classifies every (destination, window) and takes
a strict majority vote per destination.  Blocked destinations are written as
two rule files a firewall / DNS forwarder would consume.

Device files are processed by a pool of ``n`` workers in batches of ``n``;
the blocklist and per-device DNS tables are only touched by the scheduler
thread, after each batch.
"""

from __future__ import annotations

import csv
import ipaddress
import logging
import math
import os
import re
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .capture import CaptureError, DnsTable, extract_dns_table, parse_capture, write_pcap
from .core import ROTATION_PERIODS, DestinationKey, KeyKind, Label
from .features import (
    LAYOUT_HASH,
    NormalizationProfile,
    check_window,
    compute_features,
    fit_normalization,
    normalize,
    window_packets,
)
from .models import ModelFileError, load_model, scores

logger = logging.getLogger(__name__)

IP_RULES_FILE = "ipblock.rules"
DNS_OVERRIDE_FILE = "dns_override.conf"
DECISIONS_FILE = "decisions.csv"
CYCLES_FILE = "cycles.csv"
DECISION_COLUMNS = (
    "cycle",
    "device",
    "destination",
    "essential_votes",
    "non_essential_votes",
    "verdict",
    "enforced",
)


class RuntimeFatal(RuntimeError):
    """Unrecoverable runtime error (missing model, layout mismatch, bad output dir)."""


@dataclass
class RotationConfig:
    rotation: int = 60
    window: int = 60
    capture_dir: Path = Path(".")
    roster: dict[str, str] = field(default_factory=dict)  # device id -> local address
    model_path: Optional[Path] = None
    workers: int = 1
    out_dir: Path = Path(".")
    exempt_local: bool = True  # never vote on LAN addresses (gateway, resolver, peers)

    def __post_init__(self):
        if self.rotation not in ROTATION_PERIODS:
            raise ValueError(f"rotation period must be one of {ROTATION_PERIODS}, got {self.rotation}")
        check_window(self.window)
        if self.window > self.rotation:
            raise ValueError(f"window {self.window}s exceeds rotation period {self.rotation}s")
        if self.rotation % self.window:
            logger.warning("rotation %ds is not a multiple of window %ds", self.rotation, self.window)
        if self.workers < 1:
            raise ValueError("worker count must be >= 1")
        self.capture_dir = Path(self.capture_dir)
        self.out_dir = Path(self.out_dir)
        if self.model_path is not None:
            self.model_path = Path(self.model_path)


@dataclass(frozen=True)
class BlockDecision:
    device_id: str
    destination: DestinationKey
    verdict: Label
    window_votes: tuple[int, int]  # (essential, non-essential)
    cycle_index: int
    enforced: bool

    def __post_init__(self):
        if self.verdict is not vote(*self.window_votes):
            raise ValueError("verdict disagrees with the window votes")
        if self.enforced and self.verdict is not Label.NON_ESSENTIAL:
            raise ValueError("only non-essential verdicts can be enforced")


def vote(essential: int, non_essential: int) -> Label:
    """Strict majority; a tie keeps the destination (ESSENTIAL)."""
    return Label.NON_ESSENTIAL if non_essential > essential else Label.ESSENTIAL


# --------------------------------------------------------------------------
# blocklist


@dataclass
class Blocklist:
    ip_rules: set[tuple[str, str]] = field(default_factory=set)
    dns_overrides: set[tuple[str, str]] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.ip_rules) + len(self.dns_overrides)

    def copy(self) -> "Blocklist":
        return Blocklist(set(self.ip_rules), set(self.dns_overrides))

    def is_blocked(self, device_id: str, dest: DestinationKey) -> bool:
        if dest.kind is KeyKind.DOMAIN:
            return (device_id, dest.value) in self.dns_overrides
        return (device_id, dest.value) in self.ip_rules

    def block(self, device_id: str, dest: DestinationKey, dns: Optional[DnsTable] = None) -> None:
        """Block ``dest`` for one device; domains also block every address they resolved to."""
        if dest.kind is KeyKind.DOMAIN:
            self.dns_overrides.add((device_id, dest.value))
            if dns is not None:
                self.ip_rules.update((device_id, ip) for ip in dns.addresses_for(dest.value))
        else:
            self.ip_rules.add((device_id, dest.value))

    def unblock(self, device_id: str, dest: DestinationKey, dns: Optional[DnsTable] = None) -> bool:
        """Administrative removal.  Returns whether any rule was dropped."""
        before = len(self)
        if dest.kind is KeyKind.DOMAIN:
            self.dns_overrides.discard((device_id, dest.value))
            if dns is not None:
                for ip in dns.addresses_for(dest.value):
                    self.ip_rules.discard((device_id, ip))
        else:
            self.ip_rules.discard((device_id, dest.value))
        return len(self) < before

    def issubset(self, other: "Blocklist") -> bool:
        return self.ip_rules <= other.ip_rules and self.dns_overrides <= other.dns_overrides


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", newline="") as fp:
            fp.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_blocklist(b: Blocklist, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Atomically replace the IP rule and DNS override files in ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ip_path, dns_path = out / IP_RULES_FILE, out / DNS_OVERRIDE_FILE
        _atomic_write(ip_path, "".join(f"block {d} {ip}\n" for d, ip in sorted(b.ip_rules)))
        _atomic_write(dns_path, "".join(f"{d} {dom} 0.0.0.0\n" for d, dom in sorted(b.dns_overrides)))
    except OSError as exc:
        raise RuntimeFatal(f"cannot write block rules to {out}: {exc}") from exc
    return ip_path, dns_path


def read_blocklist(out_dir: str | os.PathLike) -> Blocklist:
    """Parse the two rule files back; missing files read as empty."""
    out = Path(out_dir)
    b = Blocklist()
    ip_path, dns_path = out / IP_RULES_FILE, out / DNS_OVERRIDE_FILE
    if ip_path.exists():
        for n, line in enumerate(ip_path.read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] != "block":
                raise ValueError(f"{ip_path}:{n}: bad rule {line!r}")
            b.ip_rules.add((parts[1], parts[2]))
    if dns_path.exists():
        for n, line in enumerate(dns_path.read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] != "0.0.0.0":
                raise ValueError(f"{dns_path}:{n}: bad override {line!r}")
            b.dns_overrides.add((parts[0], parts[1]))
    return b


# --------------------------------------------------------------------------
# one cycle


@dataclass
class GatewayState:
    blocklist: Blocklist = field(default_factory=Blocklist)
    dns: dict[str, DnsTable] = field(default_factory=dict)
    cycle: int = 0
    deadline_misses: list[tuple[int, float]] = field(default_factory=list)
    skipped: list[tuple[int, str, str]] = field(default_factory=list)  # (cycle, device, reason)

    def dns_for(self, device_id: str) -> DnsTable:
        return self.dns.get(device_id) or DnsTable(device_id)


@dataclass
class DeviceResult:
    device_id: str
    dns: DnsTable
    votes: dict[DestinationKey, tuple[int, int]]
    n_windows: int = 0
    n_packets: int = 0
    t_features: float = 0.0
    t_inference: float = 0.0
    fitted_profile: bool = False


def load_runtime_model(path: str | os.PathLike):
    """Load a model for the gateway; any problem is fatal."""
    p = Path(path)
    if not p.exists():
        raise RuntimeFatal(f"model file not found: {p}")
    try:
        model = load_model(p)
    except (ModelFileError, OSError, ValueError) as exc:
        raise RuntimeFatal(f"cannot load model {p}: {exc}") from exc
    if model.layout_hash != LAYOUT_HASH:
        raise RuntimeFatal(
            f"model {p} feature layout {model.layout_hash} does not match pipeline layout {LAYOUT_HASH}"
        )
    return model


def is_local(dest: DestinationKey) -> bool:
    """True for IP destinations that are not globally routable."""
    if dest.kind is not KeyKind.IP:
        return False
    return not ipaddress.ip_address(dest.value).is_global


def process_device(
    device_id: str,
    device_addr: str,
    path: str | os.PathLike,
    model,
    window: int,
    dns_before: Optional[DnsTable] = None,
    blocked: Iterable[DestinationKey] = (),
    exempt_local: bool = True,
) -> DeviceResult:
    """Featurize and classify one device's rotated capture.

    Pure with respect to gateway state: it returns the updated DNS table and
    the per-destination window votes; the caller merges them.
    """
    t0 = time.perf_counter()
    cap = parse_capture(path, device_id, device_addr)
    dns = (dns_before or DnsTable(device_id)).merged(extract_dns_table(cap, device_id))
    skip = set(blocked)
    windows = {
        k: v
        for k, v in window_packets(cap.records, dns, window, device_id).items()
        if k.destination not in skip and not (exempt_local and is_local(k.destination))
    }
    keys = list(windows)
    X = np.vstack([compute_features(windows[k]) for k in keys]) if keys else None
    t1 = time.perf_counter()
    result = DeviceResult(device_id, dns, {}, len(keys), len(cap.records), t1 - t0)
    if X is None:
        return result
    profile: Optional[NormalizationProfile] = model.profiles.get(device_id)
    if profile is None:
        # a device the model never saw; scale it against its own traffic
        profile = fit_normalization(X, device_id)
        result.fitted_profile = True
    ess = scores(model, normalize(X, profile)) > 0.5
    tally: dict[DestinationKey, list[int]] = {}
    for k, e in zip(keys, ess):
        t = tally.setdefault(k.destination, [0, 0])
        t[0 if e else 1] += 1
    result.votes = {d: (e, ne) for d, (e, ne) in sorted(tally.items())}
    result.t_inference = time.perf_counter() - t1
    return result


def capture_path(config: RotationConfig, device_id: str, cycle: int) -> Path:
    return config.capture_dir / f"{device_id}-{cycle}.pcap"


def run_cycle(
    config: RotationConfig,
    state: GatewayState,
    model,
    cycle: Optional[int] = None,
    executor: Optional[ThreadPoolExecutor] = None,
) -> list[BlockDecision]:
    """Process one rotation for every roster device and update ``state``.

    Returns decisions sorted by (device, destination).
    """
    cycle = state.cycle if cycle is None else cycle
    devices = sorted(config.roster)
    own_pool = executor is None and config.workers > 1
    pool = ThreadPoolExecutor(config.workers) if own_pool else executor
    decisions: list[BlockDecision] = []
    try:
        for start in range(0, len(devices), config.workers):
            batch = devices[start : start + config.workers]
            jobs = []
            for dev in batch:
                path = capture_path(config, dev, cycle)
                if not path.exists():
                    logger.warning("cycle %d: no capture for %s at %s", cycle, dev, path)
                    state.skipped.append((cycle, dev, "missing capture"))
                    continue
                blocked = [d for d in _known_destinations(state, dev) if state.blocklist.is_blocked(dev, d)]
                args = (dev, config.roster[dev], path, model, config.window, state.dns.get(dev), blocked, config.exempt_local)
                jobs.append((dev, pool.submit(process_device, *args) if pool else args))
            # single writer: merge the batch only after all of it is done
            for dev, job in jobs:
                try:
                    res = job.result() if pool else process_device(*job)
                except (CaptureError, OSError, ValueError) as exc:
                    logger.error("cycle %d: skipping %s: %s", cycle, dev, exc)
                    state.skipped.append((cycle, dev, str(exc)))
                    continue
                if res.fitted_profile:
                    logger.info("cycle %d: %s has no stored profile, fitted on this capture", cycle, dev)
                state.dns[dev] = res.dns
                for dest, (e, ne) in res.votes.items():
                    verdict = vote(e, ne)
                    enforce = verdict is Label.NON_ESSENTIAL
                    if enforce:
                        state.blocklist.block(dev, dest, res.dns)
                    decisions.append(BlockDecision(dev, dest, verdict, (e, ne), cycle, enforce))
    finally:
        if own_pool:
            pool.shutdown()
    state.cycle = cycle + 1
    decisions.sort(key=lambda d: (d.device_id, d.destination))
    return decisions


def _known_destinations(state: GatewayState, device_id: str) -> list[DestinationKey]:
    b = state.blocklist
    keys = [DestinationKey.domain(dom) for d, dom in b.dns_overrides if d == device_id]
    keys += [DestinationKey.ip(ip) for d, ip in b.ip_rules if d == device_id]
    return keys


def write_decisions(path: str | os.PathLike, decisions: Sequence[BlockDecision], append: bool = True) -> None:
    path = Path(path)
    fresh = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        if fresh:
            w.writerow(DECISION_COLUMNS)
        for d in decisions:
            e, ne = d.window_votes
            w.writerow([d.cycle_index, d.device_id, d.destination.value, e, ne, d.verdict.value, int(d.enforced)])


def read_decisions(path: str | os.PathLike) -> list[BlockDecision]:
    with open(path, newline="") as fp:
        return [
            BlockDecision(
                r["device"],
                DestinationKey.from_string(r["destination"]),
                Label.parse(r["verdict"]),
                (int(r["essential_votes"]), int(r["non_essential_votes"])),
                int(r["cycle"]),
                r["enforced"] == "1",
            )
            for r in csv.DictReader(fp)
        ]


# --------------------------------------------------------------------------
# rotation loop

_CAPTURE_NAME = re.compile(r"^(?P<device>.+)-(?P<cycle>\d+)\.pcap$")


def available_cycles(capture_dir: str | os.PathLike, roster: Mapping[str, str]) -> list[int]:
    """Cycle indices for which at least one roster device has a capture."""
    found = set()
    for p in Path(capture_dir).glob("*.pcap"):
        m = _CAPTURE_NAME.match(p.name)
        if m and m["device"] in roster:
            found.add(int(m["cycle"]))
    return sorted(found)


class Gateway:
    """Owns the model and state across cycles and writes every output file."""

    def __init__(self, config: RotationConfig, model=None, state: Optional[GatewayState] = None):
        self.config = config
        if model is None:
            if config.model_path is None:
                raise RuntimeFatal("no model path configured")
            model = load_runtime_model(config.model_path)
        self.model = model
        if state is None:
            state = GatewayState(blocklist=read_blocklist(config.out_dir))
        self.state = state
        self.history: list[BlockDecision] = []

    def unblock(self, device_id: str, destination: str) -> bool:
        dest = DestinationKey.from_string(destination)
        dropped = self.state.blocklist.unblock(device_id, dest, self.state.dns.get(device_id))
        emit_blocklist(self.state.blocklist, self.config.out_dir)
        return dropped

    def step(self, cycle: Optional[int] = None, executor=None) -> list[BlockDecision]:
        cycle = self.state.cycle if cycle is None else cycle
        t0 = time.perf_counter()
        decisions = run_cycle(self.config, self.state, self.model, cycle, executor)
        emit_blocklist(self.state.blocklist, self.config.out_dir)
        write_decisions(self.config.out_dir / DECISIONS_FILE, decisions)
        elapsed = time.perf_counter() - t0
        missed = elapsed > self.config.rotation
        if missed:
            self.state.deadline_misses.append((cycle, elapsed))
            logger.warning("cycle %d took %.2fs, over the %ds rotation", cycle, elapsed, self.config.rotation)
        self._log_cycle(cycle, len(decisions), elapsed, missed)
        self.history.extend(decisions)
        return decisions

    def _log_cycle(self, cycle: int, n: int, elapsed: float, missed: bool) -> None:
        path = self.config.out_dir / CYCLES_FILE
        fresh = not path.exists()
        with open(path, "a", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            if fresh:
                w.writerow(["cycle", "decisions", "elapsed_s", "deadline_missed"])
            w.writerow([cycle, n, f"{elapsed:.6f}", int(missed)])

    def replay(self, cycles: Optional[Iterable[int]] = None) -> list[BlockDecision]:
        """Process already-rotated files in cycle order, as fast as possible."""
        if cycles is None:
            cycles = available_cycles(self.config.capture_dir, self.config.roster)
        out = []
        with self._pool() as pool:
            for c in cycles:
                out += self.step(c, pool)
        return out

    def follow(self, max_cycles: Optional[int] = None, poll: float = 1.0, start_cycle: Optional[int] = None) -> None:
        """Wait for each cycle's files to appear and process them on the rotation schedule.

        A cycle starts once every roster device has a file for it, or one
        rotation period after its scheduled start, whichever comes first.
        """
        cycle = self.state.cycle if start_cycle is None else start_cycle
        scheduled = time.monotonic()
        done = 0
        with self._pool() as pool:
            while max_cycles is None or done < max_cycles:
                deadline = scheduled + self.config.rotation
                while time.monotonic() < deadline:
                    if all(capture_path(self.config, d, cycle).exists() for d in self.config.roster):
                        break
                    time.sleep(poll)
                self.step(cycle, pool)
                cycle += 1
                done += 1
                scheduled = max(deadline, time.monotonic())

    def _pool(self):
        if self.config.workers > 1:
            return ThreadPoolExecutor(self.config.workers)
        return _NoPool()


class _NoPool:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


# --------------------------------------------------------------------------
# scalability benchmark


@dataclass(frozen=True)
class BenchRow:
    r: int
    n: int
    t_f: float
    t_i: float
    T: float
    k: int
    N: int


@dataclass
class ScalabilityReport:
    rows: list[BenchRow] = field(default_factory=list)
    # r -> (t_f, t_i, devices * (t_f + t_i)), the sequential reading of a fleet total
    sequential: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    devices: int = 50

    def row(self, r: int, n: int) -> BenchRow:
        for row in self.rows:
            if row.r == r and row.n == n:
                return row
        raise KeyError((r, n))


def supported_devices(r: float, n: int, batch_time: float) -> tuple[int, int]:
    """``k = floor(r / T(n))`` batches fit in one rotation, each serving ``n`` devices."""
    if batch_time <= 0:
        raise ValueError("batch time must be positive")
    k = math.floor(r / batch_time)
    return k, n * k


def _bench_model(seed: int):
    from . import evaluation, synthetic
    from .models import ForestConfig

    corpus = synthetic.make_corpus(days=3, window=60, seed=seed)
    return evaluation.train_model(corpus.table, "rf", seed, forest_config=ForestConfig(n_trees=100, seed=seed))


def benchmark_scalability(
    rotations: Sequence[int] = ROTATION_PERIODS,
    workers: Sequence[int] = (1, 2, 4, 8),
    model=None,
    window: int = 60,
    devices: int = 50,
    repeats: int = 3,
    rate: float = 100.0,
    snaplen: int = 96,
    seed: int = 0,
    workdir: Optional[str | os.PathLike] = None,
) -> ScalabilityReport:
    """Measure per-device costs and batch times for camera-like captures.

    For each ``r`` one ``r``-second capture is written; ``t_f`` and ``t_i``
    are means over ``repeats`` sequential runs, and ``T(n)`` is the wall
    time of ``n`` concurrent workers each processing a copy of that file.
    """
    from .synthetic import EPOCH_START, camera_frames

    check_window(window)
    if model is None:
        model = _bench_model(seed)
    report = ScalabilityReport(devices=devices)
    addr = "192.168.1.50"
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for r in rotations:
            if window > r:
                raise ValueError(f"window {window}s exceeds rotation period {r}s")
            path = Path(tmp) / f"camera-{r}.pcap"
            write_pcap(path, camera_frames(addr, EPOCH_START, r, rate, seed), snaplen=snaplen)
            runs = [process_device("camera", addr, path, model, window) for _ in range(max(repeats, 1))]
            t_f = float(np.mean([x.t_features for x in runs]))
            t_i = float(np.mean([x.t_inference for x in runs]))
            report.sequential[r] = (t_f, t_i, devices * (t_f + t_i))
            for n in workers:
                with ThreadPoolExecutor(n) as pool:
                    t0 = time.perf_counter()
                    futures = [pool.submit(process_device, "camera", addr, path, model, window) for _ in range(n)]
                    for f in futures:
                        f.result()
                    T = time.perf_counter() - t0
                k, N = supported_devices(r, n, T)
                report.rows.append(BenchRow(r, n, t_f, t_i, T, k, N))
    return report


def write_benchmark_csv(path: str | os.PathLike, report: ScalabilityReport) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["r", "n", "t_f", "t_i", "T", "k", "N"])
        for row in report.rows:
            w.writerow([row.r, row.n, f"{row.t_f:.6f}", f"{row.t_i:.6f}", f"{row.T:.6f}", row.k, row.N])


def write_sequential_csv(path: str | os.PathLike, report: ScalabilityReport) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["r", "devices", "t_f", "t_i", "total"])
        for r, (t_f, t_i, total) in sorted(report.sequential.items()):
            w.writerow([r, report.devices, f"{t_f:.6f}", f"{t_i:.6f}", f"{total:.6f}"])

"""Synthetic smart-home traffic with planted essential / non-essential behaviour.

Essential destinations behave like control channels: one long-lived TLS
connection, small request/response packets at a steady cadence.
Non-essential destinations behave like telemetry or advertising uploads:
bursts over several short connections, uplink-heavy, larger packets.  Each
device scales sizes and rates by its own style, so per-device normalization
matters, and a small fraction of windows borrow the other regime.

Generation is keyed by ``(seed, device index, day)``, so a 30-day corpus is
a prefix of the 60-day corpus built with the same seed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .capture import (
    DnsTable,
    PacketRecord,
    encode_dns_response,
    encode_frame,
    write_pcap,
)
from .core import DestinationKey, Direction, Label, Transport
from .features import FeatureTable, window_packets
from .labeling import DestinationLabel, Phase, SimulatedDevice

DAY = 86400
EPOCH_START = 1704067200  # 2024-01-01T00:00:00Z
RESOLVER = "192.168.1.1"

_TCP_HDR = 54
_UDP_HDR = 42


@dataclass(frozen=True)
class Regime:
    timing: str  # "periodic" | "bursty"
    tls: float
    tcp: float
    udp: float
    flows: tuple[int, int]
    packets: float
    up_fraction: float
    size_up: tuple[float, float]
    size_down: tuple[float, float]
    remote_ports: tuple[int, ...] = (443,)


@dataclass(frozen=True)
class DeviceStyle:
    size_scale: float = 1.0
    rate_scale: float = 1.0
    control_port: int = 443


def control_regime(style: DeviceStyle, rng: np.random.Generator) -> Regime:
    j = rng.uniform(0.85, 1.15)
    return Regime(
        timing="periodic",
        tls=0.9,
        tcp=0.1,
        udp=0.0,
        flows=(1, 1),
        packets=10 * style.rate_scale * j,
        up_fraction=0.5,
        size_up=(110 * style.size_scale * j, 15),
        size_down=(150 * style.size_scale * j, 25),
        remote_ports=(style.control_port,),
    )


def telemetry_regime(style: DeviceStyle, rng: np.random.Generator) -> Regime:
    j = rng.uniform(0.8, 1.2)
    return Regime(
        timing="bursty",
        tls=0.6,
        tcp=0.15,
        udp=0.25,
        flows=(2, 6),
        packets=30 * style.rate_scale * j,
        up_fraction=0.75,
        size_up=(min(700 * style.size_scale * j, 1300), 250),
        size_down=(90, 30),
        remote_ports=(443, 80, 8080),
    )


@dataclass(frozen=True)
class DestinationSpec:
    key: DestinationKey
    ips: tuple[str, ...]
    label: Label
    regime: Regime
    phase: Phase = Phase.ACTIVITY
    first_day: int = 0
    windows_per_day: float = 6.0


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    addr: str
    style: DeviceStyle
    destinations: tuple[DestinationSpec, ...]

    def labels(self, through_day: Optional[int] = None) -> set[DestinationLabel]:
        return {
            DestinationLabel(self.device_id, d.key, d.label, d.phase)
            for d in self.destinations
            if through_day is None or d.first_day <= through_day
        }


# name, style, essential count, non-essential count; the two speakers are twins
_ROSTER = (
    ("speaker-a", DeviceStyle(1.0, 1.0, 443), 2, 6),
    ("speaker-b", DeviceStyle(1.0, 1.0, 443), 2, 5),
    ("camera", DeviceStyle(1.6, 2.0, 8883), 1, 5),
    ("bulb-a", DeviceStyle(0.6, 0.5, 443), 1, 1),
    ("bulb-b", DeviceStyle(0.7, 0.6, 9999), 1, 2),
    ("plug", DeviceStyle(0.65, 0.5, 443), 2, 2),
    ("hub", DeviceStyle(0.8, 0.7, 443), 1, 1),
    ("tv-stick", DeviceStyle(1.3, 1.5, 443), 1, 8),
)
_FRESH_DEVICES = ("speaker-a", "speaker-b", "camera", "tv-stick")


def _public_ip(rng: np.random.Generator, used: set) -> str:
    while True:
        a = int(rng.choice([3, 13, 18, 34, 35, 44, 52, 54, 99, 104, 151, 185]))
        ip = f"{a}.{rng.integers(0, 256)}.{rng.integers(0, 256)}.{rng.integers(1, 255)}"
        if ip not in used:
            used.add(ip)
            return ip


def default_roster(
    seed: int = 0,
    fresh_destinations: int = 0,
    fresh_after_day: int = 15,
    days: int = 30,
    windows_per_day: float = 6.0,
) -> list[DeviceSpec]:
    """Eight devices modelled on a typical smart-home mix.

    ``fresh_destinations`` non-essential destinations are added to four of
    the devices, each first contacted on a day after ``fresh_after_day``.
    """
    rng = np.random.default_rng([seed, 7919])
    used: set[str] = set()
    devices = []
    for idx, (name, style, n_ess, n_ne) in enumerate(_ROSTER):
        dests = []
        for i in range(n_ess):
            key = DestinationKey.domain(f"api{i}.{name}.example")
            dests.append(
                DestinationSpec(
                    key,
                    (_public_ip(rng, used),),
                    Label.ESSENTIAL,
                    control_regime(style, rng),
                    Phase.POWER_ON,
                    windows_per_day=windows_per_day * 1.5,
                )
            )
        for i in range(n_ne):
            ips = tuple(_public_ip(rng, used) for _ in range(int(rng.integers(1, 3))))
            if i % 4 == 3:
                # some trackers are contacted by literal address, without DNS
                key = DestinationKey.ip(ips[0])
                ips = ips[:1]
            else:
                key = DestinationKey.domain(f"metrics{i}.{name}.example")
            dests.append(
                DestinationSpec(
                    key,
                    ips,
                    Label.NON_ESSENTIAL,
                    telemetry_regime(style, rng),
                    Phase.POWER_ON if i < 2 else Phase.ACTIVITY,
                    windows_per_day=windows_per_day,
                )
            )
        if name in _FRESH_DEVICES and fresh_destinations:
            lo = fresh_after_day + 1
            hi = max(lo + 1, days)
            for i in range(fresh_destinations):
                key = DestinationKey.domain(f"ads{i}.new.{name}.example")
                dests.append(
                    DestinationSpec(
                        key,
                        (_public_ip(rng, used),),
                        Label.NON_ESSENTIAL,
                        telemetry_regime(style, rng),
                        Phase.ACTIVITY,
                        first_day=int(rng.integers(lo, hi)),
                        windows_per_day=windows_per_day,
                    )
                )
        devices.append(DeviceSpec(name, f"192.168.1.{10 + idx}", style, tuple(dests)))
    return devices


# --------------------------------------------------------------------------
# packet generation


def _window_records(
    dev: DeviceSpec,
    dest: DestinationSpec,
    regime: Regime,
    ws: float,
    w: float,
    rng: np.random.Generator,
    control_local_port: int,
) -> list[PacketRecord]:
    n = 2 + int(rng.poisson(regime.packets))
    end = ws + w
    if regime.timing == "periodic":
        period = 0.9 * w / n
        t0 = ws + rng.uniform(0.0, 0.1 * w)
        ts = t0 + period * np.arange(n) + rng.normal(0.0, 0.02 * period, n)
    else:
        bursts = int(rng.integers(1, 4))
        starts = rng.uniform(ws, ws + 0.8 * w, bursts)
        owner = rng.integers(0, bursts, n)
        ts = starts[owner] + np.cumsum(rng.exponential(0.03, n))
    ts = np.clip(np.sort(ts), ws, np.nextafter(end, ws))

    lo, hi = regime.flows
    nflows = int(rng.integers(lo, hi + 1))
    probs = np.array([regime.tls, regime.tcp, regime.udp])
    flows = []
    for k in range(nflows):
        kind = int(rng.choice(3, p=probs / probs.sum()))
        ip = dest.ips[int(rng.integers(0, len(dest.ips)))]
        if kind == 2:
            rport = int(rng.choice([123, 443, 5683, int(rng.integers(10000, 60000))]))
        else:
            rport = int(rng.choice(regime.remote_ports))
        lport = control_local_port if nflows == 1 else int(rng.integers(32768, 61000))
        flows.append((kind, ip, lport, rport))

    if regime.timing == "periodic":
        up = (np.arange(n) % 2) == 0
    else:
        up = rng.random(n) < regime.up_fraction
    mu_u, sd_u = regime.size_up
    mu_d, sd_d = regime.size_down
    sizes = np.where(up, rng.normal(mu_u, sd_u, n), rng.normal(mu_d, sd_d, n))
    flow_of = rng.integers(0, nflows, n)

    out = []
    for i in range(n):
        kind, ip, lport, rport = flows[flow_of[i]]
        transport = Transport.UDP if kind == 2 else Transport.TCP
        hdr = _UDP_HDR if kind == 2 else _TCP_HDR
        size = int(np.clip(round(sizes[i]), hdr, 1514))
        payload = size - hdr
        uplink = bool(up[i])
        out.append(
            PacketRecord(
                timestamp=round(float(ts[i]), 6),
                src_ip=dev.addr if uplink else ip,
                dst_ip=ip if uplink else dev.addr,
                src_port=lport if uplink else rport,
                dst_port=rport if uplink else lport,
                transport=transport,
                is_tls=kind == 0 and payload >= 2,
                size=size,
                payload_len=payload,
                direction=Direction.UPLINK if uplink else Direction.DOWNLINK,
            )
        )
    return out


def device_day(
    dev: DeviceSpec,
    dev_index: int,
    day: int,
    w: int,
    seed: int = 0,
    start: int = EPOCH_START,
    swap_fraction: float = 0.01,
) -> tuple[list[PacketRecord], list[tuple[float, str, str]]]:
    """One day of traffic for ``dev``: time-sorted records and DNS entries."""
    rng = np.random.default_rng([seed, dev_index, day])
    day_start = start + day * DAY
    n_windows = DAY // w
    records: list[PacketRecord] = []
    dns: list[tuple[float, str, str]] = []
    control_port = int(rng.integers(32768, 61000))
    for dest in dev.destinations:
        if day < dest.first_day:
            continue
        k = int(rng.poisson(dest.windows_per_day))
        if day == dest.first_day:
            k = max(k, 1)
        k = min(k, n_windows)
        if k == 0:
            continue
        chosen = np.sort(rng.choice(n_windows, size=k, replace=False))
        if dest.key.kind.value == "DOMAIN":
            first_ts = day_start + int(chosen[0]) * w
            for ip in dest.ips:
                dns.append((float(max(day_start, first_ts - 1)), ip, dest.key.value))
        for widx in chosen:
            regime = dest.regime
            if rng.random() < swap_fraction:
                other = telemetry_regime if dest.label is Label.ESSENTIAL else control_regime
                regime = other(dev.style, rng)
            ws = day_start + int(widx) * w
            records.extend(_window_records(dev, dest, regime, ws, w, rng, control_port))
    records.sort(key=lambda r: r.timestamp)
    return records, dns


@dataclass
class SyntheticCorpus:
    devices: list[DeviceSpec]
    table: FeatureTable
    window: int
    days: int
    start: int = EPOCH_START
    seed: int = 0

    @property
    def labels(self) -> set[DestinationLabel]:
        out: set[DestinationLabel] = set()
        for dev in self.devices:
            out |= dev.labels()
        return out


def make_corpus(
    days: int = 30,
    window: int = 60,
    seed: int = 0,
    fresh_destinations: int = 0,
    fresh_after_day: int = 15,
    windows_per_day: float = 6.0,
    swap_fraction: float = 0.01,
    devices: Optional[list[DeviceSpec]] = None,
) -> SyntheticCorpus:
    """Labeled feature table for ``days`` of synthetic traffic.

    Packets go through the regular windowing and feature code; only the
    capture-file step is skipped.
    """
    from .labeling import assign_labels

    if devices is None:
        devices = default_roster(seed, fresh_destinations, fresh_after_day, days, windows_per_day)
    tables = []
    for idx, dev in enumerate(devices):
        for day in range(days):
            records, dns = device_day(dev, idx, day, window, seed, swap_fraction=swap_fraction)
            if not records:
                continue
            groups = window_packets(records, DnsTable(dev.device_id, tuple(dns)), window)
            tables.append(FeatureTable.from_windows(groups))
    table = FeatureTable.concat(tables)
    labels: set[DestinationLabel] = set()
    for dev in devices:
        labels |= dev.labels()
    table = assign_labels(table, labels, "drop")
    return SyntheticCorpus(devices, table.sorted(), window, days, EPOCH_START, seed)


# --------------------------------------------------------------------------
# capture files


def _frame_for(r: PacketRecord) -> bytes:
    hdr = _UDP_HDR if r.transport is Transport.UDP else _TCP_HDR
    n = max(r.size - hdr, 0)
    if r.is_tls:
        payload = b"\x17\x03\x03" + bytes(max(n - 3, 0))
        payload = payload[:n]
    else:
        payload = bytes(n)
    return encode_frame(r.src_ip, r.dst_ip, r.transport, r.src_port or 0, r.dst_port or 0, payload)


def records_to_frames(
    records: Iterable[PacketRecord],
    dns_entries: Iterable[tuple[float, str, str]] = (),
    device_addr: Optional[str] = None,
) -> list[tuple[float, bytes]]:
    """Encode records (plus DNS responses from the local resolver) as frames."""
    frames = [(r.timestamp, _frame_for(r)) for r in records]
    by_answer: dict[tuple[float, str], list[str]] = {}
    for t, ip, dom in dns_entries:
        by_answer.setdefault((t, dom), []).append(ip)
    for (t, dom), ips in sorted(by_answer.items()):
        msg = encode_dns_response(dom, sorted(ips))
        frames.append((t, encode_frame(RESOLVER, device_addr, Transport.UDP, 53, 53000, msg)))
    frames.sort(key=lambda f: f[0])
    return frames


def write_device_capture(
    path: str | os.PathLike,
    dev: DeviceSpec,
    dev_index: int,
    start: float,
    duration: float,
    w: int = 60,
    seed: int = 0,
    snaplen: int = 65535,
) -> int:
    """Write ``duration`` seconds of ``dev`` traffic starting at ``start``."""
    day = int((start - EPOCH_START) // DAY)
    records, dns = [], []
    d = day
    while EPOCH_START + d * DAY < start + duration:
        r, e = device_day(dev, dev_index, d, w, seed)
        records += r
        dns += e
        d += 1
    records = [r for r in records if start <= r.timestamp < start + duration]
    dns = [e for e in dns if start <= e[0] < start + duration]
    return write_pcap(path, records_to_frames(records, dns, dev.addr), snaplen=snaplen)


def camera_frames(
    device_addr: str,
    start: float,
    duration: float,
    rate: float = 100.0,
    seed: int = 0,
) -> list[tuple[float, bytes]]:
    """Camera-like capture: an uplink video stream plus control and telemetry.

    About ``rate`` packets per second in total.
    """
    rng = np.random.default_rng(seed)
    relay, control, metrics = "52.10.20.30", "52.10.20.31", "3.120.40.50"
    frames = [
        (start, encode_frame(RESOLVER, device_addr, Transport.UDP, 53, 53000, encode_dns_response("relay.cam.example", [relay]))),
        (start, encode_frame(RESOLVER, device_addr, Transport.UDP, 53, 53001, encode_dns_response("ctl.cam.example", [control]))),
        (start, encode_frame(RESOLVER, device_addr, Transport.UDP, 53, 53002, encode_dns_response("metrics.cam.example", [metrics]))),
    ]
    n_video = int(rate * 0.85 * duration)
    ts = np.sort(rng.uniform(start, start + duration, n_video))
    tls_hdr = b"\x17\x03\x03"
    for i, t in enumerate(ts):
        if i % 6 == 5:
            frames.append((t, encode_frame(relay, device_addr, Transport.TCP, 443, 40000)))
        else:
            body = tls_hdr + bytes(int(rng.integers(900, 1300)))
            frames.append((t, encode_frame(device_addr, relay, Transport.TCP, 40000, 443, body)))
    n_ctl = int(rate * 0.1 * duration)
    for t in np.sort(rng.uniform(start, start + duration, n_ctl)):
        up = rng.random() < 0.5
        body = tls_hdr + bytes(int(rng.integers(80, 200)))
        src, dst = (device_addr, control) if up else (control, device_addr)
        sp, dp = (41000, 8883) if up else (8883, 41000)
        frames.append((t, encode_frame(src, dst, Transport.TCP, sp, dp, body)))
    n_met = int(rate * 0.05 * duration)
    for t in np.sort(rng.uniform(start, start + duration, n_met)):
        port = int(rng.integers(42000, 42010))
        frames.append((t, encode_frame(device_addr, metrics, Transport.UDP, port, 443, bytes(int(rng.integers(300, 1200))))))
    frames.sort(key=lambda f: f[0])
    return frames


# --------------------------------------------------------------------------
# labeling fixtures


def random_simulated_device(
    rng: np.random.Generator,
    idx: int = 0,
    flakiness: float = 0.0,
    max_destinations: int = 40,
) -> SimulatedDevice:
    """Random device: 1-3 functions, a planted set of essential destinations."""
    n = int(rng.integers(2, max_destinations + 1))
    dests = [DestinationKey.domain(f"d{j:03d}.dev{idx}.example") for j in range(n)]
    n_ess = int(rng.integers(0, min(4, n) + 1))
    essential = [dests[j] for j in rng.choice(n, size=n_ess, replace=False)]
    n_funcs = int(rng.integers(1, 4))
    requires = {f"f{k}": set() for k in range(n_funcs)}
    for d in essential:
        # every essential destination backs at least one function
        owners = [k for k in range(n_funcs) if rng.random() < 0.5] or [int(rng.integers(0, n_funcs))]
        for k in owners:
            requires[f"f{k}"].add(d)
    boot = {d for d in dests if rng.random() < 0.4}
    return SimulatedDevice(
        f"dev{idx}",
        {f: frozenset(s) for f, s in requires.items()},
        frozenset(dests),
        flakiness,
        frozenset(boot),
    )

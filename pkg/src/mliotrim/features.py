"""Per-destination windowed traffic statistics.

Packets of one device are grouped by destination (IP replaced by the DNS
name when one is known) and by epoch-aligned, non-overlapping windows of
``w`` seconds.  Each group yields a 204-value vector: twelve 16-stat blocks
(protocol TCP/TLS/UDP/ANY x direction UP/DOWN/ANY) followed by twelve
window-level scalars.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .capture import DnsTable, PacketRecord, resolve_destination
from .core import WINDOW_LENGTHS, DestinationKey, Label, Transport

PROTOCOLS = ("tcp", "tls", "udp", "any")
DIRECTIONS = ("up", "down", "any")
BLOCK_STATS = (
    "count",
    "size_sum",
    "size_mean",
    "size_median",
    "size_std",
    "size_min",
    "size_max",
    "size_q1",
    "size_q3",
    "iat_mean",
    "iat_median",
    "iat_std",
    "iat_min",
    "iat_max",
    "iat_q1",
    "iat_q3",
)
SCALARS = (
    "tcp_udp_pkt_ratio",
    "tcp_udp_byte_ratio",
    "tls_tcp_pkt_ratio",
    "tls_tcp_byte_ratio",
    "up_down_pkt_ratio",
    "up_down_byte_ratio",
    "udp_local_ports",
    "udp_remote_ports",
    "tcp_local_ports",
    "tcp_remote_ports",
    "tcp_flows",
    "udp_flows",
)
FEATURE_NAMES = tuple(
    f"{p}_{d}_{s}" for p in PROTOCOLS for d in DIRECTIONS for s in BLOCK_STATS
) + SCALARS
N_FEATURES = len(FEATURE_NAMES)
N_BLOCKS = len(PROTOCOLS) * len(DIRECTIONS)
BLOCK_WIDTH = len(BLOCK_STATS)
LAYOUT_HASH = hashlib.sha256("\n".join(FEATURE_NAMES).encode()).hexdigest()[:16]

assert N_FEATURES == 204


def feature_index(protocol: str, direction: str, stat: str) -> int:
    b = PROTOCOLS.index(protocol) * len(DIRECTIONS) + DIRECTIONS.index(direction)
    return b * BLOCK_WIDTH + BLOCK_STATS.index(stat)


def scalar_index(name: str) -> int:
    return N_BLOCKS * BLOCK_WIDTH + SCALARS.index(name)


@dataclass(frozen=True, order=True)
class WindowKey:
    device_id: str
    destination: DestinationKey
    window_start: int
    window_len: int


def check_window(w: int) -> int:
    if w not in WINDOW_LENGTHS:
        raise ValueError(f"window length must be one of {WINDOW_LENGTHS}, got {w}")
    return int(w)


def window_packets(
    records: Iterable[PacketRecord],
    dns: DnsTable,
    w: int,
    device_id: Optional[str] = None,
) -> dict[WindowKey, list[PacketRecord]]:
    """Partition records by (destination, epoch-aligned window).

    Keys come back sorted by destination then window start.
    """
    w = check_window(w)
    device_id = dns.device_id if device_id is None else device_id
    groups: dict[WindowKey, list[PacketRecord]] = {}
    resolved: dict[tuple[str, float], DestinationKey] = {}
    for r in records:
        ip = r.remote_ip
        dest = resolved.get((ip, r.timestamp))
        if dest is None:
            dest = resolve_destination(dns, ip, r.timestamp)
            resolved[(ip, r.timestamp)] = dest
        start = int(math.floor(r.timestamp / w)) * w
        key = WindowKey(device_id, dest, start, w)
        bucket = groups.get(key)
        if bucket is None:
            groups[key] = [r]
        else:
            bucket.append(r)
    return {k: groups[k] for k in sorted(groups)}


def _quantile(xs: np.ndarray, p: float) -> float:
    pos = p * (len(xs) - 1)
    lo = int(pos)
    frac = pos - lo
    if frac == 0.0:
        return float(xs[lo])
    return float(xs[lo] + frac * (xs[lo + 1] - xs[lo]))


def _distribution(xs: np.ndarray, with_sum: bool) -> list[float]:
    xs = np.sort(xs)
    mean = float(xs.mean())
    head = [float(xs.sum())] if with_sum else []
    return head + [
        mean,
        _quantile(xs, 0.5),
        float(np.sqrt(np.mean((xs - mean) ** 2))),
        float(xs[0]),
        float(xs[-1]),
        _quantile(xs, 0.25),
        _quantile(xs, 0.75),
    ]


def _block(ts: np.ndarray, size: np.ndarray) -> list[float]:
    n = len(ts)
    if n == 0:
        return [0.0] * BLOCK_WIDTH
    out = [float(n)] + _distribution(size, with_sum=True)
    if n < 2:
        return out + [0.0] * 7
    return out + _distribution(np.diff(np.sort(ts)), with_sum=False)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_features(packets: Sequence[PacketRecord]) -> np.ndarray:
    """204-value statistics vector for one window's packets."""
    n = len(packets)
    if n == 0:
        raise ValueError("compute_features needs at least one packet")
    ts = np.fromiter((p.timestamp for p in packets), float, n)
    size = np.fromiter((p.size for p in packets), float, n)
    transport = [p.transport for p in packets]
    tcp = np.fromiter((t is Transport.TCP for t in transport), bool, n)
    udp = np.fromiter((t is Transport.UDP for t in transport), bool, n)
    tls = np.fromiter((p.is_tls for p in packets), bool, n) & tcp
    up = np.fromiter((p.uplink for p in packets), bool, n)

    proto_masks = (tcp, tls, udp, None)
    dir_masks = (up, ~up, None)
    values: list[float] = []
    for pm in proto_masks:
        for dm in dir_masks:
            if pm is None and dm is None:
                values += _block(ts, size)
                continue
            m = pm if dm is None else dm if pm is None else pm & dm
            values += _block(ts[m], size[m])

    tcp_bytes = float(size[tcp].sum())
    udp_bytes = float(size[udp].sum())
    tls_bytes = float(size[tls].sum())
    up_bytes = float(size[up].sum())
    down_bytes = float(size[~up].sum())
    n_tcp, n_udp, n_tls = int(tcp.sum()), int(udp.sum()), int(tls.sum())
    n_up = int(up.sum())

    tcp_local, tcp_remote, udp_local, udp_remote = set(), set(), set(), set()
    tcp_flows, udp_flows = set(), set()
    for p in packets:
        if p.transport is Transport.TCP:
            lp, rp = p.local_port, p.remote_port
            tcp_local.add(lp)
            tcp_remote.add(rp)
            tcp_flows.add((lp, p.remote_ip, rp))
        elif p.transport is Transport.UDP:
            lp, rp = p.local_port, p.remote_port
            udp_local.add(lp)
            udp_remote.add(rp)
            udp_flows.add((lp, p.remote_ip, rp))

    values += [
        _ratio(n_tcp, n_udp),
        _ratio(tcp_bytes, udp_bytes),
        _ratio(n_tls, n_tcp),
        _ratio(tls_bytes, tcp_bytes),
        _ratio(n_up, n - n_up),
        _ratio(up_bytes, down_bytes),
        float(len(udp_local)),
        float(len(udp_remote)),
        float(len(tcp_local)),
        float(len(tcp_remote)),
        float(len(tcp_flows)),
        float(len(udp_flows)),
    ]
    return np.asarray(values, dtype=float)


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationProfile:
    device_id: str
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        if self.minimum.shape != (N_FEATURES,) or self.maximum.shape != (N_FEATURES,):
            raise ValueError("profile must carry 204 (min, max) pairs")
        if np.any(self.maximum < self.minimum):
            raise ValueError("profile max below min")


def fit_normalization(train: Sequence[np.ndarray] | np.ndarray, device_id: str) -> NormalizationProfile:
    X = np.asarray(train, dtype=float)
    if X.size == 0:
        raise ValueError(f"no training data for device {device_id}")
    X = X.reshape(-1, N_FEATURES)
    return NormalizationProfile(device_id, X.min(axis=0), X.max(axis=0))


def normalize(v: np.ndarray, p: NormalizationProfile) -> np.ndarray:
    """Min-max scale into [0, 1]; constant features map to 0.  Accepts 1-D or 2-D."""
    v = np.asarray(v, dtype=float)
    span = p.maximum - p.minimum
    safe = np.where(span > 0, span, 1.0)
    out = np.clip((v - p.minimum) / safe, 0.0, 1.0)
    return np.where(span > 0, out, 0.0)


# --------------------------------------------------------------------------
# feature tables


@dataclass
class FeatureTable:
    """Rows of (device, destination, window) with their 204 features.

    ``label`` holds the model target (1 essential, 0 non-essential) and -1
    where no ground truth is attached.
    """

    device: np.ndarray
    destination: np.ndarray
    window_start: np.ndarray
    window_len: np.ndarray
    X: np.ndarray
    label: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.device)
        self.device = np.asarray(self.device, dtype=object)
        self.destination = np.asarray(self.destination, dtype=object)
        self.window_start = np.asarray(self.window_start, dtype=np.int64)
        self.window_len = np.asarray(self.window_len, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=float).reshape(n, N_FEATURES)
        if self.label is None:
            self.label = np.full(n, -1, dtype=np.int8)
        self.label = np.asarray(self.label, dtype=np.int8)

    def __len__(self) -> int:
        return len(self.device)

    @property
    def labeled(self) -> bool:
        return bool(len(self)) and bool(np.all(self.label >= 0))

    def devices(self) -> list[str]:
        return sorted(set(self.device.tolist()))

    def subset(self, mask_or_index) -> "FeatureTable":
        idx = np.asarray(mask_or_index)
        return FeatureTable(
            self.device[idx],
            self.destination[idx],
            self.window_start[idx],
            self.window_len[idx],
            self.X[idx],
            self.label[idx],
            dict(self.meta),
        )

    def sorted(self) -> "FeatureTable":
        order = sorted(
            range(len(self)),
            key=lambda i: (self.device[i], self.destination[i], self.window_start[i]),
        )
        return self.subset(np.asarray(order, dtype=np.int64))

    @classmethod
    def empty(cls) -> "FeatureTable":
        return cls([], [], [], [], np.zeros((0, N_FEATURES)))

    @classmethod
    def concat(cls, tables: Sequence["FeatureTable"]) -> "FeatureTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls.empty()
        return cls(
            np.concatenate([t.device for t in tables]),
            np.concatenate([t.destination for t in tables]),
            np.concatenate([t.window_start for t in tables]),
            np.concatenate([t.window_len for t in tables]),
            np.vstack([t.X for t in tables]),
            np.concatenate([t.label for t in tables]),
        )

    @classmethod
    def from_windows(cls, windows: Mapping[WindowKey, Sequence[PacketRecord]]) -> "FeatureTable":
        keys = list(windows)
        if not keys:
            return cls.empty()
        X = np.vstack([compute_features(windows[k]) for k in keys])
        return cls(
            [k.device_id for k in keys],
            [k.destination.value for k in keys],
            [k.window_start for k in keys],
            [k.window_len for k in keys],
            X,
        )

    def to_csv(self, path: str | os.PathLike, include_label: Optional[bool] = None) -> None:
        """Write ``device,destination,window_start,window_len,f000..f203[,label]``."""
        if include_label is None:
            include_label = self.labeled
        t = self.sorted()
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            header = ["device", "destination", "window_start", "window_len"]
            header += [f"f{i:03d}" for i in range(N_FEATURES)]
            w.writerow(header + (["label"] if include_label else []))
            for i in range(len(t)):
                row = [t.device[i], t.destination[i], int(t.window_start[i]), int(t.window_len[i])]
                row += [repr(float(x)) for x in t.X[i]]
                if include_label:
                    lab = int(t.label[i])
                    row.append(Label.from_target(lab).value if lab >= 0 else "")
                w.writerow(row)

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "FeatureTable":
        with open(path, newline="") as fp:
            reader = csv.reader(fp)
            header = next(reader)
            has_label = header[-1] == "label"
            if header[4 : 4 + N_FEATURES] != [f"f{i:03d}" for i in range(N_FEATURES)]:
                raise ValueError(f"{path}: unexpected feature columns")
            dev, dst, ws, wl, rows, labels = [], [], [], [], [], []
            for row in reader:
                dev.append(row[0])
                dst.append(row[1])
                ws.append(int(row[2]))
                wl.append(int(row[3]))
                rows.append([float(x) for x in row[4 : 4 + N_FEATURES]])
                if has_label and row[-1]:
                    labels.append(Label.parse(row[-1]).target)
                else:
                    labels.append(-1)
        X = np.asarray(rows, dtype=float).reshape(len(rows), N_FEATURES)
        return cls(dev, dst, ws, wl, X, np.asarray(labels, dtype=np.int8))


def extract_features(
    records: Sequence[PacketRecord], dns: DnsTable, w: int, device_id: Optional[str] = None
) -> FeatureTable:
    return FeatureTable.from_windows(window_packets(records, dns, w, device_id))

"""Offline pcap ingest: packet records, DNS A-record tables, destination keys.

Reading is done with ``struct`` directly against the libpcap file layout::

    Global Header | Packet Header | Packet Data | Packet Header | ...

Supported link types are Ethernet (with 802.1Q tags), raw IP, Linux cooked
capture and BSD loopback.  Frame builders used by the synthetic generators
and the test fixtures live here too so that encoding and decoding stay in
one place.
"""

from __future__ import annotations

import bisect
import csv
import ipaddress
import logging
import os
import socket
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

from .core import DestinationKey, Direction, Transport

logger = logging.getLogger(__name__)

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_RAW_ALT = 12
LINKTYPE_LINUX_SLL = 113

_GLOBAL_HDR = struct.Struct("IHHiIII")
_ETHERTYPE_IPV4 = 0x0800
_ETHERTYPE_IPV6 = 0x86DD
_ETHERTYPE_VLAN = (0x8100, 0x88A8)
_IPV6_EXT_HEADERS = (0, 43, 44, 60)

TLS_RECORD_TYPES = frozenset((20, 21, 22, 23))
DNS_PORT = 53


class CaptureError(Exception):
    """The capture file cannot be read at all."""


class MalformedFrame(Exception):
    pass


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: Optional[int]
    dst_port: Optional[int]
    transport: Transport
    is_tls: bool
    size: int
    payload_len: int
    direction: Direction

    @property
    def uplink(self) -> bool:
        return self.direction is Direction.UPLINK

    @property
    def remote_ip(self) -> str:
        return self.dst_ip if self.direction is Direction.UPLINK else self.src_ip

    @property
    def local_port(self) -> Optional[int]:
        return self.src_port if self.direction is Direction.UPLINK else self.dst_port

    @property
    def remote_port(self) -> Optional[int]:
        return self.dst_port if self.direction is Direction.UPLINK else self.src_port


@dataclass
class CaptureResult:
    """Everything ``parse_capture`` learned from one file."""

    device_id: str
    records: list[PacketRecord] = field(default_factory=list)
    dns_messages: list[tuple[float, bytes]] = field(default_factory=list)
    frame_count: int = 0
    malformed: int = 0
    non_ip: int = 0


def is_tls_payload(payload: bytes) -> bool:
    return len(payload) >= 2 and payload[0] in TLS_RECORD_TYPES and payload[1] == 3


def canonical_ip(addr: str) -> str:
    return ipaddress.ip_address(addr).compressed


# --------------------------------------------------------------------------
# pcap file layer


def iter_pcap(path: str | os.PathLike) -> Iterator[tuple[float, int, bytes, int]]:
    """Yield ``(timestamp, orig_len, data, linktype)`` per record.

    A record header that runs past the end of the file yields ``data=None``
    once and stops; callers count it as a malformed frame.
    """
    try:
        fp = open(path, "rb")
    except OSError as exc:
        raise CaptureError(f"cannot open capture {path}: {exc}") from exc
    with fp:
        head = fp.read(_GLOBAL_HDR.size)
        if len(head) != _GLOBAL_HDR.size:
            raise CaptureError(f"{path}: missing pcap global header")
        (magic,) = struct.unpack("<I", head[:4])
        if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            endian = "<"
        else:
            (magic,) = struct.unpack(">I", head[:4])
            if magic not in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
                raise CaptureError(f"{path}: not a pcap file (magic {head[:4].hex()})")
            endian = ">"
        frac = 1e-9 if magic == PCAP_MAGIC_NS else 1e-6
        _, _, _, _, _, _, linktype = struct.unpack(endian + "IHHiIII", head)
        rec = struct.Struct(endian + "IIII")
        while True:
            hdr = fp.read(rec.size)
            if not hdr:
                return
            if len(hdr) != rec.size:
                yield 0.0, 0, None, linktype
                return
            sec, sub, incl, orig = rec.unpack(hdr)
            data = fp.read(incl)
            if len(data) != incl:
                yield sec + sub * frac, orig, None, linktype
                return
            yield sec + sub * frac, orig, data, linktype


def write_pcap(
    path: str | os.PathLike,
    frames: Iterable[tuple[float, bytes]],
    linktype: int = LINKTYPE_ETHERNET,
    nanosecond: bool = False,
    snaplen: int = 65535,
) -> int:
    """Write ``(timestamp, frame_bytes)`` pairs as a little-endian pcap file."""
    magic = PCAP_MAGIC_NS if nanosecond else PCAP_MAGIC_US
    scale = 10**9 if nanosecond else 10**6
    n = 0
    with open(path, "wb") as fp:
        fp.write(struct.pack("<IHHiIII", magic, 2, 4, 0, 0, snaplen, linktype))
        for ts, frame in frames:
            ticks = round(ts * scale)
            sec, sub = divmod(ticks, scale)
            data = frame[:snaplen]
            fp.write(struct.pack("<IIII", sec, sub, len(data), len(frame)))
            fp.write(data)
            n += 1
    return n


# --------------------------------------------------------------------------
# frame decoding


def _strip_link(data: bytes, linktype: int) -> tuple[int, bytes]:
    """Return ``(ethertype, network_layer_bytes)``; ethertype 0 means non-IP."""
    if linktype == LINKTYPE_ETHERNET:
        if len(data) < 14:
            raise MalformedFrame("short ethernet header")
        off = 12
        (etype,) = struct.unpack_from("!H", data, off)
        off += 2
        while etype in _ETHERTYPE_VLAN:
            if len(data) < off + 4:
                raise MalformedFrame("short vlan tag")
            (etype,) = struct.unpack_from("!H", data, off + 2)
            off += 4
        return etype, data[off:]
    if linktype in (LINKTYPE_RAW, LINKTYPE_RAW_ALT):
        if not data:
            raise MalformedFrame("empty raw frame")
        version = data[0] >> 4
        return {4: _ETHERTYPE_IPV4, 6: _ETHERTYPE_IPV6}.get(version, 0), data
    if linktype == LINKTYPE_LINUX_SLL:
        if len(data) < 16:
            raise MalformedFrame("short sll header")
        (etype,) = struct.unpack_from("!H", data, 14)
        return etype, data[16:]
    if linktype == LINKTYPE_NULL:
        if len(data) < 4:
            raise MalformedFrame("short loopback header")
        family = struct.unpack_from("<I", data, 0)[0]
        if family == 2:
            return _ETHERTYPE_IPV4, data[4:]
        if family in (10, 24, 28, 30):
            return _ETHERTYPE_IPV6, data[4:]
        return 0, data[4:]
    raise MalformedFrame(f"unsupported linktype {linktype}")


def _decode_ip(etype: int, pkt: bytes):
    """Return ``(src, dst, proto, l4_bytes, l4_len, first_fragment)``."""
    if etype == _ETHERTYPE_IPV4:
        if len(pkt) < 20 or pkt[0] >> 4 != 4:
            raise MalformedFrame("bad ipv4 header")
        ihl = (pkt[0] & 0x0F) * 4
        total_len, frag, proto = struct.unpack_from("!H2xH1xB", pkt, 2)
        if ihl < 20 or total_len < ihl or len(pkt) < ihl:
            raise MalformedFrame("bad ipv4 lengths")
        first = (frag & 0x1FFF) == 0
        return (
            socket.inet_ntoa(pkt[12:16]),
            socket.inet_ntoa(pkt[16:20]),
            proto,
            pkt[ihl:total_len],
            total_len - ihl,
            first,
        )
    if len(pkt) < 40 or pkt[0] >> 4 != 6:
        raise MalformedFrame("bad ipv6 header")
    (plen,) = struct.unpack_from("!H", pkt, 4)
    nxt = pkt[6]
    src = socket.inet_ntop(socket.AF_INET6, pkt[8:24])
    dst = socket.inet_ntop(socket.AF_INET6, pkt[24:40])
    off, remaining, first = 40, plen, True
    while nxt in _IPV6_EXT_HEADERS:
        if len(pkt) < off + 8:
            raise MalformedFrame("short ipv6 extension header")
        if nxt == 44:
            frag_off = struct.unpack_from("!H", pkt, off + 2)[0] >> 3
            first = first and frag_off == 0
            hlen = 8
        else:
            hlen = (pkt[off + 1] + 1) * 8
        nxt = pkt[off]
        off += hlen
        remaining -= hlen
    if remaining < 0:
        raise MalformedFrame("ipv6 extension headers exceed payload")
    return src, dst, nxt, pkt[off : off + remaining], remaining, first


def decode_frame(
    ts: float, orig_len: int, data: bytes, linktype: int, device_addr: str
) -> tuple[Optional[PacketRecord], Optional[bytes]]:
    """Decode one frame.

    Returns ``(record, dns_payload)``; ``record`` is None for non-IP frames.
    Raises :class:`MalformedFrame` on truncated or inconsistent headers.
    """
    etype, pkt = _strip_link(data, linktype)
    if etype not in (_ETHERTYPE_IPV4, _ETHERTYPE_IPV6):
        return None, None
    src, dst, proto, l4, l4_len, first = _decode_ip(etype, pkt)
    if orig_len < l4_len:
        raise MalformedFrame("frame shorter than its ip payload")
    sport = dport = None
    payload = b""
    dns = None
    if proto == 6 and first:
        if len(l4) < 20:
            raise MalformedFrame("short tcp header")
        sport, dport = struct.unpack_from("!HH", l4, 0)
        doff = (l4[12] >> 4) * 4
        if doff < 20 or doff > l4_len:
            raise MalformedFrame("bad tcp data offset")
        payload = l4[doff:]
        payload_len = l4_len - doff
        transport = Transport.TCP
    elif proto == 17 and first:
        if len(l4) < 8:
            raise MalformedFrame("short udp header")
        sport, dport = struct.unpack_from("!HH", l4, 0)
        payload = l4[8:]
        payload_len = max(l4_len - 8, 0)
        transport = Transport.UDP
        if sport == DNS_PORT:
            dns = bytes(payload)
    else:
        # non-first fragments carry no transport header
        transport = Transport.OTHER
        payload_len = l4_len
    direction = Direction.UPLINK if src == device_addr else Direction.DOWNLINK
    record = PacketRecord(
        timestamp=ts,
        src_ip=src,
        dst_ip=dst,
        src_port=sport,
        dst_port=dport,
        transport=transport,
        is_tls=transport is Transport.TCP and is_tls_payload(payload),
        size=orig_len,
        payload_len=payload_len,
        direction=direction,
    )
    return record, dns


def parse_capture(path: str | os.PathLike, device_id: str, device_addr: str) -> CaptureResult:
    """Parse a pcap file into records in file order.

    Malformed frames are skipped and counted; frames that carry neither IPv4
    nor IPv6 are counted separately in ``non_ip``.
    """
    addr = canonical_ip(device_addr)
    result = CaptureResult(device_id=device_id)
    for ts, orig_len, data, linktype in iter_pcap(path):
        result.frame_count += 1
        if data is None:
            result.malformed += 1
            continue
        try:
            record, dns = decode_frame(ts, orig_len, data, linktype, addr)
        except (MalformedFrame, struct.error, OSError, ValueError) as exc:
            logger.debug("%s: malformed frame %d: %s", path, result.frame_count, exc)
            result.malformed += 1
            continue
        if record is None:
            result.non_ip += 1
            continue
        result.records.append(record)
        if dns is not None:
            result.dns_messages.append((ts, dns))
    if result.malformed:
        logger.warning("%s: skipped %d malformed frames", path, result.malformed)
    return result


# --------------------------------------------------------------------------
# frame encoding (fixtures and synthetic captures)


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def encode_frame(
    src_ip: str,
    dst_ip: str,
    transport: Transport | str,
    src_port: int = 0,
    dst_port: int = 0,
    payload: bytes = b"",
    proto_number: int = 1,
) -> bytes:
    """Build an Ethernet frame with an IPv4/IPv6 header and a TCP/UDP header."""
    transport = Transport(transport)
    if transport is Transport.TCP:
        l4 = struct.pack("!HHIIBBHHH", src_port, dst_port, 1, 0, 5 << 4, 0x18, 65535, 0, 0) + payload
        proto = 6
    elif transport is Transport.UDP:
        l4 = struct.pack("!HHHH", src_port, dst_port, 8 + len(payload), 0) + payload
        proto = 17
    else:
        l4 = payload
        proto = proto_number
    src = ipaddress.ip_address(src_ip)
    dst = ipaddress.ip_address(dst_ip)
    if src.version == 4:
        hdr = struct.pack(
            "!BBHHHBBH4s4s", 0x45, 0, 20 + len(l4), 0, 0x4000, 64, proto, 0, src.packed, dst.packed
        )
        hdr = hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]
        etype = _ETHERTYPE_IPV4
    else:
        hdr = struct.pack("!IHBB16s16s", 6 << 28, len(l4), proto, 64, src.packed, dst.packed)
        etype = _ETHERTYPE_IPV6
    eth = b"\x02\x00\x00\x00\x00\x01" + b"\x02\x00\x00\x00\x00\x02" + struct.pack("!H", etype)
    return eth + hdr + l4


def _encode_name(name: str) -> bytes:
    out = b""
    for label in name.rstrip(".").split("."):
        raw = label.encode("ascii")
        out += bytes([len(raw)]) + raw
    return out + b"\0"


def encode_dns_response(
    qname: str,
    addresses: Sequence[str],
    cname_chain: Sequence[str] = (),
    txid: int = 0x1234,
    ttl: int = 300,
) -> bytes:
    """DNS response for an A query on ``qname``.

    ``cname_chain`` inserts CNAME hops before the A records, which then hang
    off the last name in the chain.
    """
    answers = b""
    owner = qname
    for target in cname_chain:
        rdata = _encode_name(target)
        answers += _encode_name(owner) + struct.pack("!HHIH", 5, 1, ttl, len(rdata)) + rdata
        owner = target
    for i, addr in enumerate(addresses):
        # compress the owner name to the question when possible
        name = b"\xc0\x0c" if owner == qname else _encode_name(owner)
        answers += name + struct.pack("!HHIH", 1, 1, ttl, 4) + socket.inet_aton(addr)
    ancount = len(cname_chain) + len(addresses)
    header = struct.pack("!HHHHHH", txid, 0x8180, 1, ancount, 0, 0)
    question = _encode_name(qname) + struct.pack("!HH", 1, 1)
    return header + question + answers


# --------------------------------------------------------------------------
# DNS tables


class DnsParseError(Exception):
    pass


def _read_name(msg: bytes, off: int) -> tuple[str, int]:
    labels = []
    jumped = False
    end = off
    hops = 0
    while True:
        if off >= len(msg):
            raise DnsParseError("name runs past message end")
        length = msg[off]
        if length & 0xC0 == 0xC0:
            if off + 1 >= len(msg):
                raise DnsParseError("truncated compression pointer")
            ptr = ((length & 0x3F) << 8) | msg[off + 1]
            if not jumped:
                end = off + 2
            jumped = True
            off = ptr
            hops += 1
            if hops > 32:
                raise DnsParseError("compression loop")
            continue
        if length & 0xC0:
            raise DnsParseError("unsupported label type")
        off += 1
        if length == 0:
            break
        if off + length > len(msg):
            raise DnsParseError("label runs past message end")
        labels.append(msg[off : off + length].decode("ascii", errors="replace"))
        off += length
    if not jumped:
        end = off
    return ".".join(labels).lower(), end


def parse_dns_a_records(msg: bytes) -> list[tuple[str, str]]:
    """Return ``(queried_name, ipv4)`` for every A record in a response.

    CNAME hops are collapsed: every address is attributed to the first
    question name.  Queries (QR=0) yield nothing.
    """
    if len(msg) < 12:
        raise DnsParseError("short dns header")
    _, flags, qdcount, ancount = struct.unpack_from("!HHHH", msg, 0)
    if not flags & 0x8000:
        return []
    off = 12
    qname = None
    for _ in range(qdcount):
        name, off = _read_name(msg, off)
        if off + 4 > len(msg):
            raise DnsParseError("truncated question")
        off += 4
        if qname is None:
            qname = name
    out = []
    for _ in range(ancount):
        name, off = _read_name(msg, off)
        if off + 10 > len(msg):
            raise DnsParseError("truncated answer header")
        rtype, rclass, _, rdlen = struct.unpack_from("!HHIH", msg, off)
        off += 10
        if off + rdlen > len(msg):
            raise DnsParseError("truncated rdata")
        if rtype == 1 and rclass == 1 and rdlen == 4:
            out.append((qname or name, socket.inet_ntoa(msg[off : off + 4])))
        off += rdlen
    return out


@dataclass(frozen=True)
class DnsTable:
    """Time-ordered ``(query_time, ip, domain)`` entries for one device."""

    device_id: str
    entries: tuple[tuple[float, str, str], ...] = ()
    parse_errors: int = 0

    def __post_init__(self):
        entries = tuple(sorted(self.entries))
        object.__setattr__(self, "entries", entries)
        index: dict[str, tuple[list[float], list[str]]] = {}
        for t, ip, dom in entries:
            times, doms = index.setdefault(ip, ([], []))
            times.append(t)
            doms.append(dom)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, ip: str, at: float) -> Optional[str]:
        hit = self._index.get(ip)
        if hit is None:
            return None
        times, doms = hit
        i = bisect.bisect_right(times, at)
        if i == 0:
            return None
        # entries are sorted by (time, domain); the first at that time is the smallest
        j = bisect.bisect_left(times, times[i - 1])
        return doms[j]

    def addresses_for(self, domain: str) -> set[str]:
        return {ip for _, ip, dom in self.entries if dom == domain}

    def merged(self, other: "DnsTable") -> "DnsTable":
        return DnsTable(
            self.device_id,
            tuple(set(self.entries) | set(other.entries)),
            self.parse_errors + other.parse_errors,
        )

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            w.writerow(["query_time", "ip", "domain"])
            for t, ip, dom in self.entries:
                w.writerow([repr(t), ip, dom])

    @classmethod
    def from_csv(cls, path: str | os.PathLike, device_id: str) -> "DnsTable":
        with open(path, newline="") as fp:
            rows = list(csv.DictReader(fp))
        return cls(device_id, tuple((float(r["query_time"]), r["ip"], r["domain"]) for r in rows))


def extract_dns_table(
    source: CaptureResult | Iterable[tuple[float, bytes]], device_id: Optional[str] = None
) -> DnsTable:
    """Build a DnsTable from the DNS responses seen in a capture."""
    if isinstance(source, CaptureResult):
        device_id = device_id or source.device_id
        messages = source.dns_messages
    else:
        messages = source
    entries = []
    errors = 0
    for ts, msg in messages:
        try:
            pairs = parse_dns_a_records(msg)
        except (DnsParseError, struct.error):
            errors += 1
            continue
        entries.extend((ts, ip, dom) for dom, ip in pairs if dom)
    if errors:
        logger.warning("device %s: %d undecodable dns responses", device_id, errors)
    return DnsTable(device_id or "", tuple(entries), errors)


def resolve_destination(table: DnsTable, remote_ip: str, at: float) -> DestinationKey:
    domain = table.lookup(remote_ip, at)
    if domain is None:
        return DestinationKey.ip(remote_ip)
    return DestinationKey.domain(domain)


# --------------------------------------------------------------------------
# internal record stream

RECORD_FIELDS = (
    "timestamp",
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "transport",
    "is_tls",
    "size",
    "payload_len",
    "direction",
)


def write_records(path: str | os.PathLike, records: Iterable[PacketRecord]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow(
                [
                    repr(r.timestamp),
                    r.src_ip,
                    r.dst_ip,
                    "" if r.src_port is None else r.src_port,
                    "" if r.dst_port is None else r.dst_port,
                    r.transport.value,
                    int(r.is_tls),
                    r.size,
                    r.payload_len,
                    r.direction.value,
                ]
            )


def read_records(path: str | os.PathLike) -> list[PacketRecord]:
    out = []
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_FIELDS:
            raise CaptureError(f"{path}: not a packet-record file")
        for row in reader:
            out.append(
                PacketRecord(
                    timestamp=float(row[0]),
                    src_ip=row[1],
                    dst_ip=row[2],
                    src_port=int(row[3]) if row[3] else None,
                    dst_port=int(row[4]) if row[4] else None,
                    transport=Transport(row[5]),
                    is_tls=row[6] == "1",
                    size=int(row[7]),
                    payload_len=int(row[8]),
                    direction=Direction(row[9]),
                )
            )
    return out

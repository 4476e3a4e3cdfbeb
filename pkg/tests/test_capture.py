import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mliotrim.capture import (
    LINKTYPE_LINUX_SLL,
    LINKTYPE_NULL,
    LINKTYPE_RAW,
    CaptureError,
    DnsTable,
    PacketRecord,
    encode_dns_response,
    encode_frame,
    extract_dns_table,
    parse_capture,
    parse_dns_a_records,
    read_records,
    resolve_destination,
    write_pcap,
    write_records,
)
from mliotrim.core import Direction, KeyKind, Transport

DEV = "192.168.1.20"


def udp(src, dst, sport=40000, dport=53, payload=b"x" * 20):
    return encode_frame(src, dst, Transport.UDP, sport, dport, payload)


def test_three_udp_uplink(tmp_path):
    path = tmp_path / "a.pcap"
    write_pcap(path, [(1.0 + i, udp(DEV, "8.8.8.8")) for i in range(3)])
    cap = parse_capture(path, "dev", DEV)
    assert len(cap.records) == 3
    assert all(r.direction is Direction.UPLINK and r.transport is Transport.UDP for r in cap.records)
    assert cap.malformed == 0


def test_empty_capture(tmp_path):
    path = tmp_path / "empty.pcap"
    write_pcap(path, [])
    cap = parse_capture(path, "dev", DEV)
    assert cap.records == [] and cap.malformed == 0 and cap.frame_count == 0


def test_tls_heuristic_fixture(tmp_path):
    hello = bytes([0x16, 0x03, 0x01]) + b"\x00" * 40
    frames = [
        (1.0, encode_frame(DEV, "93.184.216.34", Transport.TCP, 40000, 443, hello)),
        (2.0, encode_frame(DEV, "93.184.216.34", Transport.TCP, 40000, 443, b"\x16")),
        (3.0, encode_frame(DEV, "93.184.216.34", Transport.TCP, 40000, 443, b"\x18\x03")),
        (4.0, encode_frame(DEV, "93.184.216.34", Transport.UDP, 40000, 443, hello)),
        (5.0, encode_frame("93.184.216.34", DEV, Transport.TCP, 443, 40000, b"\x17\x03\x03\x00")),
    ]
    path = tmp_path / "tls.pcap"
    write_pcap(path, frames)
    recs = parse_capture(path, "dev", DEV).records
    assert [r.is_tls for r in recs] == [True, False, False, False, True]
    assert recs[0].payload_len == len(hello)
    assert recs[4].direction is Direction.DOWNLINK


def test_record_sizes_and_ports(tmp_path):
    frame = encode_frame(DEV, "1.2.3.4", Transport.TCP, 1234, 80, b"abc")
    path = tmp_path / "s.pcap"
    write_pcap(path, [(0.5, frame)])
    (r,) = parse_capture(path, "dev", DEV).records
    assert r.size == len(frame)
    assert r.payload_len == 3
    assert (r.local_port, r.remote_port, r.remote_ip) == (1234, 80, "1.2.3.4")


def test_nanosecond_and_big_endian(tmp_path):
    frame = udp(DEV, "8.8.8.8")
    ns = tmp_path / "ns.pcap"
    write_pcap(ns, [(10.123456789, frame)], nanosecond=True)
    (r,) = parse_capture(ns, "dev", DEV).records
    assert r.timestamp == pytest.approx(10.123456789, abs=1e-9)

    be = tmp_path / "be.pcap"
    with open(be, "wb") as fp:
        fp.write(struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
        fp.write(struct.pack(">IIII", 7, 250000, len(frame), len(frame)))
        fp.write(frame)
    (r,) = parse_capture(be, "dev", DEV).records
    assert r.timestamp == pytest.approx(7.25)
    assert r.dst_ip == "8.8.8.8"


@pytest.mark.parametrize("linktype", [LINKTYPE_RAW, LINKTYPE_LINUX_SLL, LINKTYPE_NULL])
def test_other_link_types(tmp_path, linktype):
    ip = udp(DEV, "8.8.4.4")[14:]
    if linktype == LINKTYPE_RAW:
        data = ip
    elif linktype == LINKTYPE_LINUX_SLL:
        data = b"\x00" * 14 + b"\x08\x00" + ip
    else:
        data = struct.pack("<I", 2) + ip
    path = tmp_path / "l.pcap"
    write_pcap(path, [(1.0, data)], linktype=linktype)
    (r,) = parse_capture(path, "dev", DEV).records
    assert r.dst_ip == "8.8.4.4"


def test_vlan_and_ipv6(tmp_path):
    frame = udp(DEV, "8.8.8.8")
    vlan = frame[:12] + b"\x81\x00\x00\x05" + frame[12:]
    v6 = encode_frame("fd00::20", "2001:db8::1", Transport.TCP, 5000, 443, b"\x17\x03\x03")
    path = tmp_path / "v.pcap"
    write_pcap(path, [(1.0, vlan), (2.0, v6)])
    recs = parse_capture(path, "dev", "fd00::20").records
    assert recs[0].dst_ip == "8.8.8.8"
    assert recs[1].dst_ip == "2001:db8::1" and recs[1].is_tls and recs[1].uplink


def test_malformed_and_non_ip_are_counted(tmp_path):
    good = udp(DEV, "8.8.8.8")
    arp = b"\xff" * 6 + b"\x02" * 6 + b"\x08\x06" + b"\x00" * 28
    truncated = good[:20]
    path = tmp_path / "m.pcap"
    write_pcap(path, [(1.0, good), (2.0, arp), (3.0, truncated)])
    cap = parse_capture(path, "dev", DEV)
    assert (len(cap.records), cap.non_ip, cap.malformed, cap.frame_count) == (1, 1, 1, 3)


def test_truncated_trailing_record(tmp_path):
    path = tmp_path / "t.pcap"
    write_pcap(path, [(1.0, udp(DEV, "8.8.8.8")), (2.0, udp(DEV, "8.8.8.8"))])
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    cap = parse_capture(path, "dev", DEV)
    assert len(cap.records) == 1 and cap.malformed == 1


def test_unreadable_inputs(tmp_path):
    with pytest.raises(CaptureError):
        parse_capture(tmp_path / "missing.pcap", "dev", DEV)
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"not a capture at all, definitely")
    with pytest.raises(CaptureError):
        parse_capture(bad, "dev", DEV)


frame_kind = st.sampled_from(["udp", "tcp", "arp", "short", "ipv6"])


@given(st.lists(frame_kind, max_size=25))
def test_frame_accounting_invariant(tmp_path_factory, kinds):
    frames = []
    for i, k in enumerate(kinds):
        if k == "udp":
            f = udp(DEV, "8.8.8.8")
        elif k == "tcp":
            f = encode_frame("1.1.1.1", DEV, Transport.TCP, 443, 4000, b"\x01" * 5)
        elif k == "arp":
            f = b"\x00" * 12 + b"\x08\x06" + b"\x00" * 28
        elif k == "short":
            f = udp(DEV, "8.8.8.8")[:25]
        else:
            f = encode_frame("fd00::20", "2001:db8::2", Transport.UDP, 1, 2, b"")
        frames.append((float(i), f))
    path = tmp_path_factory.mktemp("acct") / "x.pcap"
    write_pcap(path, frames)
    cap = parse_capture(path, "dev", DEV)
    assert len(cap.records) + cap.malformed + cap.non_ip == cap.frame_count == len(kinds)
    for r in cap.records:
        assert r.size >= r.payload_len >= 0
        assert not r.is_tls or r.transport is Transport.TCP
        assert r.uplink == (r.src_ip == DEV)


# --------------------------------------------------------------------------
# DNS


def dns_frame(t, qname, ips, cname=()):
    msg = encode_dns_response(qname, ips, cname)
    return t, encode_frame("192.168.1.1", DEV, Transport.UDP, 53, 53000, msg)


def dns_table_from(tmp_path, frames):
    path = tmp_path / "d.pcap"
    write_pcap(path, frames)
    return extract_dns_table(parse_capture(path, "dev", DEV))


def test_single_a_record(tmp_path):
    table = dns_table_from(tmp_path, [dns_frame(10.0, "example.iot.cloud", ["1.2.3.4"])])
    assert table.entries == ((10.0, "1.2.3.4", "example.iot.cloud"),)


def test_two_a_records(tmp_path):
    table = dns_table_from(tmp_path, [dns_frame(5.0, "a.example", ["1.1.1.1", "2.2.2.2"])])
    assert table.entries == ((5.0, "1.1.1.1", "a.example"), (5.0, "2.2.2.2", "a.example"))


def test_cname_chain_collapses_to_query():
    msg = encode_dns_response("a.example", ["9.9.9.9"], cname_chain=["edge.cdn.net", "x.cdn.net"])
    assert parse_dns_a_records(msg) == [("a.example", "9.9.9.9")]


def test_no_dns_gives_empty_table(tmp_path):
    table = dns_table_from(tmp_path, [(1.0, udp(DEV, "8.8.8.8"))])
    assert len(table) == 0


def test_truncated_dns_response_counted(tmp_path):
    bad = encode_dns_response("a.example", ["1.2.3.4"])[:-3]
    frames = [
        (1.0, encode_frame("192.168.1.1", DEV, Transport.UDP, 53, 53000, bad)),
        dns_frame(2.0, "b.example", ["5.6.7.8"]),
    ]
    table = dns_table_from(tmp_path, frames)
    assert table.parse_errors == 1
    assert table.entries == ((2.0, "5.6.7.8", "b.example"),)


def test_dns_queries_are_ignored():
    msg = bytearray(encode_dns_response("a.example", ["1.2.3.4"]))
    msg[2] &= 0x7F  # clear QR
    assert parse_dns_a_records(bytes(msg)) == []


def test_resolve_destination_examples():
    t = DnsTable("d", ((10.0, "1.2.3.4", "a.example"),))
    assert resolve_destination(t, "1.2.3.4", 12.0).value == "a.example"
    k = resolve_destination(t, "5.6.7.8", 12.0)
    assert (k.value, k.kind) == ("5.6.7.8", KeyKind.IP)
    t2 = DnsTable("d", ((10.0, "1.2.3.4", "b.example"), (20.0, "1.2.3.4", "a.example")))
    assert resolve_destination(t2, "1.2.3.4", 25.0).value == "a.example"
    assert resolve_destination(t2, "1.2.3.4", 15.0).value == "b.example"
    # future-only mapping falls back to the IP
    assert resolve_destination(t2, "1.2.3.4", 5.0).kind is KeyKind.IP


def test_same_instant_tie_break():
    t = DnsTable("d", ((10.0, "1.2.3.4", "z.example"), (10.0, "1.2.3.4", "m.example")))
    assert resolve_destination(t, "1.2.3.4", 10.0).value == "m.example"


entries = st.lists(
    st.tuples(
        st.floats(0, 100, allow_nan=False),
        st.sampled_from(["1.1.1.1", "2.2.2.2", "3.3.3.3"]),
        st.sampled_from(["a.example", "b.example", "c.example"]),
    ),
    max_size=12,
)


@given(entries, st.sampled_from(["1.1.1.1", "2.2.2.2", "9.9.9.9"]), st.floats(0, 120, allow_nan=False))
def test_resolve_matches_rule(es, ip, at):
    table = DnsTable("d", tuple(es))
    key = resolve_destination(table, ip, at)
    assert key.value
    past = [(t, dom) for t, i, dom in es if i == ip and t <= at]
    if not past:
        assert key.kind is KeyKind.IP and key.value == ip
    else:
        latest = max(t for t, _ in past)
        assert key.kind is KeyKind.DOMAIN
        assert key.value == min(dom for t, dom in past if t == latest)


@given(entries)
def test_dns_table_sorted_and_csv_roundtrip(tmp_path_factory, es):
    table = DnsTable("d", tuple(es))
    assert list(table.entries) == sorted(table.entries)
    path = tmp_path_factory.mktemp("dns") / "t.csv"
    table.to_csv(path)
    assert path.read_text().splitlines()[0] == "query_time,ip,domain"
    assert DnsTable.from_csv(path, "d").entries == table.entries


records = st.builds(
    PacketRecord,
    timestamp=st.floats(0, 2e9, allow_nan=False),
    src_ip=st.sampled_from([DEV, "8.8.8.8", "2001:db8::1"]),
    dst_ip=st.sampled_from([DEV, "1.2.3.4"]),
    src_port=st.one_of(st.none(), st.integers(0, 65535)),
    dst_port=st.one_of(st.none(), st.integers(0, 65535)),
    transport=st.sampled_from(list(Transport)),
    is_tls=st.booleans(),
    size=st.integers(0, 70000),
    payload_len=st.integers(0, 70000),
    direction=st.sampled_from(list(Direction)),
)


@given(st.lists(records, max_size=20))
def test_record_stream_roundtrip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("rec") / "r.csv"
    write_records(path, recs)
    assert read_records(path) == recs


def test_read_records_rejects_other_files(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(CaptureError):
        read_records(p)

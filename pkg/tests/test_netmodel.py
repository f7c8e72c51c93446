import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmtud_hijack.netmodel import (
    ACK,
    PROFILES,
    RST,
    SEQ_MASK,
    SYN,
    InvalidMtu,
    IpAddr,
    ModRange,
    OsName,
    Packet,
    PacketBurst,
    TcpSegment,
    build_ptb,
    profile,
    seq_in_window,
    seq_leq,
    window_mask,
)

u32 = st.integers(0, SEQ_MASK)
SERVER = IpAddr("5.5.5.5")
PUBLIC = IpAddr("1.2.3.4")


def seg(seq=0, ack=0, flags=ACK, n=0, tag=None, sport=80, dport=40001):
    return TcpSegment(SERVER, sport, PUBLIC, dport, seq, ack, flags, n, tag)


def test_ipaddr_parses_and_compares():
    assert IpAddr("1.2.3.4") == 0x01020304
    assert str(IpAddr(0x05050505)) == "5.5.5.5"
    assert IpAddr("5.5.5.5") == IpAddr(0x05050505)


@pytest.mark.parametrize("a,b,expected", [
    (3, 10, True),
    (2**32 - 5, 3, True),
    (10, 3, False),
])
def test_seq_leq_examples(a, b, expected):
    assert seq_leq(a, b) is expected


@pytest.mark.parametrize("x,lo,hi,expected", [
    (1500, 1000, 2000, True),
    (2500, 1000, 2000, False),
    (5, 2**32 - 10, 20, True),
])
def test_seq_in_window_examples(x, lo, hi, expected):
    assert seq_in_window(x, lo, hi) is expected


def test_seq_in_window_rejects_oversized_window():
    with pytest.raises(ValueError):
        seq_in_window(0, 0, 2**31 + 5)


@settings(max_examples=300)
@given(lo=u32, width=st.integers(0, 2**16), offset=st.integers(-300, 2**16 + 300))
def test_seq_in_window_matches_enumeration(lo, width, offset):
    hi = (lo + width) & SEQ_MASK
    x = (lo + offset) & SEQ_MASK
    members = {(lo + i) & SEQ_MASK for i in range(width + 1)}
    assert seq_in_window(x, lo, hi) == (x in members)


@settings(max_examples=100)
@given(lo=u32, width=st.integers(0, 2**20), xs=st.lists(u32, min_size=1, max_size=50))
def test_window_mask_agrees_with_scalar(lo, width, xs):
    hi = (lo + width) & SEQ_MASK
    mask = window_mask(np.array(xs, dtype=np.int64), lo, hi)
    assert list(mask) == [seq_in_window(x, lo, hi) for x in xs]


def test_profiles_ack_windows():
    assert {p.ack_window for p in PROFILES.values()} == {2**10, 2**13, 2**14, 2**15}
    assert profile("macos").ack_window == 2**15
    assert profile(OsName.LINUX).ack_window == 2**10
    assert all(p.rst_requires_exact_seq for p in PROFILES.values())
    with pytest.raises(ValueError):
        profile("plan9")


def test_segment_invariants():
    with pytest.raises(ValueError):
        seg(flags=SYN | RST)
    with pytest.raises(ValueError):
        seg(n=-1)


@given(n=st.integers(0, 1460))
def test_tcp_total_len(n):
    pkt = Packet.tcp(seg(n=n))
    assert pkt.total_len - n == 40
    assert pkt.df


def test_build_ptb_worked_example():
    trig = Packet.tcp(seg(seq=0x12345678, n=1460))
    ptb = build_ptb(trig, 552, IpAddr("10.0.0.1"))
    assert ptb.dst_ip == SERVER
    assert ptb.total_len == 56
    assert ptb.kind.next_hop_mtu == 552
    assert ptb.kind.embedded.seq == 0x12345678
    assert (ptb.kind.TYPE, ptb.kind.CODE) == (3, 4)


def test_build_ptb_minimum_and_invalid_mtu():
    trig = Packet.tcp(seg(seq=0))
    assert build_ptb(trig, 68, IpAddr("10.0.0.1")).kind.next_hop_mtu == 68
    with pytest.raises(InvalidMtu):
        build_ptb(trig, 40, IpAddr("10.0.0.1"))


@given(src=u32, dst=u32, sport=st.integers(0, 65535), dport=st.integers(0, 65535), s=u32)
def test_build_ptb_quote_is_lossless(src, dst, sport, dport, s):
    trig = Packet.tcp(TcpSegment(IpAddr(src), sport, IpAddr(dst), dport, s, 0, ACK, 100))
    e = build_ptb(trig, 576, IpAddr(1)).kind.embedded
    assert (e.src_ip, e.dst_ip, e.src_port, e.dst_port, e.seq) == (src, dst, sport, dport, s)


def test_modrange_wraps_and_slices():
    r = ModRange(2**32 - 2, 4)
    assert list(r) == [2**32 - 2, 2**32 - 1, 0, 1]
    assert r[3] == 1
    assert list(r.array(1, 3)) == [2**32 - 1, 0]
    with pytest.raises(IndexError):
        r[4]
    big = ModRange(0, 2**22, 2**10)
    assert len(big) == 2**22
    assert big[2**22 - 1] == 2**32 - 2**10


@settings(max_examples=50)
@given(field=st.sampled_from(["seq", "ack", "dst_port"]),
       values=st.lists(st.integers(0, 65535), min_size=1, max_size=20), marker=st.booleans())
def test_burst_packet_view(field, values, marker):
    tmpl = Packet.tcp(seg(seq=7, ack=9, n=16))
    burst = PacketBurst(tmpl, field, np.array(values, dtype=np.int64), marker)
    assert burst.octets == len(values) * 56
    for v, pkt in zip(values, burst):
        assert getattr(pkt.kind, field) == v
        assert pkt.total_len == 56
        assert pkt.kind.payload_tag == (f"TCP_{v}" if marker else None)


def test_burst_rejects_embedded_seq_on_tcp():
    with pytest.raises(ValueError):
        PacketBurst(Packet.tcp(seg()), "embedded_seq", np.arange(3))

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from oracles import replay_preservation
from pmtud_hijack.gateway import (
    AllocationFailed,
    AllocatorConfig,
    Gateway,
    PortAllocator,
    SessionState,
    Strategy,
)
from pmtud_hijack.netmodel import ACK, RST, SYN, IpAddr, Packet, TcpSegment
from pmtud_hijack.simcore import Engine, Rng, ms, seconds

SERVER = (IpAddr("5.5.5.5"), 80)
OTHER = (IpAddr("6.6.6.6"), 80)
VICTIM = IpAddr("192.168.1.5")
PUPPET = IpAddr("192.168.1.4")


def alloc(strategy, seed=0, **kw):
    return PortAllocator(AllocatorConfig(strategy, **kw), Rng(seed))


def gw(strategy=Strategy.PORT_PRESERVATION, **kw):
    eng = Engine(1)
    return eng, Gateway(eng, "gw", "1.2.3.4", AllocatorConfig(strategy, **kw))


def syn(src_ip, sport, remote=SERVER, flags=SYN):
    return Packet.tcp(TcpSegment(src_ip, sport, remote[0], remote[1], 0, 0, flags))


def test_config_validation():
    assert AllocatorConfig().widths() == (64, 32, 16, 8)
    assert AllocatorConfig(scan_widths=(64, 32, 16, 8, 4)).widths() == (64, 32, 16, 8, 4)
    with pytest.raises(ValueError):
        AllocatorConfig(search_initial_window=100)
    with pytest.raises(ValueError):
        AllocatorConfig(search_initial_window=4, search_min_window=8)
    with pytest.raises(ValueError):
        AllocatorConfig(port_range=(80, 1000))


def test_preservation_keeps_idle_port():
    assert alloc(Strategy.PORT_PRESERVATION).allocate(50000, SERVER, set()) == (50000, 0)


def test_preservation_full_table_fails_after_four_rounds():
    with pytest.raises(AllocationFailed) as info:
        alloc(Strategy.PORT_PRESERVATION).allocate(50000, SERVER, set(range(1024, 65536)))
    assert info.value.rounds_used == 4


def test_preservation_seed_42_replay():
    occupied = set(range(1024, 40001))
    got = alloc(Strategy.PORT_PRESERVATION, 42).allocate(2000, SERVER, occupied)
    kind, port, rounds = replay_preservation(42, 2000, occupied)
    assert kind == "port" and got == (port, rounds)
    assert port not in occupied


def test_sequential_seed_7():
    a = alloc(Strategy.SEQUENTIAL, 7)
    r = random.Random(7)
    p = r.randint(1024, 65535)
    assert a.allocate(1111, SERVER, set()) == (p, 0)
    assert a.allocate(2222, SERVER, {p}) == (p + 1, 0)
    assert a.allocate(3333, OTHER, set()) == (r.randint(1024, 65535), 0)


def test_sequential_skips_occupied_and_wraps():
    a = alloc(Strategy.SEQUENTIAL, 0, port_range=(1024, 1030))
    first, _ = a.allocate(1, SERVER, set())
    taken = {first}
    for _ in range(6):
        port, _ = a.allocate(1, SERVER, taken)
        taken.add(port)
    assert taken == set(range(1024, 1031))
    with pytest.raises(AllocationFailed):
        a.allocate(1, SERVER, taken)


def test_random_never_picks_occupied():
    a = alloc(Strategy.RANDOM, 3, port_range=(1024, 1100))
    occupied = set(range(1024, 1099))
    assert a.allocate(1, SERVER, occupied)[0] in (1099, 1100)
    with pytest.raises(AllocationFailed):
        a.allocate(1, SERVER, set(range(1024, 1101)))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32), requested=st.integers(1024, 65535),
       density=st.floats(0.0, 1.0), pattern_seed=st.integers(0, 2**32))
def test_preservation_matches_replay(seed, requested, density, pattern_seed):
    pr = random.Random(pattern_seed)
    occupied = {p for p in range(1024, 65536) if pr.random() < density}
    oracle = replay_preservation(seed, requested, occupied)
    try:
        got = ("port", *alloc(Strategy.PORT_PRESERVATION, seed).allocate(requested, SERVER, occupied))
    except AllocationFailed as exc:
        got = ("fail", None, exc.rounds_used)
    assert got == oracle


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), ops=st.lists(st.tuples(st.booleans(), st.integers(0, 40),
                                                         st.sampled_from([0, 1])), max_size=200),
       strategy=st.sampled_from(list(Strategy)))
def test_uniqueness_under_churn(seed, ops, strategy):
    eng = Engine(seed)
    g = Gateway(eng, "gw", "1.2.3.4", AllocatorConfig(strategy, port_range=(1024, 1100)))
    remotes = [SERVER, OTHER]
    live = []
    for opening, sport, which in ops:
        remote = remotes[which]
        if opening:
            if g.external_port_of(PUPPET, 1024 + sport, remote) is None:
                if g.translate_outbound(syn(PUPPET, 1024 + sport, remote)) is not None:
                    live.append((1024 + sport, remote))
        elif live:
            sport2, remote2 = live.pop(sport % len(live))
            g.translate_outbound(syn(PUPPET, sport2, remote2, RST | ACK))
        keys = [(s.external_port, s.remote) for s in g.sessions.by_external.values()]
        assert len(keys) == len(set(keys))
        assert all(1024 <= p <= 65535 for p, _ in keys)


@settings(max_examples=50, deadline=None)
@given(ports=st.sets(st.integers(1024, 65535), min_size=1, max_size=100))
def test_preservation_fidelity_without_conflicts(ports):
    _, g = gw()
    for p in ports:
        out, delay = g.translate_outbound(syn(VICTIM, p))
        assert out.kind.src_port == p and delay == 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(1, 200))
def test_sequential_runs_are_consecutive(seed, n):
    eng = Engine(seed)
    g = Gateway(eng, "gw", "1.2.3.4", AllocatorConfig(Strategy.SEQUENTIAL))
    ports = [g.translate_outbound(syn(PUPPET, 30000 + i))[0].kind.src_port for i in range(n)]
    base = ports[0]
    assert ports == [1024 + (base - 1024 + i) % 64512 for i in range(n)]


def test_random_allocation_is_uniform():
    lo, hi = 1024, 2047
    a = alloc(Strategy.RANDOM, 11, port_range=(lo, hi))
    occupied = set(range(lo, lo + 24))
    counts = np.zeros(hi - lo + 1, dtype=int)
    for _ in range(10_000):
        port, _ = a.allocate(1, SERVER, occupied)
        counts[port - lo] += 1
    idle = counts[24:]
    assert counts[:24].sum() == 0
    assert chisquare(idle).pvalue > 0.01


def test_translate_outbound_examples():
    _, g = gw(Strategy.PORT_PRESERVATION)
    out, _ = g.translate_outbound(syn(VICTIM, 40000))
    assert (out.kind.src_ip, out.kind.src_port) == (IpAddr("1.2.3.4"), 40000)
    assert g.translate_outbound(syn(PUPPET, 41000, flags=ACK)) is None


def test_allocation_failure_drops_syn():
    _, g = gw(port_range=(1024, 1040))
    for p in range(1024, 1041):
        assert g.translate_outbound(syn(PUPPET, p)) is not None
    assert g.translate_outbound(syn(VICTIM, 1030)) is None
    assert g.failed_allocations == 1 and g.last_failure_rounds == 4


def test_per_round_delay_applies():
    _, g = gw(port_range=(1024, 1040), per_round_delay=ms(500))
    g.translate_outbound(syn(PUPPET, 1030))
    out, delay = g.translate_outbound(syn(VICTIM, 1030))
    assert delay > 0 and delay % ms(500) == 0


def test_translate_inbound_routes_by_session():
    eng, g = gw()
    g.translate_outbound(syn(VICTIM, 40000))
    g.translate_outbound(syn(PUPPET, 40001))
    marker = TcpSegment(SERVER[0], 80, g.public_ip, 40001, 0, 0, ACK, 16, "TCP_40001")
    out = g.translate_inbound(Packet.tcp(marker))
    assert out.kind.dst_ip == PUPPET and out.kind.payload_tag == "TCP_40001"
    victim_bound = g.translate_inbound(Packet.tcp(TcpSegment(SERVER[0], 80, g.public_ip, 40000, 0, 0, ACK)))
    assert victim_bound.kind.dst_ip == VICTIM
    assert g.translate_inbound(Packet.tcp(TcpSegment(SERVER[0], 80, g.public_ip, 50000, 0, 0, ACK))) is None


def test_expiry_boundaries():
    eng, g = gw()
    g.translate_outbound(syn(VICTIM, 40000))
    g.translate_outbound(syn(PUPPET, 40001))
    synack = TcpSegment(SERVER[0], 80, g.public_ip, 40001, 0, 1, SYN | ACK)
    g.translate_inbound(Packet.tcp(synack))
    assert g.session_for(40001, SERVER).state is SessionState.ESTABLISHED
    assert g.expire_sessions(seconds(9.9)) == 0
    assert g.expire_sessions(seconds(10)) == 1
    assert g.session_for(40000, SERVER) is None
    assert g.session_for(40001, SERVER) is not None


def test_snapshot_is_sorted_rows():
    _, g = gw()
    g.translate_outbound(syn(VICTIM, 40000))
    g.translate_outbound(syn(PUPPET, 30000))
    snap = g.snapshot()
    assert snap == sorted(snap) and len(snap) == 2
    assert snap[0][:3] == ("192.168.1.4", 30000, 30000)

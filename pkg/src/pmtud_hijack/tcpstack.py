"""Endpoint TCP for the server, victim and puppet hosts.

The stack covers what the attacks exercise: three-way handshake with SYN
retransmission, window-limited data sized by the current path MTU, periodic
keep-alive traffic, in-order delivery with a single reassembly queue, and
OS-profile-driven acceptance of inbound data, ACK and RST segments.

Server-to-client data can be held in a per-connection standing queue of
``inflight_hold`` octets. New data pushes the oldest held data onto the
wire, so the sender keeps a window ``[snd_una, snd_nxt]`` about that wide
while the receiver's ``rcv_nxt`` stays at ``snd_una``. Keep-alive traffic
slides that window forward.
"""

from __future__ import annotations

import dataclasses
import enum
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .netmodel import (
    ACK,
    PSH,
    RST,
    SEQ_MASK,
    SYN,
    TCPIP_HEADER_LEN,
    IcmpPtb,
    IpAddr,
    OsProfile,
    Packet,
    PacketBurst,
    PROFILES,
    OsName,
    TcpSegment,
    seq_diff,
    seq_in_window,
    seq_leq,
    window_mask,
)
from .pmtud import PmtuCache, PtbReason, PtbVerdict, handle_ptb, handle_ptb_burst, lookup_pmtu
from .simcore import Engine, Link, Node, Rng, Timer, seconds

EPHEMERAL_LO = 32768
EPHEMERAL_HI = 60999
SYN_RETRY_INTERVAL = seconds(1)
SYN_RETRIES = 3


class ConnState(str, enum.Enum):
    SYN_SENT = "SynSent"
    SYN_RECEIVED = "SynReceived"
    ESTABLISHED = "Established"
    CLOSED = "Closed"
    RESET = "Reset"


class AcceptResult(str, enum.Enum):
    ACCEPTED_DATA = "AcceptedData"
    ACCEPTED_ACK = "AcceptedAck"
    CHALLENGE_DROPPED = "ChallengeDropped"
    RESET_CONNECTION = "ResetConnection"
    DROPPED = "Dropped"


class AppKind(str, enum.Enum):
    SSH_LIKE = "SshLike"
    FTP_LIKE = "FtpLike"
    HTTP_LIKE = "HttpLike"


class ConnectionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class AppPayloadModel:
    """Abstract application riding on a connection.

    SshLike sends ``initial_octets`` then ``keepalive_octets`` every
    ``keepalive_interval``. FtpLike sends ``size`` octets, all at once or one
    segment per ``pace_interval``. HttpLike answers the client's request
    with ``size`` octets. Times are microseconds.
    """

    kind: AppKind
    content_tag: str
    size: int = 0
    inflight_hold: int = 0
    initial_octets: int = 0
    keepalive_interval: Optional[int] = None
    keepalive_octets: int = 1
    pace_interval: Optional[int] = None
    request_octets: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AppKind(self.kind))
        if self.kind is not AppKind.SSH_LIKE and self.size <= 0:
            raise ValueError(f"{self.kind.value} needs a finite positive transfer size")
        if self.inflight_hold < 0 or self.initial_octets < 0:
            raise ValueError("negative octet count")
        if self.keepalive_interval is not None and self.keepalive_interval <= 0:
            raise ValueError("keep-alive interval must be positive")


@dataclass(eq=False, slots=True)
class TcpConnection:
    local_ip: IpAddr
    local_port: int
    remote_ip: IpAddr
    remote_port: int
    state: ConnState
    iss: int
    profile: OsProfile
    snd_wnd: int = 65535
    rcv_wnd: int = 65535
    irs: int = 0
    snd_una: int = 0
    snd_nxt: int = 0
    rcv_nxt: int = 0
    keepalive_interval: Optional[int] = None
    app: Optional[AppPayloadModel] = None
    endpoint: Optional["Endpoint"] = field(default=None, repr=False)
    delivered: list[tuple[int, int, Any]] = field(default_factory=list, repr=False)
    reassembly: Optional[dict[int, TcpSegment]] = field(default=None, repr=False)
    hold: Optional[deque] = field(default=None, repr=False)
    hold_octets: int = 0
    standing: int = 0
    send_queue: Optional[deque] = field(default=None, repr=False)
    last_rx_len: Optional[int] = None
    rx_lens: Optional[list[tuple[int, int]]] = field(default=None, repr=False)
    record_rx: bool = False
    skip_holes: bool = False
    retries_left: int = SYN_RETRIES
    syn_timeout: int = SYN_RETRY_INTERVAL
    on_established: Optional[Callable[["TcpConnection"], None]] = field(default=None, repr=False)
    on_failed: Optional[Callable[["TcpConnection"], None]] = field(default=None, repr=False)
    timers: list[Timer] = field(default_factory=list, repr=False)
    syn_sent_at: int = 0
    established_at: Optional[int] = None

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.local_port, self.remote_ip, self.remote_port)

    @property
    def four_tuple(self) -> tuple[int, int, int, int]:
        return (self.local_ip, self.local_port, self.remote_ip, self.remote_port)

    @property
    def mss(self) -> int:
        if self.endpoint is None:
            return 1500 - TCPIP_HEADER_LEN
        return self.endpoint.mss_for(self)

    @property
    def bytes_in_flight(self) -> int:
        return seq_diff(self.snd_nxt, self.snd_una)

    def delivered_tags(self) -> list[Any]:
        return [tag for _, _, tag in self.delivered]


# ---------------------------------------------------------------- acceptance


def ack_acceptable(conn: TcpConnection, ack: int) -> bool:
    """Ack values an established endpoint takes on an inbound segment.

    The OS-specific window of width W trails ``snd_nxt``; acks for data
    still in flight are always acceptable as well.
    """
    w = conn.profile.ack_window
    if seq_in_window(ack, (conn.snd_nxt - w + 1) & SEQ_MASK, conn.snd_nxt):
        return True
    return seq_in_window(ack, conn.snd_una, conn.snd_nxt)


def ack_mask(conn: TcpConnection, acks: np.ndarray) -> np.ndarray:
    w = conn.profile.ack_window
    return window_mask(acks, (conn.snd_nxt - w + 1) & SEQ_MASK, conn.snd_nxt) | window_mask(
        acks, conn.snd_una, conn.snd_nxt)


def rcv_window_hi(conn: TcpConnection) -> int:
    return (conn.rcv_nxt + conn.rcv_wnd - 1) & SEQ_MASK


def accept_segment(conn: TcpConnection, seg: TcpSegment) -> AcceptResult:
    """Decide and apply an inbound segment on an established connection."""
    if conn.state is not ConnState.ESTABLISHED:
        return AcceptResult.DROPPED
    flags = seg.flags
    if flags & RST:
        if seg.seq == conn.rcv_nxt:
            conn.state = ConnState.RESET
            return AcceptResult.RESET_CONNECTION
        return AcceptResult.DROPPED
    if flags & SYN:
        return AcceptResult.CHALLENGE_DROPPED
    if not flags & ACK:
        return AcceptResult.DROPPED
    if seg.payload_len > 0:
        if not seq_in_window(seg.seq, conn.rcv_nxt, rcv_window_hi(conn)):
            return AcceptResult.DROPPED
        if not ack_acceptable(conn, seg.ack):
            return AcceptResult.DROPPED
        _advance_snd_una(conn, seg.ack)
        if seg.seq == conn.rcv_nxt:
            _deliver(conn, seg)
            if conn.reassembly:
                while conn.rcv_nxt in conn.reassembly:
                    _deliver(conn, conn.reassembly.pop(conn.rcv_nxt))
        else:
            if conn.reassembly is None:
                conn.reassembly = {}
            conn.reassembly.setdefault(seg.seq, seg)
        return AcceptResult.ACCEPTED_DATA
    if ack_acceptable(conn, seg.ack):
        _advance_snd_una(conn, seg.ack)
        return AcceptResult.ACCEPTED_ACK
    return AcceptResult.DROPPED


def accept_mask(conn: TcpConnection, template: TcpSegment, field_name: str,
                values: np.ndarray) -> np.ndarray:
    """Vectorised ``accept_segment(...) != Dropped`` over one varying field.

    ChallengeDropped counts as not accepted. Only valid while ``conn`` is
    established; the caller re-evaluates after each accepted segment.
    """
    n = len(values)
    flags = template.flags
    if conn.state is not ConnState.ESTABLISHED or flags & SYN or not (flags & (RST | ACK)):
        return np.zeros(n, dtype=bool)
    seqs = values if field_name == "seq" else np.full(n, template.seq, dtype=np.int64)
    acks = values if field_name == "ack" else np.full(n, template.ack, dtype=np.int64)
    if flags & RST:
        return np.asarray(seqs, dtype=np.int64) == conn.rcv_nxt
    mask = ack_mask(conn, acks)
    if template.payload_len > 0:
        mask &= window_mask(seqs, conn.rcv_nxt, rcv_window_hi(conn))
    return mask


def _advance_snd_una(conn: TcpConnection, ack: int) -> None:
    if ack != conn.snd_una and seq_leq(conn.snd_una, ack) and seq_leq(ack, conn.snd_nxt):
        conn.snd_una = ack


def _deliver(conn: TcpConnection, seg: TcpSegment) -> None:
    offset = seq_diff(seg.seq, (conn.irs + 1) & SEQ_MASK)
    conn.delivered.append((offset, seg.payload_len, seg.payload_tag))
    conn.rcv_nxt = (conn.rcv_nxt + seg.payload_len) & SEQ_MASK


# ---------------------------------------------------------------- endpoint


class Endpoint:
    """One host's TCP: connection table, listeners, PTB handling, apps."""

    def __init__(self, host: "Host", profile: OsProfile, rng: Rng,
                 pmtu_cache: Optional[PmtuCache] = None, rcv_wnd: int = 65535) -> None:
        self.host = host
        self.engine: Engine = host.engine
        self.ip = host.ip
        self.profile = profile
        self.rng = rng
        self.pmtu_cache = pmtu_cache or PmtuCache()
        self.rcv_wnd = rcv_wnd
        self.connections: dict[tuple[int, int, int], TcpConnection] = {}
        self.listeners: set[int] = set()
        self.stats: Counter[str] = Counter()
        self.ptb_stats: Counter[PtbReason] = Counter()

    # ------------------------------------------------------ lookups

    def find_connection(self, local_ip: int, local_port: int, remote_ip: int,
                        remote_port: int) -> Optional[TcpConnection]:
        if local_ip != self.ip:
            return None
        conn = self.connections.get((local_port, remote_ip, remote_port))
        if conn is None or conn.state not in (ConnState.ESTABLISHED, ConnState.SYN_RECEIVED):
            return None
        return conn

    def mss_for(self, conn: TcpConnection) -> int:
        return lookup_pmtu(self.pmtu_cache, conn, self.engine.now) - TCPIP_HEADER_LEN

    def listen(self, port: int) -> None:
        self.listeners.add(port)

    def _free_ephemeral(self) -> int:
        while True:
            port = self.rng.randint(EPHEMERAL_LO, EPHEMERAL_HI)
            if not any(k[0] == port for k in self.connections):
                return port

    # ------------------------------------------------------ active open

    def connect(self, remote_ip: IpAddr, remote_port: int, local_port: Optional[int] = None,
                app: Optional[AppPayloadModel] = None, retries: int = SYN_RETRIES,
                on_established: Optional[Callable[[TcpConnection], None]] = None,
                on_failed: Optional[Callable[[TcpConnection], None]] = None,
                record_rx: bool = False, syn_timeout: int = SYN_RETRY_INTERVAL) -> TcpConnection:
        if local_port is None:
            local_port = self._free_ephemeral()
        key = (local_port, remote_ip, remote_port)
        if key in self.connections:
            raise ValueError(f"connection {key} already exists")
        iss = self.rng.randbelow(1 << 32)
        conn = TcpConnection(
            self.ip, local_port, IpAddr(remote_ip), remote_port, ConnState.SYN_SENT, iss,
            self.profile, rcv_wnd=self.rcv_wnd, snd_una=iss, snd_nxt=(iss + 1) & SEQ_MASK,
            app=app, endpoint=self, retries_left=retries, on_established=on_established,
            on_failed=on_failed, syn_sent_at=self.engine.now, record_rx=record_rx,
            syn_timeout=syn_timeout,
        )
        self.connections[key] = conn
        self._send_syn(conn)
        return conn

    def _send_syn(self, conn: TcpConnection) -> None:
        self._emit(conn, conn.iss, 0, SYN)
        conn.timers.append(self.engine.call_later(conn.syn_timeout, lambda: self._syn_timeout(conn)))

    def _syn_timeout(self, conn: TcpConnection) -> None:
        if conn.state is not ConnState.SYN_SENT:
            return
        if conn.retries_left > 0:
            conn.retries_left -= 1
            self.stats["syn_retransmit"] += 1
            self._send_syn(conn)
            return
        self._fail(conn)

    def _fail(self, conn: TcpConnection) -> None:
        conn.state = ConnState.CLOSED
        self._forget(conn)
        if conn.on_failed:
            conn.on_failed(conn)

    def _forget(self, conn: TcpConnection) -> None:
        for t in conn.timers:
            t.cancel()
        conn.timers.clear()
        if self.connections.get(conn.key) is conn:
            del self.connections[conn.key]

    def abort(self, conn: TcpConnection) -> None:
        """Send RST and drop the connection."""
        if conn.state in (ConnState.ESTABLISHED, ConnState.SYN_RECEIVED, ConnState.SYN_SENT):
            self._emit(conn, conn.snd_nxt, 0, RST)
        conn.state = ConnState.CLOSED
        self._forget(conn)

    # ------------------------------------------------------ emission

    def _emit(self, conn: TcpConnection, seq: int, ack: int, flags: int,
              payload_len: int = 0, tag: Any = None) -> TcpSegment:
        seg = TcpSegment(self.ip, conn.local_port, conn.remote_ip, conn.remote_port,
                         seq, ack, flags, payload_len, tag)
        self.host.originate(Packet.tcp(seg))
        return seg

    def _send_ack(self, conn: TcpConnection) -> None:
        self._emit(conn, conn.snd_nxt, conn.rcv_nxt, ACK)

    def send_data(self, conn: TcpConnection, octets: int, tag: Any) -> list[TcpSegment]:
        if octets <= 0:
            return []
        if conn.send_queue is None:
            conn.send_queue = deque()
        conn.send_queue.append([octets, tag])
        return self._pump(conn)

    def stream_data(self, conn: TcpConnection, remaining: int, tag: Any = None) -> list[TcpSegment]:
        """Queue ``remaining`` octets; return the segments sent right away."""
        return self.send_data(conn, remaining, tag)

    def _pump(self, conn: TcpConnection) -> list[TcpSegment]:
        sent: list[TcpSegment] = []
        queue = conn.send_queue
        while queue and conn.state is ConnState.ESTABLISHED:
            headroom = conn.snd_wnd - conn.bytes_in_flight
            if headroom <= 0:
                break
            chunk = queue[0]
            n = min(self.mss_for(conn), chunk[0], headroom)
            seg = TcpSegment(self.ip, conn.local_port, conn.remote_ip, conn.remote_port,
                             conn.snd_nxt, conn.rcv_nxt, ACK | PSH, n, chunk[1])
            conn.snd_nxt = (conn.snd_nxt + n) & SEQ_MASK
            chunk[0] -= n
            if chunk[0] == 0:
                queue.popleft()
            self._transmit(conn, seg)
            sent.append(seg)
        return sent

    def _transmit(self, conn: TcpConnection, seg: TcpSegment) -> None:
        if conn.standing <= 0:
            self.host.originate(Packet.tcp(seg))
            return
        if conn.hold is None:
            conn.hold = deque()
        conn.hold.append(seg)
        conn.hold_octets += seg.payload_len
        excess = conn.hold_octets - conn.standing
        while excess > 0:
            old = conn.hold[0]
            if old.payload_len > excess:
                # release only the front of the oldest segment
                front = dataclasses.replace(old, payload_len=excess)
                conn.hold[0] = dataclasses.replace(
                    old, seq=(old.seq + excess) & SEQ_MASK, payload_len=old.payload_len - excess)
                old = front
            else:
                conn.hold.popleft()
            conn.hold_octets -= old.payload_len
            excess -= old.payload_len
            self.host.originate(Packet.tcp(old))

    def release_hold(self, conn: TcpConnection) -> None:
        """Drain the standing queue onto the wire (end of a trial)."""
        conn.standing = 0
        while conn.hold:
            seg = conn.hold.popleft()
            conn.hold_octets -= seg.payload_len
            self.host.originate(Packet.tcp(seg))

    def keepalive_tick(self, conn: TcpConnection) -> Optional[TcpSegment]:
        app = conn.app
        if conn.keepalive_interval is None or conn.state is not ConnState.ESTABLISHED:
            return None
        octets = app.keepalive_octets if app is not None else 1
        sent = self.send_data(conn, octets, app.content_tag if app else None)
        self.stats["keepalive"] += 1
        return sent[0] if sent else None

    def _keepalive_loop(self, conn: TcpConnection) -> None:
        if conn.state is not ConnState.ESTABLISHED:
            return
        self.keepalive_tick(conn)
        conn.timers.append(self.engine.call_later(conn.keepalive_interval,
                                                  lambda: self._keepalive_loop(conn)))

    # ------------------------------------------------------ apps

    def _start_app(self, conn: TcpConnection, app: AppPayloadModel) -> None:
        conn.app = app
        conn.standing = app.inflight_hold
        tag = app.content_tag
        if app.kind is AppKind.SSH_LIKE:
            self.send_data(conn, app.initial_octets, tag)
            if app.keepalive_interval:
                conn.keepalive_interval = app.keepalive_interval
                phase = self.rng.randbelow(app.keepalive_interval) + 1
                conn.timers.append(self.engine.call_later(phase, lambda: self._keepalive_loop(conn)))
        elif app.kind is AppKind.FTP_LIKE and app.pace_interval:
            remaining = [app.size]

            def drip() -> None:
                if conn.state is not ConnState.ESTABLISHED or remaining[0] <= 0:
                    return
                n = min(self.mss_for(conn), remaining[0])
                remaining[0] -= n
                self.send_data(conn, n, tag)
                conn.timers.append(self.engine.call_later(app.pace_interval, drip))

            drip()
        else:
            self.send_data(conn, app.size, tag)

    # ------------------------------------------------------ receive

    def on_packet(self, pkt: Packet) -> None:
        kind = pkt.kind
        if type(kind) is TcpSegment:
            self.on_segment(kind, pkt.total_len)
        else:
            self.on_ptb(kind)

    def on_ptb(self, ptb: IcmpPtb) -> PtbVerdict:
        verdict = handle_ptb(self, ptb, self.engine.now)
        self.ptb_stats[verdict.reason] += 1
        return verdict

    def on_ptb_burst(self, burst: PacketBurst) -> None:
        outcome = handle_ptb_burst(self, burst.template.kind, burst.values, self.engine.now)
        self.ptb_stats.update(outcome.verdicts)

    def on_segment(self, seg: TcpSegment, total_len: int) -> Optional[AcceptResult]:
        conn = self.connections.get((seg.dst_port, seg.src_ip, seg.src_port))
        flags = seg.flags
        if conn is None:
            if flags & SYN and not flags & ACK:
                if seg.dst_port in self.listeners:
                    self._passive_open(seg)
                else:
                    self._refuse(seg)
            return None
        state = conn.state
        if state is ConnState.SYN_SENT:
            self._on_syn_sent(conn, seg)
            return None
        if state is ConnState.SYN_RECEIVED:
            if flags & RST:
                if seg.seq == conn.rcv_nxt:
                    conn.state = ConnState.RESET
                    self._forget(conn)
                return None
            if flags & SYN and not flags & ACK:
                self._emit(conn, conn.iss, conn.rcv_nxt, SYN | ACK)
                return None
            if flags & ACK and seg.ack == (conn.iss + 1) & SEQ_MASK:
                self._establish(conn)
            else:
                return None
        result = accept_segment(conn, seg)
        self.stats[result.value] += 1
        if result is AcceptResult.ACCEPTED_DATA:
            conn.last_rx_len = total_len
            if conn.skip_holes and conn.reassembly:
                # treat whatever arrived last as in order; nothing waits for a retransmission
                end = (seg.seq + seg.payload_len) & SEQ_MASK
                if seq_leq(conn.rcv_nxt, end):
                    conn.rcv_nxt = end
                conn.reassembly.clear()
            if conn.record_rx:
                if conn.rx_lens is None:
                    conn.rx_lens = []
                conn.rx_lens.append((self.engine.now, total_len))
            self._send_ack(conn)
            if conn.app is None and isinstance(seg.payload_tag, AppPayloadModel):
                self._start_app(conn, seg.payload_tag)
        elif result is AcceptResult.ACCEPTED_ACK:
            self._pump(conn)
        elif result is AcceptResult.RESET_CONNECTION:
            self._forget(conn)
        return result

    def on_burst(self, burst: PacketBurst) -> None:
        tmpl = burst.template.kind
        if burst.field == "dst_port":
            for pkt in burst:
                self.on_packet(pkt)
            return
        conn = self.connections.get((tmpl.dst_port, tmpl.src_ip, tmpl.src_port))
        if conn is None or conn.state is not ConnState.ESTABLISHED:
            self.stats[AcceptResult.DROPPED.value] += len(burst)
            return
        values = burst.values
        start, n = 0, len(values)
        while start < n and conn.state is ConnState.ESTABLISHED:
            mask = accept_mask(conn, tmpl, burst.field, values[start:])
            if not mask.any():
                break
            i = start + int(np.argmax(mask))
            self.stats[AcceptResult.DROPPED.value] += i - start
            self.on_segment(burst.packet(i).kind, burst.total_len)
            start = i + 1
        self.stats[AcceptResult.DROPPED.value] += n - start

    def _passive_open(self, syn: TcpSegment) -> None:
        iss = self.rng.randbelow(1 << 32)
        conn = TcpConnection(
            self.ip, syn.dst_port, syn.src_ip, syn.src_port, ConnState.SYN_RECEIVED, iss,
            self.profile, rcv_wnd=self.rcv_wnd, irs=syn.seq, snd_una=iss,
            snd_nxt=(iss + 1) & SEQ_MASK, rcv_nxt=(syn.seq + 1) & SEQ_MASK, endpoint=self,
        )
        self.connections[conn.key] = conn
        self._emit(conn, iss, conn.rcv_nxt, SYN | ACK)

    def _refuse(self, seg: TcpSegment) -> None:
        rst = TcpSegment(self.ip, seg.dst_port, seg.src_ip, seg.src_port, 0,
                         (seg.seq + 1) & SEQ_MASK, RST | ACK)
        self.host.originate(Packet.tcp(rst))

    def _on_syn_sent(self, conn: TcpConnection, seg: TcpSegment) -> None:
        expected = (conn.iss + 1) & SEQ_MASK
        if seg.flags & RST:
            if seg.flags & ACK and seg.ack == expected:
                self._fail(conn)
            return
        if seg.flags & SYN and seg.flags & ACK and seg.ack == expected:
            conn.irs = seg.seq
            conn.rcv_nxt = (seg.seq + 1) & SEQ_MASK
            conn.snd_una = expected
            self._establish(conn)
            self._send_ack(conn)
            if conn.app is not None:
                self.send_data(conn, conn.app.request_octets, conn.app)

    def _establish(self, conn: TcpConnection) -> None:
        conn.state = ConnState.ESTABLISHED
        conn.established_at = self.engine.now
        conn.snd_una = (conn.iss + 1) & SEQ_MASK
        for t in conn.timers:
            t.cancel()
        conn.timers.clear()
        if conn.on_established:
            conn.on_established(conn)


class Host(Node):
    """An end host running an ``Endpoint``.

    With ``capture`` set the host also keeps every marker-tagged TCP payload
    it receives, whatever its own TCP later makes of the segment. The
    puppet uses this to read markers off spoofed packets.
    """

    def __init__(self, engine: Engine, name: str, ip: IpAddr | str,
                 profile: OsProfile = PROFILES[OsName.LINUX],
                 pmtu_cache: Optional[PmtuCache] = None, rcv_wnd: int = 65535,
                 capture: bool = False) -> None:
        super().__init__(engine, name, ip)
        self.stack = Endpoint(self, profile, engine.rng.child(f"tcp/{name}"), pmtu_cache, rcv_wnd)
        self.capture = capture
        self.captured: list[tuple[int, int, str]] = []

    def receive(self, link: Link, frames: list) -> None:
        stack = self.stack
        for frame in frames:
            self.consume(len(frame))
            if isinstance(frame, Packet):
                if self.capture:
                    self._capture(frame)
                stack.on_packet(frame)
            elif frame.is_tcp:
                if self.capture and frame.field == "dst_port":
                    for pkt in frame:
                        self._capture(pkt)
                    for pkt in frame:
                        stack.on_packet(pkt)
                else:
                    stack.on_burst(frame)
            else:
                stack.on_ptb_burst(frame)

    def _capture(self, pkt: Packet) -> None:
        kind = pkt.kind
        if type(kind) is TcpSegment and isinstance(kind.payload_tag, str) \
                and kind.payload_tag.startswith("TCP_"):
            self.captured.append((self.engine.now, kind.dst_port, kind.payload_tag))


def open_connection(engine: Engine, client: Host, server: Host, server_port: int,
                    app: Optional[AppPayloadModel] = None, local_port: Optional[int] = None,
                    timeout: int = seconds(10), record_rx: bool = False,
                    ) -> tuple[TcpConnection, TcpConnection]:
    """Connect and run the engine until both ends are established."""
    conn = client.stack.connect(server.ip, server_port, local_port, app=app, record_rx=record_rx)
    deadline = engine.now + timeout
    step = 1000
    while engine.now < deadline:
        engine.run_for(step)
        if conn.state is ConnState.CLOSED:
            raise ConnectionFailed(f"{client.name} -> {server.name}:{server_port} failed")
        if conn.state is ConnState.ESTABLISHED:
            peer = _server_side(server, conn)
            if peer is not None and peer.state is ConnState.ESTABLISHED:
                return conn, peer
    raise ConnectionFailed(f"{client.name} -> {server.name}:{server_port} timed out")


def _server_side(server: Host, client_conn: TcpConnection) -> Optional[TcpConnection]:
    for conn in server.stack.connections.values():
        if conn.local_port == client_conn.remote_port and conn.irs == client_conn.iss:
            return conn
    return None

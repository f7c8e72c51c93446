"""Address-sharing gateway: session table, translation and port allocation.

Three allocators are provided. Port preservation keeps the internal source
port when it is free for the remote endpoint and otherwise runs a
window-halving scan from random starting points; per-destination sequential
allocation draws a random base per remote endpoint and counts up from it;
random allocation picks uniformly among idle ports.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .netmodel import ACK, FIN, RST, SYN, IpAddr, Packet, PacketBurst, TcpSegment
from .simcore import Engine, Link, Node, Rng, seconds

PORT_LO = 1024
PORT_HI = 65535
RANDOM_TRIES = 64

Endpoint = tuple[int, int]


class Strategy(str, enum.Enum):
    PORT_PRESERVATION = "PortPreservation"
    SEQUENTIAL = "PerDestinationSequential"
    RANDOM = "RandomAllocation"


class SessionState(str, enum.Enum):
    SYN_SENT = "SynSent"
    ESTABLISHED = "Established"


class AllocationFailed(Exception):
    def __init__(self, rounds_used: int) -> None:
        super().__init__(f"no idle port after {rounds_used} rounds")
        self.rounds_used = rounds_used


@dataclass(frozen=True)
class AllocatorConfig:
    strategy: Strategy = Strategy.PORT_PRESERVATION
    search_initial_window: int = 128
    search_min_window: int = 8
    per_round_delay: int = 0
    syn_entry_timeout: int = seconds(10)
    established_timeout: Optional[int] = None
    port_range: tuple[int, int] = (PORT_LO, PORT_HI)
    scan_widths: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "port_range", tuple(self.port_range))
        w, m = self.search_initial_window, self.search_min_window
        if w <= 0 or w & (w - 1) or w < m or m <= 0:
            raise ValueError(f"search window {w} must be a power of two >= min window {m}")
        lo, hi = self.port_range
        if not PORT_LO <= lo <= hi <= PORT_HI:
            raise ValueError(f"port range {self.port_range} outside [{PORT_LO}, {PORT_HI}]")
        if self.scan_widths is not None:
            if not self.scan_widths or min(self.scan_widths) <= 0:
                raise ValueError("scan widths must be positive")
            object.__setattr__(self, "scan_widths", tuple(self.scan_widths))
        if self.per_round_delay < 0:
            raise ValueError("negative per-round delay")

    def widths(self) -> tuple[int, ...]:
        """Scan widths of the conflict search, 64/32/16/8 by default."""
        if self.scan_widths is not None:
            return self.scan_widths
        out = []
        window = self.search_initial_window
        while window // 2 >= self.search_min_window:
            window //= 2
            out.append(window)
        return tuple(out)


@dataclass(eq=False)
class NatSession:
    internal_ip: IpAddr
    internal_port: int
    external_port: int
    remote_ip: IpAddr
    remote_port: int
    state: SessionState
    last_activity: int
    created_at: int = 0

    @property
    def remote(self) -> Endpoint:
        return (self.remote_ip, self.remote_port)

    def as_row(self) -> tuple:
        return (str(IpAddr(self.internal_ip)), self.internal_port, self.external_port,
                str(IpAddr(self.remote_ip)), self.remote_port, self.state.value,
                self.last_activity)


@dataclass
class SessionTable:
    by_external: dict[tuple[int, int, int], NatSession] = field(default_factory=dict)
    by_internal: dict[tuple[int, int, int, int], NatSession] = field(default_factory=dict)
    used: dict[Endpoint, set[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.by_external)

    def occupied(self, remote: Endpoint) -> set[int]:
        return self.used.get(remote, set())

    def add(self, s: NatSession) -> None:
        ext = (s.external_port, s.remote_ip, s.remote_port)
        if ext in self.by_external:
            raise RuntimeError(f"external mapping {ext} already live")
        self.by_external[ext] = s
        self.by_internal[(s.internal_ip, s.internal_port, s.remote_ip, s.remote_port)] = s
        self.used.setdefault(s.remote, set()).add(s.external_port)

    def remove(self, s: NatSession) -> None:
        self.by_external.pop((s.external_port, s.remote_ip, s.remote_port), None)
        self.by_internal.pop((s.internal_ip, s.internal_port, s.remote_ip, s.remote_port), None)
        ports = self.used.get(s.remote)
        if ports is not None:
            ports.discard(s.external_port)
            if not ports:
                del self.used[s.remote]


class PortAllocator:
    """The allocation decision alone, without any packet handling."""

    def __init__(self, config: AllocatorConfig, rng: Rng) -> None:
        self.config = config
        self.rng = rng
        self.next_port: dict[Endpoint, int] = {}
        self.lo, self.hi = config.port_range
        self.span = self.hi - self.lo + 1

    def allocate(self, internal_port: int, remote: Endpoint,
                 occupied: set[int]) -> tuple[int, int]:
        """Return ``(external_port, rounds_used)`` or raise AllocationFailed."""
        strategy = self.config.strategy
        if strategy is Strategy.PORT_PRESERVATION:
            return self._preserve(internal_port, occupied)
        if strategy is Strategy.SEQUENTIAL:
            return self._sequential(remote, occupied), 0
        return self._random(occupied), 0

    def _wrap(self, port: int) -> int:
        return self.lo + (port - self.lo) % self.span

    def _preserve(self, port: int, occupied: set[int]) -> tuple[int, int]:
        if self.lo <= port <= self.hi and port not in occupied:
            return port, 0
        widths = self.config.widths()
        for rounds, width in enumerate(widths, start=1):
            start = self.rng.randint(self.lo, self.hi)
            for i in range(width):
                candidate = self._wrap(start + i)
                if candidate not in occupied:
                    return candidate, rounds
        raise AllocationFailed(len(widths))

    def _sequential(self, remote: Endpoint, occupied: set[int]) -> int:
        candidate = self.next_port.get(remote)
        if candidate is None:
            candidate = self.rng.randint(self.lo, self.hi)
        for _ in range(self.span):
            if candidate not in occupied:
                self.next_port[remote] = self._wrap(candidate + 1)
                return candidate
            candidate = self._wrap(candidate + 1)
        raise AllocationFailed(0)

    def _random(self, occupied: set[int]) -> int:
        if len(occupied) >= self.span:
            raise AllocationFailed(0)
        for _ in range(RANDOM_TRIES):
            candidate = self.rng.randint(self.lo, self.hi)
            if candidate not in occupied:
                return candidate
        # dense table: draw directly among the idle ports
        idle = [p for p in range(self.lo, self.hi + 1) if p not in occupied]
        return idle[self.rng.randbelow(len(idle))]


class Gateway(Node):
    """NAT node with one WAN link and any number of LAN links."""

    def __init__(self, engine: Engine, name: str, public_ip: IpAddr | str,
                 config: AllocatorConfig, rng: Optional[Rng] = None) -> None:
        super().__init__(engine, name, public_ip)
        self.config = config
        self.allocator = PortAllocator(config, rng or engine.rng.child(f"nat/{name}"))
        self.sessions = SessionTable()
        self.wan: Optional[Link] = None
        self.failed_allocations = 0
        self.last_failure_rounds = 0
        self._expiry_armed = False

    @property
    def public_ip(self) -> IpAddr:
        return self.ip

    def attach_wan(self, link: Link) -> None:
        self.wan = link
        self.default_route = link

    # ------------------------------------------------------ allocation

    def allocate_port(self, internal: Endpoint, remote: Endpoint) -> tuple[int, int]:
        if (*internal, *remote) in self.sessions.by_internal:
            raise ValueError(f"flow {internal} -> {remote} already has a session")
        return self.allocator.allocate(internal[1], remote, self.sessions.occupied(remote))

    def session_for(self, external_port: int, remote: Endpoint) -> Optional[NatSession]:
        return self.sessions.by_external.get((external_port, *remote))

    def snapshot(self) -> list[tuple]:
        return sorted(s.as_row() for s in self.sessions.by_external.values())

    def external_port_of(self, internal_ip: int, internal_port: int,
                         remote: Endpoint) -> Optional[int]:
        s = self.sessions.by_internal.get((internal_ip, internal_port, *remote))
        return None if s is None else s.external_port

    def expire_sessions(self, now: int) -> int:
        cfg = self.config
        stale = []
        for s in self.sessions.by_external.values():
            idle = now - s.last_activity
            if s.state is SessionState.SYN_SENT and idle >= cfg.syn_entry_timeout:
                stale.append(s)
            elif (s.state is SessionState.ESTABLISHED and cfg.established_timeout is not None
                  and idle >= cfg.established_timeout):
                stale.append(s)
        for s in stale:
            self.sessions.remove(s)
        return len(stale)

    def _arm_expiry(self) -> None:
        if self._expiry_armed:
            return
        self._expiry_armed = True
        self.engine.call_later(seconds(1), self._expiry_tick)

    def _expiry_tick(self) -> None:
        self._expiry_armed = False
        self.expire_sessions(self.engine.now)
        if any(s.state is SessionState.SYN_SENT for s in self.sessions.by_external.values()):
            self._arm_expiry()

    # ------------------------------------------------------ forwarding

    def receive(self, link: Link, frames: list) -> None:
        inbound = link is self.wan
        for frame in frames:
            if inbound:
                self._inbound(frame)
            elif isinstance(frame, Packet):
                self._outbound(frame)
            else:
                for pkt in frame:
                    self._outbound(pkt)

    def translate_outbound(self, pkt: Packet) -> Optional[tuple[Packet, int]]:
        """Rewrite an internal packet; return it with its forwarding delay."""
        seg = pkt.kind
        if type(seg) is not TcpSegment:
            return None
        now = self.engine.now
        table = self.sessions
        s = table.by_internal.get((seg.src_ip, seg.src_port, seg.dst_ip, seg.dst_port))
        delay = 0
        if s is None:
            if not (seg.flags & SYN) or seg.flags & ACK:
                return None
            remote = (seg.dst_ip, seg.dst_port)
            try:
                port, rounds = self.allocator.allocate(seg.src_port, remote, table.occupied(remote))
            except AllocationFailed as exc:
                self.failed_allocations += 1
                self.last_failure_rounds = exc.rounds_used
                return None
            s = NatSession(seg.src_ip, seg.src_port, port, seg.dst_ip, seg.dst_port,
                           SessionState.SYN_SENT, now, now)
            table.add(s)
            self._arm_expiry()
            delay = rounds * self.config.per_round_delay
        s.last_activity = now
        out = Packet(_replace_src(seg, self.ip, s.external_port), pkt.total_len, pkt.df)
        if seg.flags & (RST | FIN):
            table.remove(s)
        return out, delay

    def _outbound(self, pkt: Packet) -> None:
        result = self.translate_outbound(pkt)
        if result is None:
            self.drop()
            return
        out, delay = result
        self.send_on(self.wan, out, delay)

    def translate_inbound(self, pkt: Packet) -> Optional[Packet]:
        seg = pkt.kind
        if type(seg) is not TcpSegment or seg.dst_ip != self.ip:
            return None
        s = self.sessions.by_external.get((seg.dst_port, seg.src_ip, seg.src_port))
        if s is None:
            return None
        self._touch(s, seg.flags)
        return Packet(_replace_dst(seg, s.internal_ip, s.internal_port), pkt.total_len, pkt.df)

    def _touch(self, s: NatSession, flags: int) -> None:
        s.last_activity = self.engine.now
        if s.state is SessionState.SYN_SENT and flags & SYN and flags & ACK:
            s.state = SessionState.ESTABLISHED

    def _inbound(self, frame) -> None:
        if isinstance(frame, Packet):
            out = self.translate_inbound(frame)
            if out is None:
                self.drop()
            else:
                self.forward(out)
            return
        if not frame.is_tcp or frame.dst_ip != self.ip:
            self.drop(len(frame))
            return
        tmpl: TcpSegment = frame.template.kind
        if frame.field == "dst_port":
            self._inbound_port_sweep(frame, tmpl)
            return
        s = self.sessions.by_external.get((tmpl.dst_port, tmpl.src_ip, tmpl.src_port))
        if s is None:
            self.drop(len(frame))
            return
        self._touch(s, tmpl.flags)
        self.forward(frame.with_kind(_replace_dst(tmpl, s.internal_ip, s.internal_port)))

    def _inbound_port_sweep(self, burst: PacketBurst, tmpl: TcpSegment) -> None:
        occupied = self.sessions.occupied((tmpl.src_ip, tmpl.src_port))
        if not occupied:
            self.drop(len(burst))
            return
        ports = np.fromiter(occupied, dtype=np.int64, count=len(occupied))
        hits = np.flatnonzero(np.isin(burst.values, ports))
        self.drop(len(burst) - len(hits))
        for i in hits:
            out = self.translate_inbound(burst.packet(int(i)))
            if out is None:
                self.drop()
            else:
                self.forward(out)


def _replace_src(seg: TcpSegment, ip: IpAddr, port: int) -> TcpSegment:
    return TcpSegment(ip, port, seg.dst_ip, seg.dst_port, seg.seq, seg.ack,
                      seg.flags, seg.payload_len, seg.payload_tag)


def _replace_dst(seg: TcpSegment, ip: IpAddr, port: int) -> TcpSegment:
    return TcpSegment(seg.src_ip, seg.src_port, ip, port, seg.seq, seg.ack,
                      seg.flags, seg.payload_len, seg.payload_tag)

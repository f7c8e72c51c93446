"""Seeded discrete-event engine, links and generic forwarding nodes.

Time is integer microseconds. Events at equal times dispatch in insertion
order. Every node batches what it sends during one dispatch and hands each
outgoing link a single list, so a node answering 200 SYNs produces one
delivery event per link rather than 200.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import random
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional, TextIO

import numpy as np

from .netmodel import (
    MIN_IPV4_MTU,
    Frame,
    IcmpPtb,
    IpAddr,
    Packet,
    build_ptb,
)

US_PER_S = 1_000_000


def ms(value: float) -> int:
    return int(round(value * 1000))


def seconds(value: float) -> int:
    return int(round(value * US_PER_S))


class SchedulingError(RuntimeError):
    """An event was scheduled before the current simulated time."""


class UnsupportedConfiguration(RuntimeError):
    pass


class Rng:
    """Seeded Mersenne Twister (``random.Random``) with named sub-streams.

    ``child(label)`` derives an independent stream from SHA-256 of the parent
    seed and the label, so adding draws in one component never shifts
    another component's stream.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed & 0xFFFFFFFFFFFFFFFF
        self._r = random.Random(self.seed)

    def child(self, label: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "big"))

    def randbelow(self, n: int) -> int:
        return self._r.randrange(n)

    def randint(self, a: int, b: int) -> int:
        return self._r.randint(a, b)

    def random(self) -> float:
        return self._r.random()

    def uniform(self, a: float, b: float) -> float:
        return self._r.uniform(a, b)

    def shuffle(self, seq: list) -> None:
        self._r.shuffle(seq)

    def getstate(self) -> Any:
        return self._r.getstate()

    def setstate(self, state: Any) -> None:
        self._r.setstate(state)

    def bernoulli_mask(self, n: int, p: float) -> np.ndarray:
        draws = np.array([self._r.random() for _ in range(n)])
        return draws < p


@dataclass
class Ledger:
    """Packet conservation counters for one engine."""

    injected: int = 0
    delivered: int = 0
    dropped_mtu: int = 0
    dropped_loss: int = 0
    dropped_policy: int = 0
    in_transit: int = 0
    ptb_emitted: int = 0

    def reconciles(self) -> bool:
        accounted = (
            self.delivered + self.dropped_mtu + self.dropped_loss
            + self.dropped_policy + self.in_transit
        )
        return self.injected == accounted


class Timer:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn: Callable[[], None]) -> None:
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass(frozen=True)
class Event:
    at: int
    target: Optional["Node"]
    payload: Any


class Engine:
    def __init__(self, seed: int = 0, log: Optional[TextIO] = None) -> None:
        self.now = 0
        self.rng = Rng(seed)
        self.ledger = Ledger()
        self.nodes: dict[str, Node] = {}
        self.links: list[Link] = []
        self.log = log
        self.dispatched = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._counter = itertools.count()
        self._dirty: list[Node] = []

    # -------------------------------------------------------- scheduling

    def schedule(self, event: Event) -> None:
        if event.at < self.now:
            raise SchedulingError(f"event at {event.at} scheduled from t={self.now}")
        heapq.heappush(self._queue, (event.at, next(self._counter), event))

    def call_at(self, at: int, fn: Callable[[], None]) -> Timer:
        timer = Timer(fn)
        self.schedule(Event(at, None, timer))
        return timer

    def call_later(self, delay: int, fn: Callable[[], None]) -> Timer:
        return self.call_at(self.now + delay, fn)

    def deliver(self, at: int, target: "Node", link: "Link", frames: list[Frame],
                count: Optional[int] = None) -> None:
        if count is None:
            count = sum(len(f) for f in frames)
        self.ledger.in_transit += count
        self.schedule(Event(at, target, (link, frames, count)))

    @property
    def pending(self) -> int:
        return len(self._queue)

    def next_event_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def run_until(self, deadline: int) -> None:
        # frames originated outside a dispatch (e.g. a connect() call) go out now
        self._flush()
        queue = self._queue
        while queue and queue[0][0] <= deadline:
            at, _, event = heapq.heappop(queue)
            self.now = at
            self._dispatch(event)
        if deadline > self.now:
            self.now = deadline

    def run_for(self, delay: int) -> None:
        self.run_until(self.now + delay)

    def _dispatch(self, event: Event) -> None:
        payload = event.payload
        if isinstance(payload, Timer):
            if payload.cancelled:
                return
            self.dispatched += 1
            if self.log is not None:
                self.log.write(f"{event.at} timer -\n")
            payload.fn()
        else:
            link, frames, count = payload
            self.dispatched += 1
            self.ledger.in_transit -= count
            if self.log is not None:
                for f in frames:
                    self.log.write(f"{event.at} {event.target.name} {f.summary()}\n")
            event.target.receive(link, frames)
        self._flush()

    def mark_dirty(self, node: "Node") -> None:
        self._dirty.append(node)

    def _flush(self) -> None:
        while self._dirty:
            dirty, self._dirty = self._dirty, []
            for node in dirty:
                node.flush()

    # -------------------------------------------------------- wiring

    def add_node(self, node: "Node") -> "Node":
        if node.name in self.nodes:
            raise ValueError(f"duplicate node {node.name}")
        self.nodes[node.name] = node
        return node

    def connect(self, a: "Node", b: "Node", latency: int, mtu: int = 1500,
                loss_rate: float = 0.0) -> "Link":
        link = Link(self, a, b, latency, mtu, loss_rate)
        self.links.append(link)
        a.links.append(link)
        b.links.append(link)
        return link

    def spoof_inject(self, at_node: "Node", frame: Frame) -> None:
        """Put a frame with arbitrary source address onto ``at_node``'s uplink."""
        if not getattr(at_node, "can_spoof", False):
            raise PermissionError(f"{at_node.name} is not allowed to spoof")
        at_node.originate(frame)
        self._flush()


class Link:
    """Bidirectional point-to-point link with an MTU and one-way latency."""

    def __init__(self, engine: Engine, a: "Node", b: "Node", latency: int,
                 mtu: int, loss_rate: float = 0.0) -> None:
        if mtu < MIN_IPV4_MTU:
            raise ValueError(f"link MTU {mtu} below {MIN_IPV4_MTU}")
        if latency <= 0:
            raise ValueError("link latency must be positive")
        if not 0.0 <= loss_rate <= 1.0:
            raise ValueError("loss rate outside [0, 1]")
        self.engine = engine
        self.a = a
        self.b = b
        self.latency = latency
        self.mtu = mtu
        self.loss_rate = loss_rate
        self.rng = engine.rng.child(f"link/{a.name}-{b.name}")
        self.octets = 0

    def __repr__(self) -> str:
        return f"Link({self.a.name}<->{self.b.name}, {self.latency}us, mtu={self.mtu})"

    def peer(self, node: "Node") -> "Node":
        return self.b if node is self.a else self.a

    def transmit(self, frames: Iterable[Frame], sender: "Node") -> None:
        ledger = self.engine.ledger
        out: list[Frame] = []
        count = 0
        mtu = self.mtu
        for frame in frames:
            single = type(frame) is Packet
            if single:
                if not frame.df and type(frame.kind) is not IcmpPtb:
                    raise UnsupportedConfiguration("TCP segments must carry DF=1")
                if frame.total_len <= mtu and self.loss_rate == 0.0:
                    self.octets += frame.total_len
                    out.append(frame)
                    count += 1
                    continue
            elif frame.is_tcp and not frame.df:
                raise UnsupportedConfiguration("TCP segments must carry DF=1")
            if frame.total_len > mtu:
                # PTBs are 56 octets and never exceed a legal MTU.
                n = len(frame)
                ledger.dropped_mtu += n
                for pkt in (frame,) if isinstance(frame, Packet) else frame:
                    ledger.ptb_emitted += 1
                    sender.originate(build_ptb(pkt, self.mtu, sender.ip))
                continue
            if self.loss_rate > 0.0 and frame.is_tcp:
                frame = self._apply_loss(frame)
                if frame is None:
                    continue
            n = len(frame)
            self.octets += frame.total_len * n
            out.append(frame)
            count += n
        if out:
            self.engine.deliver(self.engine.now + self.latency, self.peer(sender), self, out, count)

    def _apply_loss(self, frame: Frame) -> Optional[Frame]:
        ledger = self.engine.ledger
        if isinstance(frame, Packet):
            if self.rng.random() < self.loss_rate:
                ledger.dropped_loss += 1
                return None
            return frame
        lost = self.rng.bernoulli_mask(len(frame), self.loss_rate)
        ledger.dropped_loss += int(lost.sum())
        kept = frame.select(~lost)
        return kept if len(kept) else None


class Node:
    """Something with an address that frames can be routed to or through."""

    can_spoof = False

    def __init__(self, engine: Engine, name: str, ip: IpAddr | str) -> None:
        self.engine = engine
        self.name = name
        self.ip = IpAddr(ip)
        self.links: list[Link] = []
        self.routes: dict[int, Link] = {}
        self.default_route: Optional[Link] = None
        self._outbox: dict[Link, list[Frame]] = defaultdict(list)
        self.tx_packets = 0
        self.tx_octets = 0
        engine.add_node(self)

    def add_route(self, dst: IpAddr | str, link: Link) -> None:
        self.routes[IpAddr(dst)] = link

    def route(self, dst: int) -> Optional[Link]:
        return self.routes.get(dst, self.default_route)

    def originate(self, frame: Frame) -> None:
        """Send a frame this node created."""
        n = 1 if type(frame) is Packet else len(frame)
        self.engine.ledger.injected += n
        self.tx_packets += n
        self.tx_octets += n * frame.total_len
        self.forward(frame)

    def forward(self, frame: Frame) -> None:
        link = self.routes.get(frame.dst_ip, self.default_route)
        if link is None:
            self.engine.ledger.dropped_policy += len(frame)
            return
        self.send_on(link, frame)

    def send_on(self, link: Link, frame: Frame, delay: int = 0) -> None:
        if delay:
            ledger = self.engine.ledger
            ledger.in_transit += len(frame)

            def release() -> None:
                ledger.in_transit -= len(frame)
                link.transmit([frame], self)

            self.engine.call_later(delay, release)
            return
        box = self._outbox[link]
        if not box:
            self.engine.mark_dirty(self)
        box.append(frame)

    def flush(self) -> None:
        if not self._outbox:
            return
        outbox, self._outbox = self._outbox, defaultdict(list)
        for link, frames in outbox.items():
            if frames:
                link.transmit(frames, self)

    def consume(self, n: int = 1) -> None:
        self.engine.ledger.delivered += n

    def drop(self, n: int = 1) -> None:
        self.engine.ledger.dropped_policy += n

    def receive(self, link: Link, frames: list[Frame]) -> None:
        raise NotImplementedError


class Router(Node):
    """Static-route forwarder; also the emitter of authentic PTBs."""

    def receive(self, link: Link, frames: list[Frame]) -> None:
        for frame in frames:
            if frame.dst_ip == self.ip:
                self.consume(len(frame))
            else:
                self.forward(frame)


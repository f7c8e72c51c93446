"""Server-side path MTU discovery: PTB validation and the path-MTU cache.

The cache is keyed per destination IP (how deployed stacks behave) or per
connection four-tuple (the isolating countermeasure). Validation checks that
the quoted sequence number lies inside the sender's ``[snd_una, snd_nxt]``
window, both ends inclusive, and nothing else about the PTB's origin.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Hashable, Optional, Protocol

import numpy as np

from .netmodel import (
    MIN_IPV4_MTU,
    PTB_EMBEDDED_LEN,
    TCPIP_HEADER_LEN,
    IcmpPtb,
    seq_in_window,
    window_mask,
)


class CacheMode(str, enum.Enum):
    PER_IP = "PerIp"
    PER_CONNECTION = "PerConnection"


class PtbReason(str, enum.Enum):
    OK = "Ok"
    NO_MATCHING_CONNECTION = "NoMatchingConnection"
    SEQ_OUT_OF_WINDOW = "SeqOutOfWindow"
    BLOCKED = "Blocked"
    MTU_NOT_LOWER = "MtuNotLower"
    BELOW_FLOOR_CLAMPED = "BelowFloorClamped"


@dataclass(frozen=True)
class PtbVerdict:
    accepted: bool
    reason: PtbReason

    def __post_init__(self) -> None:
        if self.accepted and self.reason not in (PtbReason.OK, PtbReason.BELOW_FLOOR_CLAMPED):
            raise ValueError(f"accepted verdict with reason {self.reason}")


OK = PtbVerdict(True, PtbReason.OK)
CLAMPED = PtbVerdict(True, PtbReason.BELOW_FLOOR_CLAMPED)
NO_MATCH = PtbVerdict(False, PtbReason.NO_MATCHING_CONNECTION)
OUT_OF_WINDOW = PtbVerdict(False, PtbReason.SEQ_OUT_OF_WINDOW)
BLOCKED = PtbVerdict(False, PtbReason.BLOCKED)
NOT_LOWER = PtbVerdict(False, PtbReason.MTU_NOT_LOWER)


class ConnectionView(Protocol):
    local_ip: int
    local_port: int
    remote_ip: int
    remote_port: int
    snd_una: int
    snd_nxt: int


class ServerState(Protocol):
    pmtu_cache: "PmtuCache"

    def find_connection(self, local_ip: int, local_port: int,
                        remote_ip: int, remote_port: int) -> Optional[ConnectionView]: ...


@dataclass
class CacheChange:
    time: int
    key: Hashable
    old: int
    new: int


@dataclass
class PmtuCache:
    mode: CacheMode = CacheMode.PER_IP
    floor: int = 552
    default_pmtu: int = 1500
    block_ptb: bool = False
    expiry: Optional[int] = None
    entries: dict[Hashable, tuple[int, int]] = field(default_factory=dict)
    changes: list[CacheChange] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.mode = CacheMode(self.mode)
        if not MIN_IPV4_MTU <= self.floor <= self.default_pmtu:
            raise ValueError(f"floor {self.floor} outside [{MIN_IPV4_MTU}, {self.default_pmtu}]")

    def key_for(self, conn: ConnectionView) -> Hashable:
        if self.mode is CacheMode.PER_IP:
            return conn.remote_ip
        return (conn.local_ip, conn.local_port, conn.remote_ip, conn.remote_port)

    def get(self, key: Hashable, now: int = 0) -> int:
        entry = self.entries.get(key)
        if entry is None:
            return self.default_pmtu
        pmtu, updated_at = entry
        if self.expiry is not None and now - updated_at >= self.expiry:
            del self.entries[key]
            return self.default_pmtu
        return pmtu


def validate_ptb(server: ServerState, ptb: IcmpPtb) -> PtbVerdict:
    if server.pmtu_cache.block_ptb:
        return BLOCKED
    conn = _quoted_connection(server, ptb)
    if conn is None:
        return NO_MATCH
    if not seq_in_window(ptb.embedded.seq, conn.snd_una, conn.snd_nxt):
        return OUT_OF_WINDOW
    return OK


def _quoted_connection(server: ServerState, ptb: IcmpPtb) -> Optional[ConnectionView]:
    if ptb.embedded_len != PTB_EMBEDDED_LEN:
        return None
    e = ptb.embedded
    return server.find_connection(e.src_ip, e.src_port, e.dst_ip, e.dst_port)


def apply_ptb(cache: PmtuCache, conn: ConnectionView, ptb: IcmpPtb, now: int = 0) -> PtbVerdict:
    """Lower the cached path MTU for ``conn``'s key. Caller has validated."""
    key = cache.key_for(conn)
    current = cache.get(key, now)
    new = max(cache.floor, ptb.next_hop_mtu)
    if new >= current:
        return NOT_LOWER
    cache.entries[key] = (new, now)
    cache.changes.append(CacheChange(now, key, current, new))
    return CLAMPED if ptb.next_hop_mtu < cache.floor else OK


def lookup_pmtu(cache: PmtuCache, conn: ConnectionView, now: int = 0) -> int:
    return cache.get(cache.key_for(conn), now)


def mss_for(cache: PmtuCache, conn: ConnectionView, now: int = 0) -> int:
    return lookup_pmtu(cache, conn, now) - TCPIP_HEADER_LEN


def handle_ptb(server: ServerState, ptb: IcmpPtb, now: int = 0) -> PtbVerdict:
    """Full receive path: validate, then apply if valid."""
    verdict = validate_ptb(server, ptb)
    if not verdict.accepted:
        return verdict
    conn = _quoted_connection(server, ptb)
    return apply_ptb(server.pmtu_cache, conn, ptb, now)


@dataclass
class BurstOutcome:
    verdicts: dict[PtbReason, int]
    first_accepted: Optional[int]


def handle_ptb_burst(server: ServerState, template: IcmpPtb, seqs: np.ndarray,
                     now: int = 0) -> BurstOutcome:
    """Process PTBs that differ only in the quoted sequence number.

    Gives the same verdict tally and cache state as calling ``handle_ptb`` on
    each PTB in order: PTB handling never moves the TCP window, so all
    in-window members are valid, the first one applies and the rest find
    the MTU already lowered.
    """
    n = len(seqs)
    if server.pmtu_cache.block_ptb:
        return BurstOutcome({PtbReason.BLOCKED: n}, None)
    conn = _quoted_connection(server, template)
    if conn is None:
        return BurstOutcome({PtbReason.NO_MATCHING_CONNECTION: n}, None)
    mask = window_mask(seqs, conn.snd_una, conn.snd_nxt)
    hits = int(mask.sum())
    tally: dict[PtbReason, int] = {}
    if n - hits:
        tally[PtbReason.SEQ_OUT_OF_WINDOW] = n - hits
    if not hits:
        return BurstOutcome(tally, None)
    first = int(np.argmax(mask))
    verdict = apply_ptb(server.pmtu_cache, conn, template, now)
    tally[verdict.reason] = tally.get(verdict.reason, 0) + 1
    if hits > 1:
        tally[PtbReason.MTU_NOT_LOWER] = tally.get(PtbReason.MTU_NOT_LOWER, 0) + hits - 1
    return BurstOutcome(tally, first)

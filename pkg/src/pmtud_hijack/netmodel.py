"""Addresses, packets, sequence arithmetic and per-OS validation profiles.

Everything here is a value type. Sequence numbers are plain ``int`` values in
``[0, 2**32)`` and all comparisons are modular.
"""

from __future__ import annotations

import dataclasses
import enum
import ipaddress
from dataclasses import dataclass
from typing import Any, Iterator, Union

import numpy as np

SEQ_SPACE = 1 << 32
SEQ_MASK = SEQ_SPACE - 1
HALF_SPACE = 1 << 31

IP_HEADER_LEN = 20
TCP_HEADER_LEN = 20
TCPIP_HEADER_LEN = IP_HEADER_LEN + TCP_HEADER_LEN
ICMP_HEADER_LEN = 8
PTB_EMBEDDED_LEN = 28
PTB_TOTAL_LEN = IP_HEADER_LEN + ICMP_HEADER_LEN + PTB_EMBEDDED_LEN
MIN_IPV4_MTU = 68

# TCP flag bits, same values as on the wire.
FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10

_FLAG_NAMES = ((SYN, "S"), (ACK, "A"), (RST, "R"), (FIN, "F"), (PSH, "P"))


def flags_str(flags: int) -> str:
    return "".join(name for bit, name in _FLAG_NAMES if flags & bit) or "."


class InvalidMtu(ValueError):
    pass


class IpAddr(int):
    """A 32-bit IPv4 address. Hashes and compares like an int."""

    def __new__(cls, value: Union[int, str, "IpAddr"]) -> "IpAddr":
        if isinstance(value, str):
            value = int(ipaddress.IPv4Address(value))
        if not 0 <= value <= 0xFFFFFFFF:
            raise ValueError(f"not a 32-bit address: {value}")
        return super().__new__(cls, value)

    def __str__(self) -> str:
        return str(ipaddress.IPv4Address(int(self)))

    def __repr__(self) -> str:
        return f"IpAddr('{self}')"


# ---------------------------------------------------------------- seq math


def seq_add(a: int, delta: int) -> int:
    return (a + delta) & SEQ_MASK


def seq_diff(a: int, b: int) -> int:
    """Forward distance from ``b`` to ``a`` on the sequence circle."""
    return (a - b) & SEQ_MASK


def seq_leq(a: int, b: int) -> bool:
    """True iff ``a`` precedes or equals ``b`` on the sequence circle."""
    return ((b - a) & SEQ_MASK) < HALF_SPACE


def seq_in_window(seq: int, lo: int, hi: int) -> bool:
    """Inclusive modular window test ``lo <= seq <= hi``.

    Raises ValueError when the window is not shorter than half the space,
    because the test is then ambiguous.
    """
    width = (hi - lo) & SEQ_MASK
    if width >= HALF_SPACE:
        raise ValueError(f"window [{lo}, {hi}] spans half the sequence space or more")
    return ((seq - lo) & SEQ_MASK) <= width


def window_mask(seqs: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Vectorised ``seq_in_window`` over an array of sequence numbers."""
    width = (hi - lo) & SEQ_MASK
    if width >= HALF_SPACE:
        raise ValueError(f"window [{lo}, {hi}] spans half the sequence space or more")
    arr = np.asarray(seqs, dtype=np.int64)
    return ((arr - lo) & SEQ_MASK) <= width


# ---------------------------------------------------------------- profiles


class OsName(str, enum.Enum):
    LINUX = "Linux"
    WINDOWS = "Windows"
    OPENBSD = "OpenBSD"
    MACOS = "MacOS"


@dataclass(frozen=True)
class OsProfile:
    name: OsName
    ack_window: int
    rst_requires_exact_seq: bool = True


PROFILES: dict[OsName, OsProfile] = {
    OsName.LINUX: OsProfile(OsName.LINUX, 1 << 10),
    OsName.WINDOWS: OsProfile(OsName.WINDOWS, 1 << 14),
    OsName.OPENBSD: OsProfile(OsName.OPENBSD, 1 << 13),
    OsName.MACOS: OsProfile(OsName.MACOS, 1 << 15),
}


def profile(name: str | OsName) -> OsProfile:
    if isinstance(name, str) and not isinstance(name, OsName):
        lowered = name.lower()
        for os_name in OsName:
            if os_name.value.lower() == lowered:
                name = os_name
                break
        else:
            raise ValueError(f"unknown OS profile {name!r}")
    return PROFILES[name]


# ---------------------------------------------------------------- packets


@dataclass(frozen=True, slots=True)
class TcpSegment:
    src_ip: IpAddr
    src_port: int
    dst_ip: IpAddr
    dst_port: int
    seq: int
    ack: int
    flags: int
    payload_len: int = 0
    payload_tag: Any = None

    def __post_init__(self) -> None:
        if self.payload_len < 0:
            raise ValueError("negative payload length")
        if self.flags & SYN and self.flags & RST:
            raise ValueError("SYN and RST both set")

    def summary(self) -> str:
        return (
            f"TCP {IpAddr(self.src_ip)}:{self.src_port}>{IpAddr(self.dst_ip)}:{self.dst_port} "
            f"[{flags_str(self.flags)}] seq={self.seq} ack={self.ack} len={self.payload_len}"
        )


@dataclass(frozen=True, slots=True)
class EmbeddedHeader:
    """The 28 quoted octets of the packet that triggered an ICMP error."""

    src_ip: IpAddr
    dst_ip: IpAddr
    src_port: int
    dst_port: int
    seq: int


@dataclass(frozen=True, slots=True)
class IcmpPtb:
    """ICMPv4 type 3 code 4, fragmentation needed and DF set."""

    src_ip: IpAddr
    dst_ip: IpAddr
    next_hop_mtu: int
    embedded: EmbeddedHeader
    embedded_len: int = PTB_EMBEDDED_LEN

    TYPE = 3
    CODE = 4

    def __post_init__(self) -> None:
        if self.next_hop_mtu < MIN_IPV4_MTU:
            raise InvalidMtu(f"next-hop MTU {self.next_hop_mtu} below {MIN_IPV4_MTU}")

    def summary(self) -> str:
        e = self.embedded
        return (
            f"PTB {IpAddr(self.src_ip)}>{IpAddr(self.dst_ip)} mtu={self.next_hop_mtu} "
            f"quote={IpAddr(e.src_ip)}:{e.src_port}>{IpAddr(e.dst_ip)}:{e.dst_port} seq={e.seq}"
        )


@dataclass(frozen=True, slots=True)
class Packet:
    kind: Union[TcpSegment, IcmpPtb]
    total_len: int
    df: bool = True

    @classmethod
    def tcp(cls, seg: TcpSegment, df: bool = True) -> "Packet":
        return cls(seg, TCPIP_HEADER_LEN + seg.payload_len, df)

    @classmethod
    def icmp(cls, ptb: IcmpPtb) -> "Packet":
        return cls(ptb, PTB_TOTAL_LEN, False)

    @property
    def src_ip(self) -> IpAddr:
        return self.kind.src_ip

    @property
    def dst_ip(self) -> IpAddr:
        return self.kind.dst_ip

    @property
    def is_tcp(self) -> bool:
        return type(self.kind) is TcpSegment

    def __len__(self) -> int:
        return 1

    def summary(self) -> str:
        return f"{self.kind.summary()} total={self.total_len}"


def build_ptb(trigger: Packet, next_hop_mtu: int, emitter: IpAddr) -> Packet:
    """Build the PTB a router at ``emitter`` returns for an oversized ``trigger``."""
    seg = trigger.kind
    if not isinstance(seg, TcpSegment):
        raise TypeError("PTB trigger must carry a TCP segment")
    if next_hop_mtu < MIN_IPV4_MTU:
        raise InvalidMtu(f"next-hop MTU {next_hop_mtu} below {MIN_IPV4_MTU}")
    quote = EmbeddedHeader(seg.src_ip, seg.dst_ip, seg.src_port, seg.dst_port, seg.seq)
    return Packet.icmp(IcmpPtb(IpAddr(emitter), seg.src_ip, next_hop_mtu, quote))


# ---------------------------------------------------------------- lazy runs


class ModRange:
    """``count`` values ``start, start+step, ...`` taken modulo 2**32.

    Stands in for very long lists of sequence/ack numbers without
    materialising them.
    """

    __slots__ = ("start", "count", "step")

    def __init__(self, start: int, count: int, step: int = 1) -> None:
        if count < 0:
            raise ValueError("negative count")
        self.start = start & SEQ_MASK
        self.count = count
        self.step = step

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> int:
        if i < 0:
            i += self.count
        if not 0 <= i < self.count:
            raise IndexError(i)
        return (self.start + i * self.step) & SEQ_MASK

    def __iter__(self) -> Iterator[int]:
        for i in range(self.count):
            yield (self.start + i * self.step) & SEQ_MASK

    def array(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        hi = self.count if hi is None else min(hi, self.count)
        idx = np.arange(lo, hi, dtype=np.int64)
        return (self.start + idx * self.step) & SEQ_MASK

    def __repr__(self) -> str:
        return f"ModRange(start={self.start}, count={self.count}, step={self.step})"


BURST_FIELDS = ("seq", "ack", "dst_port", "embedded_seq")


@dataclass(frozen=True)
class PacketBurst:
    """A run of packets identical except for one field.

    Spoofed probe batches are carried through the simulator as bursts so
    that a million PTBs cost a handful of events. ``packet(i)`` gives the
    exact packet a per-packet simulation would have carried; receivers that
    vectorise over ``values`` must agree with that per-packet view.
    ``marker`` makes each TCP payload tag the string ``TCP_<value>``.
    """

    template: Packet
    field: str
    values: np.ndarray
    marker: bool = False

    def __post_init__(self) -> None:
        if self.field not in BURST_FIELDS:
            raise ValueError(f"cannot vary field {self.field!r}")
        if self.field == "embedded_seq" and self.template.is_tcp:
            raise ValueError("embedded_seq only varies on PTB bursts")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def total_len(self) -> int:
        return self.template.total_len

    @property
    def df(self) -> bool:
        return self.template.df

    @property
    def src_ip(self) -> IpAddr:
        return self.template.src_ip

    @property
    def dst_ip(self) -> IpAddr:
        return self.template.dst_ip

    @property
    def is_tcp(self) -> bool:
        return self.template.is_tcp

    @property
    def octets(self) -> int:
        return len(self) * self.total_len

    def packet(self, i: int) -> Packet:
        value = int(self.values[i])
        kind = self.template.kind
        if self.field == "embedded_seq":
            kind = dataclasses.replace(kind, embedded=dataclasses.replace(kind.embedded, seq=value))
        else:
            changes: dict[str, Any] = {self.field: value}
            if self.marker:
                changes["payload_tag"] = f"TCP_{value}"
            kind = dataclasses.replace(kind, **changes)
        return dataclasses.replace(self.template, kind=kind)

    def __iter__(self) -> Iterator[Packet]:
        for i in range(len(self)):
            yield self.packet(i)

    def select(self, mask: np.ndarray) -> "PacketBurst":
        return dataclasses.replace(self, values=self.values[mask])

    def slice(self, lo: int, hi: int | None = None) -> "PacketBurst":
        return dataclasses.replace(self, values=self.values[lo:hi])

    def with_kind(self, kind: TcpSegment | IcmpPtb) -> "PacketBurst":
        return dataclasses.replace(self, template=dataclasses.replace(self.template, kind=kind))

    def summary(self) -> str:
        vals = self.values
        span = f"{int(vals[0])}..{int(vals[-1])}" if len(vals) else "-"
        return f"BURST n={len(self)} vary={self.field}[{span}] {self.template.summary()}"


Frame = Union[Packet, PacketBurst]

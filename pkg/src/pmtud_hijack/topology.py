"""The default six-node topology.

::

    server --WAN-- router --bottleneck-- gateway --LAN-- victim
                     |                       `----LAN-- puppet
                  attacker

The attacker hangs off the router so spoofed packets reach both the server
and the gateway's public address without passing the bottleneck twice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .gateway import AllocatorConfig, Gateway
from .netmodel import PROFILES, IpAddr, OsName, OsProfile
from .pmtud import PmtuCache
from .simcore import Engine, Link, Node, Router, ms
from .tcpstack import Host

SERVER_IP = IpAddr("5.5.5.5")
PUBLIC_IP = IpAddr("1.2.3.4")
VICTIM_IP = IpAddr("192.168.1.5")
PUPPET_IP = IpAddr("192.168.1.4")
ROUTER_IP = IpAddr("10.0.0.1")
ATTACKER_IP = IpAddr("7.7.7.7")


@dataclass(frozen=True)
class TopologyConfig:
    wan_latency: int = ms(20)
    lan_latency: int = ms(0.5)
    bottleneck_latency: int = ms(0.5)
    bottleneck_mtu: int = 1500
    loss_rate: float = 0.0


class AttackerNode(Node):
    """Off-path host allowed to put arbitrary source addresses on the wire."""

    can_spoof = True

    def receive(self, link: Link, frames: list) -> None:
        for frame in frames:
            self.consume(len(frame))


@dataclass
class Topology:
    engine: Engine
    server: Host
    router: Router
    gateway: Gateway
    victim: Host
    puppet: Host
    attacker: AttackerNode
    links: dict[str, Link]


def build_topology(engine: Engine, config: TopologyConfig = TopologyConfig(),
                   allocator: AllocatorConfig = AllocatorConfig(),
                   cache: Optional[PmtuCache] = None,
                   victim_profile: OsProfile = PROFILES[OsName.LINUX],
                   victim_rcv_wnd: int = 65535) -> Topology:
    server = Host(engine, "server", SERVER_IP, pmtu_cache=cache or PmtuCache())
    router = Router(engine, "router", ROUTER_IP)
    gateway = Gateway(engine, "gateway", PUBLIC_IP, allocator)
    victim = Host(engine, "victim", VICTIM_IP, profile=victim_profile, rcv_wnd=victim_rcv_wnd)
    puppet = Host(engine, "puppet", PUPPET_IP, capture=True)
    attacker = AttackerNode(engine, "attacker", ATTACKER_IP)

    wan = engine.connect(server, router, config.wan_latency, loss_rate=config.loss_rate)
    neck = engine.connect(router, gateway, config.bottleneck_latency, mtu=config.bottleneck_mtu)
    lan_v = engine.connect(gateway, victim, config.lan_latency)
    lan_p = engine.connect(gateway, puppet, config.lan_latency)
    uplink = engine.connect(attacker, router, config.wan_latency)

    server.default_route = wan
    router.default_route = wan
    router.add_route(PUBLIC_IP, neck)
    router.add_route(ATTACKER_IP, uplink)
    gateway.attach_wan(neck)
    gateway.add_route(VICTIM_IP, lan_v)
    gateway.add_route(PUPPET_IP, lan_p)
    victim.default_route = lan_v
    puppet.default_route = lan_p
    attacker.default_route = uplink
    links = {"wan": wan, "bottleneck": neck, "lan_victim": lan_v, "lan_puppet": lan_p,
             "attacker": uplink}
    return Topology(engine, server, router, gateway, victim, puppet, attacker, links)

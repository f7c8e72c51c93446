"""Scenario configuration, trial orchestration, sweeps and reports.

A scenario is one JSON file::

    {"version": 1, "name": "...", "seed": 1, "deadline_s": 900,
     "topology": {...}, "gateway": {...}, "server": {...},
     "victim": {...}, "attack": {...}}

Every section is optional and falls back to the defaults below. Unknown keys
are rejected. Times in the file carry their unit in the key name (``_ms`` or
``_s``). The config hash is the SHA-256 of the canonical JSON of everything
except the seed, so a sweep over seeds shares one hash.
"""

from __future__ import annotations

import csv
import gc
import hashlib
import io
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, TextIO

from .attacker import (
    Attack,
    AttackParams,
    FailReason,
    InferenceFailed,
    InjectionKind,
    Outcome,
    PhaseLedger,
    build_injection,
    calibrate,
    detect_victim_sequential,
    execute_injection,
    infer_baseline_sequential,
    infer_port_preserved,
    infer_sequence,
)
from .gateway import AllocatorConfig, Strategy
from .netmodel import profile, seq_in_window
from .pmtud import CacheMode, PmtuCache
from .simcore import Engine, ms, seconds
from .tcpstack import AppKind, AppPayloadModel, ConnState, TcpConnection
from .topology import TopologyConfig, build_topology

CONFIG_VERSION = 1
SCENARIO_DIR = Path(__file__).with_name("scenarios")

CSV_COLUMNS = (
    "seed", "phase1_s", "phase1_pkts", "phase1_bits_per_s",
    "phase2_s", "phase2_pkts", "phase2_bits_per_s",
    "phase3_s", "phase3_pkts",
    "port_identified", "seq_inferred", "outcome", "true_port", "true_snd_una",
    "config_hash",
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TopologySection:
    wan_latency_ms: float = 20.0
    lan_latency_ms: float = 0.5
    bottleneck_latency_ms: float = 0.5
    bottleneck_mtu: int = 1500
    loss_rate: float = 0.0


@dataclass(frozen=True)
class GatewaySection:
    strategy: str = "PerDestinationSequential"
    search_initial_window: int = 128
    search_min_window: int = 8
    per_round_delay_ms: float = 0.0
    syn_entry_timeout_s: float = 10.0
    port_range: tuple[int, int] = (1024, 65535)
    scan_widths: Optional[tuple[int, ...]] = None


@dataclass(frozen=True)
class ServerSection:
    port: int = 22
    cache_mode: str = "PerIp"
    floor: int = 552
    default_pmtu: int = 1500
    block_ptb: bool = False


@dataclass(frozen=True)
class VictimSection:
    present: bool = True
    os: str = "Linux"
    rcv_wnd: int = 65535
    app: str = "SshLike"
    content_tag: str = "SERVER"
    size: int = 0
    inflight_hold: int = 60000
    keepalive_interval_s: Optional[float] = None
    keepalive_octets: int = 1
    port_range: tuple[int, int] = (40001, 65535)
    connect_delay_ms: float = 500.0


@dataclass(frozen=True)
class AttackSection:
    stride: int = 4096
    ladder_start: int = 1400
    assumed_floor: int = 552
    probe_rate: int = 10_000
    settle_ms: float = 150.0
    slice_ms: float = 20.0
    sweep_rate: int = 10_000
    spray_radius: int = 4096
    injection_rate: int = 100_000
    injection: str = "auto"
    reservation: tuple[int, int] = (1024, 40000)
    payload_len: int = 512
    payload_tag: str = "ATTACKER"
    stop_after: str = "phase3"


SECTIONS = {
    "topology": TopologySection,
    "gateway": GatewaySection,
    "server": ServerSection,
    "victim": VictimSection,
    "attack": AttackSection,
}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    deadline_s: float = 900.0
    topology: TopologySection = field(default_factory=TopologySection)
    gateway: GatewaySection = field(default_factory=GatewaySection)
    server: ServerSection = field(default_factory=ServerSection)
    victim: VictimSection = field(default_factory=VictimSection)
    attack: AttackSection = field(default_factory=AttackSection)
    version: int = CONFIG_VERSION

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        kwargs: dict[str, Any] = {"version": version}
        for key, value in data.items():
            if key in SECTIONS:
                kwargs[key] = _section(SECTIONS[key], key, value)
            elif key in ("name", "seed", "deadline_s"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def with_updates(self, **sections: dict[str, Any]) -> "ScenarioConfig":
        """Copy with some section fields replaced, e.g. ``server={"block_ptb": True}``."""
        changes: dict[str, Any] = {}
        for name, updates in sections.items():
            if name in SECTIONS:
                changes[name] = replace(getattr(self, name), **updates)
            else:
                changes[name] = updates
        cfg = replace(self, **changes)
        cfg.validate()
        return cfg

    @property
    def config_hash(self) -> str:
        body = self.to_dict()
        body.pop("seed")
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def validate(self) -> None:
        try:
            self.allocator_config()
            self.cache()
            self.app_model()
            self.attack_params()
            profile(self.victim.os)
            CacheMode(self.server.cache_mode)
            TopologyConfig(**self.topology_kwargs())
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.attack.injection not in ("auto", "Rst", "Data"):
            raise ConfigError(f"injection must be auto, Rst or Data, not {self.attack.injection!r}")
        if self.attack.stop_after not in ("phase1", "phase2", "phase3"):
            raise ConfigError(f"bad stop_after {self.attack.stop_after!r}")
        lo, hi = self.victim.port_range
        if not 1024 <= lo <= hi <= 65535:
            raise ConfigError(f"bad victim port range {self.victim.port_range}")
        if self.topology.bottleneck_mtu < 68:
            raise ConfigError("bottleneck MTU below 68")
        if not 0.0 <= self.topology.loss_rate <= 1.0:
            raise ConfigError("loss rate outside [0, 1]")
        if self.deadline_s <= 0:
            raise ConfigError("deadline must be positive")

    # ------------------------------------------------------ builders

    def topology_kwargs(self) -> dict[str, Any]:
        t = self.topology
        return dict(wan_latency=ms(t.wan_latency_ms), lan_latency=ms(t.lan_latency_ms),
                    bottleneck_latency=ms(t.bottleneck_latency_ms),
                    bottleneck_mtu=t.bottleneck_mtu, loss_rate=t.loss_rate)

    def allocator_config(self) -> AllocatorConfig:
        g = self.gateway
        return AllocatorConfig(
            strategy=Strategy(g.strategy), search_initial_window=g.search_initial_window,
            search_min_window=g.search_min_window, per_round_delay=ms(g.per_round_delay_ms),
            syn_entry_timeout=seconds(g.syn_entry_timeout_s), port_range=tuple(g.port_range),
            scan_widths=None if g.scan_widths is None else tuple(g.scan_widths),
        )

    def cache(self) -> PmtuCache:
        s = self.server
        return PmtuCache(CacheMode(s.cache_mode), s.floor, s.default_pmtu, s.block_ptb)

    def app_model(self) -> AppPayloadModel:
        v = self.victim
        kind = AppKind(v.app)
        interval = None if v.keepalive_interval_s is None else seconds(v.keepalive_interval_s)
        initial = v.inflight_hold if kind is AppKind.SSH_LIKE else 0
        return AppPayloadModel(kind, v.content_tag, size=v.size, inflight_hold=v.inflight_hold,
                               initial_octets=initial, keepalive_interval=interval,
                               keepalive_octets=v.keepalive_octets)

    def attack_params(self) -> AttackParams:
        a = self.attack
        return AttackParams(
            stride=a.stride, ladder_start=a.ladder_start, probe_rate=a.probe_rate,
            settle=ms(a.settle_ms), slice_interval=ms(a.slice_ms), sweep_rate=a.sweep_rate,
            spray_radius=a.spray_radius, injection_rate=a.injection_rate,
            reservation=tuple(a.reservation), payload_len=a.payload_len,
            payload_tag=a.payload_tag,
        )

    def injection_kind(self) -> InjectionKind:
        if self.attack.injection != "auto":
            return InjectionKind(self.attack.injection)
        return InjectionKind.RST if AppKind(self.victim.app) is AppKind.SSH_LIKE else InjectionKind.DATA


def _section(cls: type, name: str, value: Any) -> Any:
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return cls(**clean)


def load_scenario(name_or_path: str | Path) -> ScenarioConfig:
    """Load a scenario file, or a bundled scenario by bare name."""
    path = Path(name_or_path)
    if not path.exists():
        bundled = SCENARIO_DIR / f"{name_or_path}.json"
        if bundled.exists():
            path = bundled
    return ScenarioConfig.load(path)


# ---------------------------------------------------------------- trial


@dataclass
class TrialReport:
    seed: int
    config_hash: str
    phases: dict[str, PhaseLedger] = field(default_factory=dict)
    port_identified: bool = False
    seq_inferred: bool = False
    outcome: Outcome = Outcome.NO_EFFECT
    true_port: Optional[int] = None
    true_snd_una: Optional[int] = None
    inferred_port: Optional[int] = None
    in_window_seq: Optional[int] = None
    snd_una_est: Optional[int] = None
    positives_used: Optional[int] = None
    probes_sent: Optional[int] = None
    failure: Optional[str] = None
    ledger_reconciles: bool = True

    @property
    def success(self) -> bool:
        return self.outcome is not Outcome.NO_EFFECT

    @property
    def total_s(self) -> float:
        return sum(p.elapsed_s for p in self.phases.values())

    def phase(self, name: str) -> Optional[PhaseLedger]:
        return self.phases.get(name)

    def row(self) -> dict[str, str]:
        def num(name: str, attr: str) -> str:
            ph = self.phases.get(name)
            if ph is None:
                return ""
            value = getattr(ph, attr)
            return f"{value:.6f}" if isinstance(value, float) else str(value)

        return {
            "seed": str(self.seed),
            "phase1_s": num("phase1", "elapsed_s"),
            "phase1_pkts": num("phase1", "packets"),
            "phase1_bits_per_s": num("phase1", "bits_per_s"),
            "phase2_s": num("phase2", "elapsed_s"),
            "phase2_pkts": num("phase2", "packets"),
            "phase2_bits_per_s": num("phase2", "bits_per_s"),
            "phase3_s": num("phase3", "elapsed_s"),
            "phase3_pkts": num("phase3", "packets"),
            "port_identified": str(self.port_identified).lower(),
            "seq_inferred": str(self.seq_inferred).lower(),
            "outcome": self.outcome.value,
            "true_port": "" if self.true_port is None else str(self.true_port),
            "true_snd_una": "" if self.true_snd_una is None else str(self.true_snd_una),
            "config_hash": self.config_hash,
        }


class Trial:
    """One run of a scenario: topology, victim, puppet and the attack phases."""

    def __init__(self, cfg: ScenarioConfig, seed: Optional[int] = None,
                 log: Optional[TextIO] = None) -> None:
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.engine = Engine(self.seed, log)
        self.topo = build_topology(
            self.engine, TopologyConfig(**cfg.topology_kwargs()), cfg.allocator_config(),
            cfg.cache(), profile(cfg.victim.os), cfg.victim.rcv_wnd,
        )
        self.topo.server.stack.listen(cfg.server.port)
        self.attack = Attack(self.topo, cfg.attack_params(), cfg.server.port)
        self.rng = self.engine.rng.child("scenario")
        self.victim_conn: Optional[TcpConnection] = None
        self.report = TrialReport(self.seed, cfg.config_hash)

    # ------------------------------------------------------ ground truth

    def true_port(self) -> Optional[int]:
        conn = self.victim_conn
        if conn is None:
            return None
        return self.topo.gateway.external_port_of(
            conn.local_ip, conn.local_port, (conn.remote_ip, conn.remote_port))

    def server_side(self) -> Optional[TcpConnection]:
        port = self.true_port()
        if port is None:
            return None
        key = (self.cfg.server.port, self.topo.gateway.public_ip, port)
        return self.topo.server.stack.connections.get(key)

    # ------------------------------------------------------ setup

    def _connect_victim(self) -> None:
        v = self.cfg.victim
        if not v.present:
            return
        stack = self.topo.victim.stack
        lo, hi = v.port_range
        port = self.rng.randint(lo, hi)
        self.victim_conn = stack.connect(self.topo.server.ip, self.cfg.server.port, port,
                                         app=self.cfg.app_model())
        self.attack._await(lambda: self.victim_conn.state is not ConnState.SYN_SENT, seconds(10))

    def setup(self) -> None:
        preserve = self.cfg.allocator_config().strategy is Strategy.PORT_PRESERVATION
        if preserve:
            self._connect_victim()
            self.attack.open_observer(local_port=self.cfg.attack.reservation[0])
        else:
            self.attack.open_observer()
            delay = self.rng.randint(1, max(1, ms(self.cfg.victim.connect_delay_ms)))
            self.engine.run_for(delay)
            self._connect_victim()
        # let the victim's application settle into steady state
        self.engine.run_for(ms(200))

    # ------------------------------------------------------ phases

    def phase1(self) -> int:
        attack = self.attack
        if self.cfg.allocator_config().strategy is Strategy.PORT_PRESERVATION:
            flagged = infer_port_preserved(attack, calibrate(attack))
            if not flagged:
                raise InferenceFailed(FailReason.NO_CANDIDATE, "no occupied port found")
            return flagged[0]
        p = infer_baseline_sequential(attack)
        if not detect_victim_sequential(attack, p):
            raise InferenceFailed(FailReason.NO_CANDIDATE, "no victim behind p+1")
        return p + 1

    def judge(self) -> Outcome:
        server_conn = self.server_side()
        if server_conn is not None:
            self.topo.server.stack.release_hold(server_conn)
        self.engine.run_for(ms(100))
        conn = self.victim_conn
        if conn is None:
            return Outcome.NO_EFFECT
        if conn.state is ConnState.RESET:
            return Outcome.CONNECTION_RESET
        tag = self.cfg.attack.payload_tag
        served = self.cfg.victim.content_tag
        kind = AppKind(self.cfg.victim.app)
        tags = conn.delivered_tags()
        if tag not in tags:
            return Outcome.NO_EFFECT
        if kind is AppKind.HTTP_LIKE:
            first = next(t for t in tags if t in (tag, served))
            return Outcome.CONTENT_POISONED if first == tag else Outcome.NO_EFFECT
        if kind is AppKind.FTP_LIKE:
            size = self.cfg.victim.size
            offsets_ok = any(t == tag and 0 <= off < size for off, _, t in conn.delivered)
            clean = [(off, n, served) for off, n, _ in conn.delivered]
            if offsets_ok and _digest(conn.delivered) != _digest(clean):
                return Outcome.CONTENT_POISONED
            return Outcome.NO_EFFECT
        return Outcome.CONTENT_POISONED

    def run(self) -> TrialReport:
        cfg, attack, rep = self.cfg, self.attack, self.report
        deadline = seconds(cfg.deadline_s)
        self.setup()
        rep.true_port = self.true_port()
        ledger = attack.begin_phase("phase1")
        try:
            try:
                port = self.phase1()
            finally:
                rep.phases["phase1"] = attack.end_phase(ledger)
            rep.inferred_port = port
            rep.true_port = self.true_port()
            rep.port_identified = rep.true_port is not None and port == rep.true_port
            if cfg.attack.stop_after == "phase1" or self.engine.now > deadline:
                return self._finish()

            ledger = attack.begin_phase("phase2")
            try:
                inf = infer_sequence(attack, port, cfg.attack.assumed_floor)
            finally:
                rep.phases["phase2"] = attack.end_phase(ledger)
                truth = self.server_side()
                rep.true_snd_una = None if truth is None else truth.snd_una
            rep.in_window_seq = inf.in_window_seq
            rep.snd_una_est = inf.snd_una_est
            rep.positives_used = inf.positives_used
            rep.probes_sent = inf.probes_sent
            rep.seq_inferred = (rep.port_identified and truth is not None
                                and seq_in_window(inf.in_window_seq, truth.snd_una, truth.snd_nxt))
            if cfg.attack.stop_after == "phase2" or self.engine.now > deadline:
                return self._finish()

            ledger = attack.begin_phase("phase3")
            plan = build_injection(cfg.injection_kind(), port, inf.snd_una_est,
                                   profile(cfg.victim.os).ack_window, cfg.attack.spray_radius,
                                   cfg.attack.payload_tag, cfg.attack.payload_len)
            rep.outcome = execute_injection(attack, plan, self.judge)
            rep.phases["phase3"] = attack.end_phase(ledger)
        except InferenceFailed as exc:
            rep.failure = exc.reason.value
        return self._finish()

    def _finish(self) -> TrialReport:
        if self.engine.now > seconds(self.cfg.deadline_s) and self.report.failure is None:
            self.report.failure = "DeadlineExceeded"
        self.report.ledger_reconciles = self.engine.ledger.reconciles()
        return self.report


def _digest(record: list[tuple[int, int, Any]]) -> str:
    return hashlib.sha256(repr(record).encode()).hexdigest()


@contextmanager
def _relaxed_gc():
    # trials allocate hundreds of thousands of long-lived objects; the default
    # gen0 threshold makes the collector rescan them constantly
    old = gc.get_threshold()
    gc.set_threshold(200_000, old[1], old[2])
    try:
        yield
    finally:
        gc.set_threshold(*old)


def run_scenario(cfg: ScenarioConfig, seed: Optional[int] = None,
                 log: Optional[TextIO] = None) -> TrialReport:
    with _relaxed_gc():
        return Trial(cfg, seed, log).run()


# ---------------------------------------------------------------- sweeps


def _run_one(args: tuple[ScenarioConfig, int]) -> TrialReport:
    cfg, seed = args
    return run_scenario(cfg, seed)


def sweep(cfg: ScenarioConfig, n_trials: int, seed_base: int = 0,
          workers: int = 1) -> list[TrialReport]:
    if n_trials < 1:
        raise ValueError("need at least one trial")
    jobs = [(cfg, seed_base + i) for i in range(n_trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(job) for job in jobs]
    return sorted(reports, key=lambda r: r.seed)


def to_csv(reports: list[TrialReport]) -> str:
    return rows_to_csv([r.row() for r in reports])


def rows_to_csv(rows: list[dict[str, str]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def read_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def _stats(values: list[float]) -> dict[str, float]:
    if not values:
        return {}
    ordered = sorted(values)
    if len(ordered) > 1:
        deciles = statistics.quantiles(ordered, n=10, method="inclusive")
        p10, p90 = deciles[0], deciles[-1]
    else:
        p10 = p90 = ordered[0]
    return {"mean": statistics.fmean(ordered), "median": statistics.median(ordered),
            "p10": p10, "p90": p90}


def summarize(rows: list[dict[str, str]]) -> dict[str, Any]:
    """Aggregate CSV rows that all come from one config."""
    if not rows:
        raise ValueError("no rows to summarize")
    hashes = {r["config_hash"] for r in rows}
    if len(hashes) != 1:
        raise ValueError(f"rows mix {len(hashes)} config hashes: {sorted(hashes)}")
    n = len(rows)
    successes = sum(r["outcome"] != Outcome.NO_EFFECT.value for r in rows)
    summary: dict[str, Any] = {
        "config_hash": hashes.pop(),
        "trials": n,
        "success_rate": successes / n,
        "port_identified_rate": sum(r["port_identified"] == "true" for r in rows) / n,
        "seq_inferred_rate": sum(r["seq_inferred"] == "true" for r in rows) / n,
        "outcomes": {o.value: sum(r["outcome"] == o.value for r in rows) for o in Outcome},
    }
    for col in ("phase1_s", "phase1_bits_per_s", "phase2_s", "phase2_bits_per_s",
                "phase3_s", "phase1_pkts", "phase2_pkts", "phase3_pkts"):
        values = [float(r[col]) for r in rows if r[col] != ""]
        if values:
            summary[col] = _stats(values)
    return summary


def report(rows: list[dict[str, str]]) -> tuple[str, dict[str, Any]]:
    """CSV text and JSON-ready summary; refuses rows from different configs."""
    summary = summarize(rows)
    return rows_to_csv(rows), summary


def aggregate(reports: list[TrialReport]) -> dict[str, Any]:
    return summarize([r.row() for r in reports])

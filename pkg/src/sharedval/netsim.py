"""Deterministic discrete-event network for handshake scenarios.

Links are loss-free and in-order with a fixed one-way latency.  The clock is
an integer number of milliseconds; ties are broken by insertion order, so a
given :class:`SimConfig` always yields the same event log.
"""
import heapq
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from .cache import TokenCache
from .groups import Certificate, GroupId, group_id_for_hosts, group_of_certificate
from .handshake import (
    CLIENT_TO_SERVER,
    SERVER_TO_CLIENT,
    ClientPhase,
    ClientState,
    EncryptionLevel,
    HandshakeMessage,
    MessageKind,
    Policy,
    ResumptionTicket,
    ServerConfig,
    ServerState,
    TraceRecord,
    client_on_new_token,
    client_on_retry,
    client_on_server_flight,
    client_start,
    is_client_data,
    new_server_state,
    rtt_to_first_app_data,
    server_on_client_finished,
    server_on_client_hello,
    ticket_for,
)
from .tokens import DEFAULT_MAX_AGE_MS, GroupSecret, ReplayStore

DEFAULT_CLIENT_IP = "192.0.2.10"
DEFAULT_LATENCY_MS = 45


class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class ServerSpec:
    host: str
    certificate: Certificate
    policy: Policy = Policy.STRICT
    group_bit: int = 1
    misconfigured: bool = False
    accept_psk: bool = True
    latency_ms: Optional[int] = None

    @property
    def group_id(self) -> GroupId:
        if self.group_bit:
            return group_of_certificate(self.certificate)
        return group_id_for_hosts([self.host])


@dataclass(frozen=True)
class ConnectionStep:
    host: str
    resume: bool = False
    early_data: Optional[bytes] = None
    start_ms: Optional[int] = None


@dataclass
class SimConfig:
    servers: List[ServerSpec]
    script: List[ConnectionStep] = field(default_factory=list)
    one_way_latency_ms: int = DEFAULT_LATENCY_MS
    seed: int = 0
    client_ip: str = DEFAULT_CLIENT_IP
    token_lifetime_ms: int = DEFAULT_MAX_AGE_MS
    secrets: Dict[GroupId, GroupSecret] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.one_way_latency_ms < 0:
            raise ScriptError("latency must be non-negative")
        for spec in self.servers:
            if spec.latency_ms is not None and spec.latency_ms < 0:
                raise ScriptError("latency for %s must be non-negative" % spec.host)

    def server(self, host: str) -> ServerSpec:
        for spec in self.servers:
            if spec.host == host:
                return spec
        raise ScriptError("unknown host %r" % host)

    def latency(self, host: str) -> int:
        spec = self.server(host)
        return self.one_way_latency_ms if spec.latency_ms is None else spec.latency_ms

    def secret(self, group: GroupId) -> GroupSecret:
        if group not in self.secrets:
            self.secrets[group] = GroupSecret.derive(self.seed, group)
        return self.secrets[group]

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        """Build a config from the scenario JSON layout (see README)."""
        try:
            servers = [
                ServerSpec(
                    host=s["host"].lower(),
                    certificate=Certificate(s["cert"]["id"], frozenset(s["cert"]["sans"])),
                    policy=Policy(s.get("policy", "strict")),
                    group_bit=int(s.get("validation_group", 1)),
                    misconfigured=bool(s.get("misconfigured", False)),
                    accept_psk=bool(s.get("accept_psk", True)),
                    latency_ms=s.get("latency_ms"),
                )
                for s in data["servers"]
            ]
            script = []
            for step in data.get("connections", []):
                early = step.get("early_data")
                script.append(
                    ConnectionStep(
                        host=step["host"].lower(),
                        resume=bool(step.get("resume", False)),
                        early_data=early.encode() if early is not None else None,
                        start_ms=step.get("start_ms"),
                    )
                )
            return cls(
                servers=servers,
                script=script,
                one_way_latency_ms=int(data.get("latency_ms", DEFAULT_LATENCY_MS)),
                seed=int(data.get("seed", 0)),
                client_ip=data.get("client_ip", DEFAULT_CLIENT_IP),
                token_lifetime_ms=int(data.get("token_lifetime_ms", DEFAULT_MAX_AGE_MS)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScriptError("malformed scenario: %s" % exc) from exc


@dataclass(frozen=True)
class Event:
    time_ms: int
    actor: str
    kind: str
    summary: str
    connection: int

    def as_dict(self) -> dict:
        return {
            "time_ms": self.time_ms,
            "actor": self.actor,
            "event": self.kind,
            "summary": self.summary,
            "connection": self.connection,
        }


def events_to_jsonl(events: Sequence[Event]) -> str:
    return "".join(json.dumps(e.as_dict()) + "\n" for e in events)


class EventLoop:
    """Priority queue of callbacks keyed by (time, sequence)."""

    def __init__(self) -> None:
        self.now = 0
        self.events: List[Event] = []
        self._queue: list = []
        self._seq = 0

    def schedule(self, at: int, fn: Callable, *args) -> None:
        heapq.heappush(self._queue, (at, self._seq, fn, args))
        self._seq += 1

    def log(self, actor: str, kind: str, summary: str, connection: int = -1) -> None:
        self.events.append(Event(self.now, actor, kind, summary, connection))

    def send(
        self,
        src: str,
        dst: str,
        msgs: Sequence[HandshakeMessage],
        latency: int,
        on_deliver: Callable[[List[HandshakeMessage]], None],
        connection: int = -1,
    ) -> None:
        if not msgs:
            return
        for m in msgs:
            self.log(src, "send", "%s -> %s" % (m.summary(), dst), connection)

        def deliver(flight: List[HandshakeMessage]) -> None:
            for m in flight:
                self.log(dst, "deliver", "%s <- %s" % (m.summary(), src), connection)
            on_deliver(flight)

        self.schedule(self.now + latency, deliver, list(msgs))

    def run(self) -> None:
        while self._queue:
            at, _, fn, args = heapq.heappop(self._queue)
            self.now = at
            fn(*args)


@dataclass
class ConnectionResult:
    index: int
    host: str
    start_ms: int
    phase: ClientPhase
    failure: Optional[str]
    rtts: Optional[int]
    first_data_ms: Optional[int]
    retries: int
    wasted_tokens: int
    token_offered: bool
    early_accepted: bool
    expensive_ops: int
    server_phase: str
    token_results: List[str]
    trace: List[TraceRecord] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "host": self.host,
            "start_ms": self.start_ms,
            "phase": self.phase.value,
            "failure": self.failure,
            "rtts": self.rtts,
            "first_data_ms": self.first_data_ms,
            "retries": self.retries,
            "wasted_tokens": self.wasted_tokens,
            "token_offered": self.token_offered,
            "early_accepted": self.early_accepted,
            "expensive_ops": self.expensive_ops,
            "server_phase": self.server_phase,
            "token_results": self.token_results,
        }


@dataclass
class SimResult:
    events: List[Event]
    connections: List[ConnectionResult]
    cache: TokenCache

    @property
    def counters(self) -> Dict[str, int]:
        return {
            "connections": len(self.connections),
            "established": sum(c.phase is ClientPhase.ESTABLISHED for c in self.connections),
            "retries": sum(c.retries for c in self.connections),
            "wasted_tokens": sum(c.wasted_tokens for c in self.connections),
            "expensive_ops": sum(c.expensive_ops for c in self.connections),
            "tokens_cached": len(self.cache),
        }

    def event_log(self) -> str:
        return events_to_jsonl(self.events)


class _Connection:
    """Drives one client/server pair through the event loop."""

    def __init__(self, sim: "Simulation", index: int, step: ConnectionStep, ticket: Optional[ResumptionTicket]):
        self.sim = sim
        self.index = index
        self.step = step
        self.spec = sim.config.server(step.host)
        self.latency = sim.config.latency(step.host)
        self.ticket = ticket
        self.client: Optional[ClientState] = None
        self.server: ServerState = new_server_state(sim.server_configs[step.host], sim.config.client_ip)
        self.trace: List[TraceRecord] = []
        self.early_accepted = False
        self.start_ms = 0

    def _record(self, direction: str, msgs: Sequence[HandshakeMessage]) -> None:
        for m in msgs:
            self.trace.append(TraceRecord(self.sim.loop.now, direction, m.kind, m.level, m.token is not None))

    def _to_server(self, msgs: Sequence[HandshakeMessage]) -> None:
        self._record(CLIENT_TO_SERVER, msgs)
        self.sim.loop.send("client", self.step.host, msgs, self.latency, self._server_receive, self.index)

    def _to_client(self, msgs: Sequence[HandshakeMessage]) -> None:
        self._record(SERVER_TO_CLIENT, msgs)
        self.sim.loop.send(self.step.host, "client", msgs, self.latency, self._client_receive, self.index)

    def start(self) -> None:
        loop = self.sim.loop
        self.start_ms = loop.now
        loop.log("client", "connect", self.step.host, self.index)
        self.client, out = client_start(
            self.step.host,
            self.sim.cache,
            ticket=self.ticket,
            now=loop.now,
            early_data=self.step.early_data,
        )
        self._to_server(out)

    def _server_receive(self, flight: List[HandshakeMessage]) -> None:
        sim, now = self.sim, self.sim.loop.now
        head = flight[0]
        secret = sim.secret_for(self.step.host)
        if head.kind is MessageKind.CLIENT_HELLO:
            self.server, out = server_on_client_hello(
                self.server, head, secret, sim.replay_for(self.server.config.group_id), now, sim.rng
            )
            if self.server.psk_accepted and any(m.level is EncryptionLevel.EARLY for m in flight[1:]):
                self.early_accepted = True
        elif head.kind is MessageKind.FINISHED:
            self.server, out = server_on_client_finished(self.server, head, secret, now, sim.rng)
        else:
            out = []
        self._to_client(out)

    def _client_receive(self, flight: List[HandshakeMessage]) -> None:
        now = self.sim.loop.now
        head = flight[0]
        if head.kind is MessageKind.RETRY:
            self.client, out = client_on_retry(self.client, head)
            self._to_server(out)
        elif head.kind is MessageKind.SERVER_HELLO:
            self.client, out = client_on_server_flight(self.client, flight)
            self._to_server(out)
        elif head.kind is MessageKind.NEW_TOKEN:
            for m in flight:
                group = client_on_new_token(self.client, m, self.sim.cache, now)
                if group is not None:
                    self.sim.loop.log("client", "token", "stored for group %s" % group.hex()[:8], self.index)

    def result(self) -> ConnectionResult:
        client = self.client
        data = [r for r in self.trace if is_client_data(r)]
        rtts = rtt_to_first_app_data(self.trace) if data else None
        return ConnectionResult(
            index=self.index,
            host=self.step.host,
            start_ms=self.start_ms,
            phase=client.phase,
            failure=client.failure.value if client.failure else None,
            rtts=rtts,
            first_data_ms=data[0].time_ms - self.start_ms if data else None,
            retries=self.server.retries_sent,
            wasted_tokens=client.wasted_tokens,
            token_offered=bool(self.trace) and self.trace[0].token_present,
            early_accepted=self.early_accepted,
            expensive_ops=self.server.expensive_ops_count,
            server_phase=self.server.phase.value,
            token_results=[str(r) for r in self.server.token_results],
            trace=list(self.trace),
        )


class Simulation:
    def __init__(self, config: SimConfig):
        self.config = config
        self.loop = EventLoop()
        self.rng = random.Random(config.seed)
        self.cache = TokenCache(config.token_lifetime_ms)
        self.replay: Dict[GroupId, ReplayStore] = {}
        self.tickets: Dict[str, ResumptionTicket] = {}
        self.server_configs = {
            spec.host: ServerConfig(
                host=spec.host,
                certificate=spec.certificate,
                group_id=spec.group_id,
                policy=spec.policy,
                group_bit=spec.group_bit,
                accept_psk=spec.accept_psk,
            )
            for spec in config.servers
        }

    def secret_for(self, host: str) -> GroupSecret:
        """Token secret used by ``host``.

        A misconfigured member never received the group secret and runs
        with a private one, so it rejects tokens issued by its peers.
        """
        spec = self.config.server(host)
        if spec.misconfigured:
            return GroupSecret.derive(self.config.seed, b"private:" + host.encode())
        return self.config.secret(spec.group_id)

    def replay_for(self, group: GroupId) -> ReplayStore:
        # single-use is enforced per group, shared by all members
        return self.replay.setdefault(group, ReplayStore())

    def connect(self, index: int, step: ConnectionStep) -> ConnectionResult:
        if step.host not in self.server_configs:
            raise ScriptError("connection %d names unknown host %r" % (index, step.host))
        ticket = None
        if step.resume:
            ticket = self.tickets.get(step.host)
            if ticket is None:
                raise ScriptError("connection %d resumes %s without a prior connection" % (index, step.host))
        if step.start_ms is not None and step.start_ms > self.loop.now:
            self.loop.now = step.start_ms
        conn = _Connection(self, index, step, ticket)
        conn.start()
        self.loop.run()
        result = conn.result()
        self.loop.log("client", "close", "%s %s" % (step.host, result.phase.value), index)
        if conn.client.phase is ClientPhase.ESTABLISHED:
            self.tickets[step.host] = ticket_for(conn.client)
        return result

    def run(self) -> SimResult:
        results = [self.connect(i, step) for i, step in enumerate(self.config.script)]
        return SimResult(self.loop.events, results, self.cache)


def run_scenario(config: SimConfig) -> SimResult:
    """Run every scripted connection in order, each to completion."""
    return Simulation(config).run()


# -- adversary ------------------------------------------------------------


@dataclass(frozen=True)
class Probe:
    """One unauthenticated ClientHello sent with a chosen source address."""

    source_ip: str
    token: Optional[bytes] = None
    psk_offered: bool = False


@dataclass
class AttackReport:
    policy: str
    attempts: int
    retries_sent: int
    expensive_ops: int
    bytes_to_victim: int
    bytes_from_attacker: int
    reject_reasons: Dict[str, int]
    events: List[Event] = field(default_factory=list, repr=False)

    @property
    def amplification(self) -> float:
        if not self.bytes_from_attacker:
            return 0.0
        return self.bytes_to_victim / self.bytes_from_attacker

    def as_dict(self) -> dict:
        return {
            "policy": self.policy,
            "attempts": self.attempts,
            "retries_sent": self.retries_sent,
            "expensive_ops": self.expensive_ops,
            "bytes_to_victim": self.bytes_to_victim,
            "bytes_from_attacker": self.bytes_from_attacker,
            "amplification": self.amplification,
            "reject_reasons": dict(sorted(self.reject_reasons.items())),
        }


def send_probes(
    config: SimConfig,
    probes: Sequence[Probe],
    host: Optional[str] = None,
    sim: Optional[Simulation] = None,
) -> AttackReport:
    """Deliver ``probes`` to one server; responses go to each probe's source."""
    sim = sim or Simulation(config)
    spec = config.server(host) if host else config.servers[0]
    server_config = sim.server_configs[spec.host]
    latency = config.latency(spec.host)
    secret = sim.secret_for(spec.host)
    replay = sim.replay_for(server_config.group_id)
    loop = sim.loop
    tally = {"retries": 0, "ops": 0, "to_victim": 0, "from_attacker": 0}
    reasons: Counter = Counter()

    def respond(msgs: List[HandshakeMessage]) -> None:
        tally["to_victim"] += sum(m.size for m in msgs)

    def receive(probe: Probe, flight: List[HandshakeMessage]) -> None:
        state = new_server_state(server_config, probe.source_ip)
        state, out = server_on_client_hello(state, flight[0], secret, replay, loop.now, sim.rng)
        tally["ops"] += state.expensive_ops_count
        tally["retries"] += state.retries_sent
        for result in state.token_results:
            reasons[result.reason.value if result.reason else "Accept"] += 1
        loop.send(spec.host, probe.source_ip, out, latency, respond)

    start = loop.now
    for probe in probes:
        ch = HandshakeMessage(
            MessageKind.CLIENT_HELLO, EncryptionLevel.NONE, token=probe.token, psk_offered=probe.psk_offered
        )
        tally["from_attacker"] += ch.size
        loop.send("attacker", spec.host, [ch], latency, lambda fl, p=probe: receive(p, fl))
    loop.run()
    return AttackReport(
        policy=server_config.policy.value,
        attempts=len(probes),
        retries_sent=tally["retries"],
        expensive_ops=tally["ops"],
        bytes_to_victim=tally["to_victim"],
        bytes_from_attacker=tally["from_attacker"],
        reject_reasons=dict(reasons),
        events=[e for e in loop.events if e.time_ms >= start],
    )


def run_spoof_attack(
    config: SimConfig,
    victim_ip: str,
    attempts: int,
    replay_captured: bool = False,
    host: Optional[str] = None,
) -> AttackReport:
    """Flood one server with ClientHellos spoofing ``victim_ip``.

    With ``replay_captured`` the attacker first completes a legitimate
    connection from ``config.client_ip``, keeps the token it was given and
    attaches it to every spoofed ClientHello.
    """
    sim = Simulation(config)
    spec = config.server(host) if host else config.servers[0]
    token = None
    if replay_captured:
        sim.connect(0, ConnectionStep(spec.host))
        group = sim.server_configs[spec.host].group_id
        for g in [group] + sim.cache.groups_for_host(spec.host):
            token = sim.cache.take(g, sim.loop.now)
            if token is not None:
                break
        if token is None:
            raise ScriptError("no token captured from %s" % spec.host)
    probes = [Probe(victim_ip, token) for _ in range(attempts)]
    report = send_probes(config, probes, host=spec.host, sim=sim)
    report.events = list(sim.loop.events)
    return report

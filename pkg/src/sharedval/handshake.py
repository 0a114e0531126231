"""Client and server handshake state machines.

Each step function takes a state value and the received message(s) and
returns ``(new_state, messages_to_send)``.  States are frozen dataclasses;
the only mutable inputs are the client's :class:`TokenCache` and the
server's :class:`ReplayStore`.

Cryptography is simulated.  Certificates are identifiers with SAN lists and
Finished messages carry a SHA-256 digest over an encoding of the transcript.
"""
import enum
import hashlib
import ipaddress
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

from .cache import TokenCache, group_for_connection
from .groups import Certificate, GroupId, accepts
from .tokens import (
    DEFAULT_MAX_AGE_MS,
    GroupSecret,
    IPLike,
    ReplayStore,
    ValidationResult,
    issue_token,
    validate_token,
)


class EncryptionLevel(enum.Enum):
    NONE = "none"
    HANDSHAKE = "handshake"
    APPLICATION = "application"
    EARLY = "early"


# ordering for the monotonic-level rule; EARLY sits outside it
LEVEL_RANK = {
    EncryptionLevel.NONE: 0,
    EncryptionLevel.HANDSHAKE: 1,
    EncryptionLevel.APPLICATION: 2,
}


class MessageKind(enum.Enum):
    CLIENT_HELLO = "CH"
    RETRY = "RETRY"
    SERVER_HELLO = "SH"
    ENCRYPTED_EXTENSIONS = "EE"
    CERTIFICATE = "CERT"
    CERTIFICATE_VERIFY = "CV"
    FINISHED = "FIN"
    APP_DATA = "DATA"
    NEW_TOKEN = "NEW_TOKEN"


EXPECTED_LEVELS = {
    MessageKind.CLIENT_HELLO: {EncryptionLevel.NONE},
    MessageKind.RETRY: {EncryptionLevel.NONE},
    MessageKind.SERVER_HELLO: {EncryptionLevel.NONE},
    MessageKind.ENCRYPTED_EXTENSIONS: {EncryptionLevel.HANDSHAKE},
    MessageKind.CERTIFICATE: {EncryptionLevel.HANDSHAKE},
    MessageKind.CERTIFICATE_VERIFY: {EncryptionLevel.HANDSHAKE},
    MessageKind.FINISHED: {EncryptionLevel.HANDSHAKE},
    MessageKind.APP_DATA: {EncryptionLevel.APPLICATION, EncryptionLevel.EARLY},
    MessageKind.NEW_TOKEN: {EncryptionLevel.APPLICATION},
}

# Nominal on-the-wire sizes in bytes. Client Initials are padded to 1200 as
# in QUIC; the other values are simulator constants.
NOMINAL_SIZES = {
    MessageKind.CLIENT_HELLO: 1200,
    MessageKind.RETRY: 160,
    MessageKind.SERVER_HELLO: 128,
    MessageKind.ENCRYPTED_EXTENSIONS: 96,
    MessageKind.CERTIFICATE: 2000,
    MessageKind.CERTIFICATE_VERIFY: 264,
    MessageKind.FINISHED: 52,
    MessageKind.APP_DATA: 1000,
    MessageKind.NEW_TOKEN: 120,
}


class Policy(enum.Enum):
    STRICT = "strict"
    RELAXED = "relaxed"


class ClientPhase(enum.Enum):
    IDLE = "Idle"
    SENT_CH = "SentCH"
    SENT_CH_WITH_TOKEN = "SentCHWithToken"
    SENT_EARLY = "SentEarly"
    ESTABLISHED = "Established"
    FAILED = "Failed"


class ServerPhase(enum.Enum):
    IDLE = "Idle"
    AWAITING_TOKEN = "AwaitingToken"
    PROCEEDING = "Proceeding"
    ESTABLISHED = "Established"
    FAILED = "Failed"


class Failure(enum.Enum):
    MALFORMED_MESSAGE = "MalformedMessage"
    RETRY_AFTER_RETRY = "RetryAfterRetry"
    FINISHED_MISMATCH = "FinishedMismatch"
    CERT_MISSING_ON_INITIAL = "CertMissingOnInitial"
    CERT_HOST_MISMATCH = "CertHostMismatch"
    UNEXPECTED_PSK = "UnexpectedPsk"


CLIENT_WAITING = (ClientPhase.SENT_CH, ClientPhase.SENT_CH_WITH_TOKEN, ClientPhase.SENT_EARLY)


@dataclass(frozen=True)
class TransportParams:
    validation_group: int = 0

    def __post_init__(self) -> None:
        if self.validation_group not in (0, 1):
            raise ValueError("validation_group is a single bit")


@dataclass(frozen=True)
class HandshakeMessage:
    kind: MessageKind
    level: EncryptionLevel
    token: Optional[bytes] = None
    transport_params: Optional[TransportParams] = None
    psk_offered: bool = False
    early_data: Optional[bytes] = None
    finished_hash: Optional[bytes] = None
    certificate: Optional[Certificate] = None

    @property
    def size(self) -> int:
        return NOMINAL_SIZES[self.kind]

    def encode(self) -> bytes:
        """Canonical byte form, used for transcript digests."""
        parts = [
            self.kind.value.encode(),
            self.level.value.encode(),
            self.token or b"",
            b"" if self.transport_params is None else bytes([self.transport_params.validation_group]),
            b"\x01" if self.psk_offered else b"\x00",
            self.early_data or b"",
            self.finished_hash or b"",
        ]
        if self.certificate is not None:
            parts.append(self.certificate.cert_id.encode())
            parts.append(",".join(sorted(self.certificate.san_hostnames)).encode())
        return b"".join(len(p).to_bytes(4, "big") + p for p in parts)

    def summary(self) -> str:
        text = "%s[%s]" % (self.kind.value, self.level.value)
        if self.token is not None:
            text += "+token"
        if self.psk_offered:
            text += "+psk"
        return text


def level_ok(msg: HandshakeMessage) -> bool:
    return msg.level in EXPECTED_LEVELS[msg.kind]


def transcript_hash(label: bytes, messages: Iterable[HandshakeMessage]) -> bytes:
    h = hashlib.sha256(label)
    for msg in messages:
        h.update(msg.encode())
    return h.digest()


SERVER_FINISHED_LABEL = b"server finished"
CLIENT_FINISHED_LABEL = b"client finished"


@dataclass(frozen=True)
class ResumptionTicket:
    host: str
    certificate: Certificate


# -- client ---------------------------------------------------------------


@dataclass(frozen=True)
class ClientState:
    target_host: str
    phase: ClientPhase = ClientPhase.IDLE
    offered_token: Optional[bytes] = None
    token_from_cache: bool = False
    resumption_ticket_offered: bool = False
    ticket: Optional[ResumptionTicket] = None
    observed_group_bit: Optional[int] = None
    anchor_cert: Optional[Certificate] = None
    retried: bool = False
    wasted_tokens: int = 0
    client_hello: Optional[HandshakeMessage] = None
    early_data: Optional[bytes] = None
    failure: Optional[Failure] = None

    def fail(self, reason: Failure) -> "ClientState":
        return replace(self, phase=ClientPhase.FAILED, failure=reason)


def client_start(
    host: str,
    cache: TokenCache,
    ticket: Optional[ResumptionTicket] = None,
    now: int = 0,
    early_data: Optional[bytes] = None,
) -> Tuple[ClientState, List[HandshakeMessage]]:
    """Open a connection to ``host``.

    A cached token for one of the host's groups is attached and removed
    from the cache.  With a ticket the ClientHello offers a PSK, and
    ``early_data`` (if any) is sent alongside at the early level.
    """
    if not host:
        raise ValueError("host must be non-empty")
    host = host.lower()
    token = cache.take_for_host(host, now)
    ch = HandshakeMessage(
        MessageKind.CLIENT_HELLO,
        EncryptionLevel.NONE,
        token=token,
        psk_offered=ticket is not None,
    )
    out = [ch]
    if ticket is not None and early_data is not None:
        out.append(HandshakeMessage(MessageKind.APP_DATA, EncryptionLevel.EARLY, early_data=early_data))
        phase = ClientPhase.SENT_EARLY
    elif token is not None:
        phase = ClientPhase.SENT_CH_WITH_TOKEN
    else:
        phase = ClientPhase.SENT_CH
    state = ClientState(
        target_host=host,
        phase=phase,
        offered_token=token,
        token_from_cache=token is not None,
        resumption_ticket_offered=ticket is not None,
        ticket=ticket,
        client_hello=ch,
        early_data=early_data if ticket is not None else None,
    )
    return state, out


def client_on_retry(state: ClientState, retry: HandshakeMessage) -> Tuple[ClientState, List[HandshakeMessage]]:
    if state.phase not in CLIENT_WAITING:
        return state.fail(Failure.MALFORMED_MESSAGE), []
    if retry.kind is not MessageKind.RETRY or not level_ok(retry) or retry.token is None:
        return state.fail(Failure.MALFORMED_MESSAGE), []
    if state.retried:
        return state.fail(Failure.RETRY_AFTER_RETRY), []
    wasted = state.wasted_tokens + (1 if state.token_from_cache else 0)
    ch = replace(state.client_hello, token=retry.token)
    out = [ch]
    if state.early_data is not None:
        out.append(HandshakeMessage(MessageKind.APP_DATA, EncryptionLevel.EARLY, early_data=state.early_data))
    new = replace(
        state,
        phase=ClientPhase.SENT_CH_WITH_TOKEN,
        offered_token=retry.token,
        token_from_cache=False,
        retried=True,
        wasted_tokens=wasted,
        client_hello=ch,
    )
    return new, out


def client_on_server_flight(
    state: ClientState,
    msgs: Sequence[HandshakeMessage],
    expected_cert: Optional[Certificate] = None,
    payload: bytes = b"GET /",
) -> Tuple[ClientState, List[HandshakeMessage]]:
    """Process ServerHello..Finished (plus optional server data).

    ``expected_cert`` is the certificate of the original connection for a
    resumed handshake; it defaults to the one recorded in the ticket.
    """
    if state.phase not in CLIENT_WAITING or not msgs:
        return state.fail(Failure.MALFORMED_MESSAGE), []
    if any(not level_ok(m) for m in msgs):
        return state.fail(Failure.MALFORMED_MESSAGE), []
    kinds = [m.kind for m in msgs]
    if kinds[0] is not MessageKind.SERVER_HELLO or MessageKind.FINISHED not in kinds:
        return state.fail(Failure.MALFORMED_MESSAGE), []
    fin_index = kinds.index(MessageKind.FINISHED)
    server_hs = list(msgs[: fin_index + 1])
    by_kind = {m.kind: m for m in server_hs}
    ee = by_kind.get(MessageKind.ENCRYPTED_EXTENSIONS)
    if ee is None or ee.transport_params is None:
        return state.fail(Failure.MALFORMED_MESSAGE), []

    psk_accepted = msgs[0].psk_offered
    if psk_accepted and not state.resumption_ticket_offered:
        return state.fail(Failure.UNEXPECTED_PSK), []

    cert_msg = by_kind.get(MessageKind.CERTIFICATE)
    if cert_msg is not None:
        if cert_msg.certificate is None or MessageKind.CERTIFICATE_VERIFY not in by_kind:
            return state.fail(Failure.MALFORMED_MESSAGE), []
        anchor = cert_msg.certificate
    elif psk_accepted:
        anchor = expected_cert or (state.ticket.certificate if state.ticket else None)
        if anchor is None:
            return state.fail(Failure.CERT_MISSING_ON_INITIAL), []
    else:
        return state.fail(Failure.CERT_MISSING_ON_INITIAL), []
    if not accepts(anchor.san_hostnames, state.target_host):
        return state.fail(Failure.CERT_HOST_MISMATCH), []

    transcript = [state.client_hello] + server_hs[:-1]
    if transcript_hash(SERVER_FINISHED_LABEL, transcript) != server_hs[-1].finished_hash:
        return state.fail(Failure.FINISHED_MISMATCH), []

    fin = HandshakeMessage(
        MessageKind.FINISHED,
        EncryptionLevel.HANDSHAKE,
        finished_hash=transcript_hash(CLIENT_FINISHED_LABEL, [state.client_hello] + server_hs),
    )
    data = HandshakeMessage(MessageKind.APP_DATA, EncryptionLevel.APPLICATION, early_data=payload)
    new = replace(
        state,
        phase=ClientPhase.ESTABLISHED,
        observed_group_bit=ee.transport_params.validation_group,
        anchor_cert=anchor,
    )
    return new, [fin, data]


def client_on_new_token(state: ClientState, msg: HandshakeMessage, cache: TokenCache, now: int) -> Optional[GroupId]:
    """File a post-handshake token under the connection's validation group."""
    if state.phase is not ClientPhase.ESTABLISHED or msg.kind is not MessageKind.NEW_TOKEN or msg.token is None:
        return None
    group = group_for_connection(state.anchor_cert, state.observed_group_bit, state.target_host)
    members = state.anchor_cert.san_hostnames if state.observed_group_bit else [state.target_host]
    cache.store(group, msg.token, now, source_host=state.target_host, members=members)
    return group


def ticket_for(state: ClientState) -> ResumptionTicket:
    if state.phase is not ClientPhase.ESTABLISHED:
        raise ValueError("tickets come from established connections")
    return ResumptionTicket(state.target_host, state.anchor_cert)


# -- server ---------------------------------------------------------------


@dataclass(frozen=True)
class ServerConfig:
    host: str
    certificate: Certificate
    group_id: GroupId
    policy: Policy = Policy.STRICT
    group_bit: int = 1
    max_age_ms: int = DEFAULT_MAX_AGE_MS
    accept_psk: bool = True
    send_app_data: bool = True
    new_tokens: int = 1


@dataclass(frozen=True)
class ServerState:
    config: ServerConfig
    claimed_addr: str
    phase: ServerPhase = ServerPhase.IDLE
    expensive_ops_count: int = 0
    retries_sent: int = 0
    psk_accepted: bool = False
    # one entry per ClientHello that carried a token
    token_results: Tuple[ValidationResult, ...] = ()
    client_finished: Optional[bytes] = field(default=None, repr=False)
    failure: Optional[Failure] = None

    @property
    def policy(self) -> Policy:
        return self.config.policy

    def fail(self, reason: Failure) -> "ServerState":
        return replace(self, phase=ServerPhase.FAILED, failure=reason)


def server_on_client_hello(
    state: ServerState,
    msg: HandshakeMessage,
    secret: GroupSecret,
    replay: ReplayStore,
    now: int,
    rng: random.Random,
) -> Tuple[ServerState, List[HandshakeMessage]]:
    if state.phase not in (ServerPhase.IDLE, ServerPhase.AWAITING_TOKEN):
        return state.fail(Failure.MALFORMED_MESSAGE), []
    if msg.kind is not MessageKind.CLIENT_HELLO or not level_ok(msg):
        return state.fail(Failure.MALFORMED_MESSAGE), []
    cfg = state.config

    result = None
    if msg.token is not None:
        result = validate_token(secret, msg.token, state.claimed_addr, now, cfg.max_age_ms, replay)
    validated = result is not None and result.accepted

    if cfg.policy is Policy.STRICT and not validated:
        token = issue_token(secret, cfg.group_id, state.claimed_addr, now, rng)
        retry = HandshakeMessage(MessageKind.RETRY, EncryptionLevel.NONE, token=token)
        new = replace(
            state,
            phase=ServerPhase.AWAITING_TOKEN,
            retries_sent=state.retries_sent + 1,
            token_results=state.token_results + ((result,) if result is not None else ()),
        )
        return new, [retry]

    psk = msg.psk_offered and cfg.accept_psk
    flight = [
        HandshakeMessage(MessageKind.SERVER_HELLO, EncryptionLevel.NONE, psk_offered=psk),
        HandshakeMessage(
            MessageKind.ENCRYPTED_EXTENSIONS,
            EncryptionLevel.HANDSHAKE,
            transport_params=TransportParams(cfg.group_bit),
        ),
    ]
    if not psk:
        flight.append(HandshakeMessage(MessageKind.CERTIFICATE, EncryptionLevel.HANDSHAKE, certificate=cfg.certificate))
        flight.append(HandshakeMessage(MessageKind.CERTIFICATE_VERIFY, EncryptionLevel.HANDSHAKE))
    fin = HandshakeMessage(
        MessageKind.FINISHED,
        EncryptionLevel.HANDSHAKE,
        finished_hash=transcript_hash(SERVER_FINISHED_LABEL, [msg] + flight),
    )
    flight.append(fin)
    client_fin = transcript_hash(CLIENT_FINISHED_LABEL, [msg] + flight)
    if cfg.send_app_data:
        flight.append(HandshakeMessage(MessageKind.APP_DATA, EncryptionLevel.APPLICATION))
    new = replace(
        state,
        phase=ServerPhase.PROCEEDING,
        # one key-schedule start per ServerHello
        expensive_ops_count=state.expensive_ops_count + 1,
        psk_accepted=psk,
        token_results=state.token_results + ((result,) if result is not None else ()),
        client_finished=client_fin,
    )
    return new, flight


def server_on_client_finished(
    state: ServerState,
    msg: HandshakeMessage,
    secret: GroupSecret,
    now: int,
    rng: random.Random,
) -> Tuple[ServerState, List[HandshakeMessage]]:
    """Verify the client's Finished and hand out tokens for later connections."""
    if state.phase is not ServerPhase.PROCEEDING:
        return state.fail(Failure.MALFORMED_MESSAGE), []
    if msg.kind is not MessageKind.FINISHED or not level_ok(msg):
        return state.fail(Failure.MALFORMED_MESSAGE), []
    if msg.finished_hash != state.client_finished:
        return state.fail(Failure.FINISHED_MISMATCH), []
    cfg = state.config
    tokens = [
        HandshakeMessage(
            MessageKind.NEW_TOKEN,
            EncryptionLevel.APPLICATION,
            token=issue_token(secret, cfg.group_id, state.claimed_addr, now, rng),
        )
        for _ in range(cfg.new_tokens)
    ]
    return replace(state, phase=ServerPhase.ESTABLISHED), tokens


def new_server_state(config: ServerConfig, claimed_addr: IPLike) -> ServerState:
    return ServerState(config=config, claimed_addr=str(ipaddress.ip_address(claimed_addr)))


# -- traces ---------------------------------------------------------------


class IncompleteTrace(ValueError):
    pass


CLIENT_TO_SERVER = "c2s"
SERVER_TO_CLIENT = "s2c"


@dataclass(frozen=True)
class TraceRecord:
    time_ms: int
    direction: str
    kind: MessageKind
    level: EncryptionLevel
    token_present: bool

    def line(self) -> str:
        return "%d %s %s %s %d" % (
            self.time_ms,
            self.direction,
            self.kind.value,
            self.level.value,
            int(self.token_present),
        )

    @classmethod
    def parse(cls, line: str) -> "TraceRecord":
        t, direction, kind, level, token = line.split()
        return cls(int(t), direction, MessageKind(kind), EncryptionLevel(level), token == "1")


def format_trace(trace: Iterable[TraceRecord]) -> str:
    return "".join(r.line() + "\n" for r in trace)


def parse_trace(text: str) -> List[TraceRecord]:
    return [TraceRecord.parse(line) for line in text.splitlines() if line.strip()]


def is_client_data(record: TraceRecord) -> bool:
    return (
        record.direction == CLIENT_TO_SERVER
        and record.kind is MessageKind.APP_DATA
        and record.level in (EncryptionLevel.APPLICATION, EncryptionLevel.EARLY)
    )


def rtt_to_first_app_data(trace: Sequence[TraceRecord]) -> int:
    """Round trips the client waited before sending its first data.

    Counted as the number of client flights (distinct send times) that
    precede the flight carrying the first application or early data.
    """
    sends = [r for r in trace if r.direction == CLIENT_TO_SERVER]
    first = next((r for r in sends if is_client_data(r)), None)
    if first is None:
        raise IncompleteTrace("no client application data in trace")
    return len({r.time_ms for r in sends if r.time_ms < first.time_ms})

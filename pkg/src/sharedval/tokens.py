"""Address validation tokens.

Wire layout (big-endian, 89 bytes)::

    version     1
    group_id   16
    client_ip  16   IPv4 addresses are stored IPv4-mapped
    issued_at   8   milliseconds since epoch
    nonce      16
    tag        32   HMAC-SHA256 over the 57 preceding bytes

The body is authenticated but not encrypted.
"""
import enum
import hashlib
import hmac
import ipaddress
import random
import struct
import threading
from dataclasses import dataclass
from typing import Dict, Optional, Set, Union

TOKEN_VERSION = 1
TOKEN_LENGTH = 89
BODY_LENGTH = 57
TAG_LENGTH = 32
SECRET_LENGTH = 32
DEFAULT_MAX_AGE_MS = 600_000

IPLike = Union[str, ipaddress.IPv4Address, ipaddress.IPv6Address]

_HEAD = struct.Struct("!B16s16sQ16s")


class TokenFormatError(ValueError):
    def __init__(self, reason: "RejectReason", message: str):
        super().__init__(message)
        self.reason = reason


class RejectReason(enum.Enum):
    # declaration order is the rejection precedence
    BAD_LENGTH = "BadLength"
    BAD_VERSION = "BadVersion"
    BAD_TAG = "BadTag"
    IP_MISMATCH = "IpMismatch"
    EXPIRED = "Expired"
    REPLAYED = "Replayed"


@dataclass(frozen=True)
class ValidationResult:
    reason: Optional[RejectReason] = None

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def __str__(self) -> str:
        return "Accept" if self.reason is None else "Reject(%s)" % self.reason.value


ACCEPT = ValidationResult()


@dataclass(frozen=True)
class GroupSecret:
    key: bytes

    def __post_init__(self) -> None:
        if len(self.key) != SECRET_LENGTH:
            raise ValueError("group secret must be %d bytes" % SECRET_LENGTH)

    @classmethod
    def derive(cls, seed: int, label: bytes) -> "GroupSecret":
        """Deterministic secret for simulations; not for real deployments."""
        return cls(hashlib.sha256(b"sharedval-secret" + seed.to_bytes(8, "big") + label).digest())


@dataclass(frozen=True)
class TokenFields:
    group_id: bytes
    client_ip: ipaddress.IPv6Address
    issued_at: int
    nonce: bytes
    version: int = TOKEN_VERSION

    def client_address(self) -> Union[ipaddress.IPv4Address, ipaddress.IPv6Address]:
        return self.client_ip.ipv4_mapped or self.client_ip

    def as_dict(self) -> dict:
        return {
            "version": self.version,
            "group_id": self.group_id.hex(),
            "client_ip": str(self.client_address()),
            "issued_at": self.issued_at,
            "nonce": self.nonce.hex(),
        }


def normalize_ip(ip: IPLike) -> ipaddress.IPv6Address:
    """Map any address onto the 16-byte form carried in tokens."""
    addr = ipaddress.ip_address(ip) if isinstance(ip, str) else ip
    if isinstance(addr, ipaddress.IPv4Address):
        return ipaddress.IPv6Address("::ffff:" + str(addr))
    return addr


def compute_tag(secret: GroupSecret, body: bytes) -> bytes:
    return hmac.new(secret.key, body, hashlib.sha256).digest()


def encode_token(secret: GroupSecret, fields: TokenFields) -> bytes:
    if len(fields.group_id) != 16 or len(fields.nonce) != 16:
        raise ValueError("group_id and nonce must be 16 bytes")
    if fields.issued_at < 0:
        raise ValueError("issued_at must be non-negative")
    body = _HEAD.pack(
        fields.version,
        fields.group_id,
        fields.client_ip.packed,
        fields.issued_at,
        fields.nonce,
    )
    return body + compute_tag(secret, body)


def issue_token(
    secret: GroupSecret,
    group: bytes,
    client_ip: IPLike,
    now: int,
    rng: random.Random,
) -> bytes:
    fields = TokenFields(
        group_id=bytes(group),
        client_ip=normalize_ip(client_ip),
        issued_at=now,
        nonce=rng.randbytes(16),
    )
    return encode_token(secret, fields)


def decode_token(token: bytes) -> TokenFields:
    """Parse a token without checking its tag."""
    if len(token) != TOKEN_LENGTH:
        raise TokenFormatError(
            RejectReason.BAD_LENGTH, "token is %d bytes, expected %d" % (len(token), TOKEN_LENGTH)
        )
    version, group_id, ip, issued_at, nonce = _HEAD.unpack(token[:BODY_LENGTH])
    if version != TOKEN_VERSION:
        raise TokenFormatError(RejectReason.BAD_VERSION, "unknown token version %#04x" % version)
    return TokenFields(
        group_id=group_id,
        client_ip=ipaddress.IPv6Address(ip),
        issued_at=issued_at,
        nonce=nonce,
        version=version,
    )


class ReplayStore:
    """Nonces already accepted, per validation group.

    Unbounded; a deployment would evict nonces older than the token max age.
    """

    def __init__(self) -> None:
        self._seen: Dict[bytes, Set[bytes]] = {}
        self._lock = threading.Lock()

    def check_and_record(self, group_id: bytes, nonce: bytes) -> bool:
        """Record ``nonce``; False if it was already present."""
        with self._lock:
            seen = self._seen.setdefault(group_id, set())
            if nonce in seen:
                return False
            seen.add(nonce)
            return True

    def __contains__(self, key) -> bool:
        group_id, nonce = key
        return nonce in self._seen.get(group_id, ())

    def __len__(self) -> int:
        return sum(len(s) for s in self._seen.values())


def validate_token(
    secret: GroupSecret,
    token: bytes,
    claimed_ip: IPLike,
    now: int,
    max_age_ms: int,
    replay: ReplayStore,
) -> ValidationResult:
    try:
        fields = decode_token(token)
    except TokenFormatError as exc:
        return ValidationResult(exc.reason)
    expected = compute_tag(secret, bytes(token[:BODY_LENGTH]))
    if not hmac.compare_digest(expected, bytes(token[BODY_LENGTH:])):
        return ValidationResult(RejectReason.BAD_TAG)
    if fields.client_ip != normalize_ip(claimed_ip):
        return ValidationResult(RejectReason.IP_MISMATCH)
    if now - fields.issued_at > max_age_ms:
        return ValidationResult(RejectReason.EXPIRED)
    if not replay.check_and_record(fields.group_id, fields.nonce):
        return ValidationResult(RejectReason.REPLAYED)
    return ACCEPT

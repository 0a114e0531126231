"""Client-side token cache keyed by validation group."""
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, FrozenSet, Iterable, List, Optional

from .groups import Certificate, GroupId, group_id_for_hosts, group_of_certificate
from .tokens import DEFAULT_MAX_AGE_MS, TOKEN_LENGTH


@dataclass(frozen=True)
class CacheEntry:
    group: GroupId
    token: bytes
    received_at: int
    source_host: str = ""


class TokenCache:
    """FIFO token store per group; expired entries are dropped lazily on take.

    Not thread-safe: callers serialize access per instance.
    """

    def __init__(self, lifetime_ms: int = DEFAULT_MAX_AGE_MS):
        if lifetime_ms < 0:
            raise ValueError("lifetime_ms must be non-negative")
        self.lifetime_ms = lifetime_ms
        self.entries: Dict[GroupId, Deque[CacheEntry]] = {}
        # hostnames each group covers, learned from the certificates seen
        self.members: Dict[GroupId, FrozenSet[str]] = {}
        self.stored = 0
        self.taken = 0
        self.expired = 0

    def store(
        self,
        group: GroupId,
        token: bytes,
        now: int,
        source_host: str = "",
        members: Optional[Iterable[str]] = None,
    ) -> None:
        if len(token) != TOKEN_LENGTH:
            raise ValueError("token must be %d bytes" % TOKEN_LENGTH)
        if members is not None:
            self.members[group] = self.members.get(group, frozenset()) | {h.lower() for h in members}
        self.entries.setdefault(group, deque()).append(CacheEntry(group, bytes(token), now, source_host))
        self.stored += 1

    def _fresh(self, entry: CacheEntry, now: int) -> bool:
        return now - entry.received_at <= self.lifetime_ms

    def take(self, group: GroupId, now: int) -> Optional[bytes]:
        queue = self.entries.get(group)
        while queue:
            entry = queue.popleft()
            if self._fresh(entry, now):
                self.taken += 1
                if not queue:
                    del self.entries[group]
                return entry.token
            self.expired += 1
        self.entries.pop(group, None)
        return None

    def groups_for_host(self, host: str) -> List[GroupId]:
        """Groups whose tokens ``host`` would accept, own group first."""
        host = host.lower()
        own = group_id_for_hosts([host])
        shared = sorted(g for g, hosts in self.members.items() if host in hosts and g != own)
        return [own] + shared

    def take_for_host(self, host: str, now: int) -> Optional[bytes]:
        for group in self.groups_for_host(host):
            token = self.take(group, now)
            if token is not None:
                return token
        return None

    def evict_expired(self, now: int) -> int:
        dropped = 0
        for group in list(self.entries):
            queue = self.entries[group]
            kept = deque(e for e in queue if self._fresh(e, now))
            dropped += len(queue) - len(kept)
            if kept:
                self.entries[group] = kept
            else:
                del self.entries[group]
        self.expired += dropped
        return dropped

    def count(self, group: GroupId) -> int:
        return len(self.entries.get(group, ()))

    def __len__(self) -> int:
        return sum(len(q) for q in self.entries.values())

    def snapshot(self) -> dict:
        return {
            group.hex(): [
                {"token": e.token.hex(), "received_at": e.received_at, "source_host": e.source_host}
                for e in queue
            ]
            for group, queue in sorted(self.entries.items())
        }


def group_for_connection(anchor_cert: Certificate, group_bit: int, host: str) -> GroupId:
    """Group under which tokens from a connection to ``host`` are filed.

    With the bit cleared, tokens stay scoped to the single hostname.
    """
    if group_bit not in (0, 1):
        raise ValueError("validation_group must be 0 or 1")
    if group_bit:
        return group_of_certificate(anchor_cert)
    return group_id_for_hosts([host])

"""Validation groups and the dataset trust partition."""
import hashlib
import json
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, NewType, Tuple

GroupId = NewType("GroupId", bytes)

GROUP_ID_LENGTH = 16


class EmptySans(ValueError):
    pass


class UnknownHostInEdge(ValueError):
    pass


@dataclass(frozen=True)
class Certificate:
    cert_id: str
    san_hostnames: FrozenSet[str]

    def __post_init__(self) -> None:
        sans = frozenset(h.lower() for h in self.san_hostnames)
        if not sans:
            raise EmptySans("certificate %r has no SAN hostnames" % self.cert_id)
        object.__setattr__(self, "san_hostnames", sans)

    @classmethod
    def of(cls, cert_id: str, *hosts: str) -> "Certificate":
        return cls(cert_id, frozenset(hosts))


def group_id_for_hosts(hosts: Iterable[str]) -> GroupId:
    """Digest of the sorted, de-duplicated hostname list."""
    names = sorted({h.lower() for h in hosts})
    if not names:
        raise EmptySans("a validation group needs at least one hostname")
    digest = hashlib.sha256("\n".join(names).encode("utf-8")).digest()
    return GroupId(digest[:GROUP_ID_LENGTH])


def group_of_certificate(cert: Certificate) -> GroupId:
    return group_id_for_hosts(cert.san_hostnames)


def accepts(group_sans: Iterable[str], host: str) -> bool:
    # wildcard SANs are compared literally
    return host.lower() in {h.lower() for h in group_sans}


class UnionFind:
    """Disjoint sets over hashable items, with path halving and union by size."""

    def __init__(self, items: Iterable = ()):
        self.parent = {}
        self.size = {}
        for item in items:
            self.add(item)

    def add(self, item) -> None:
        if item not in self.parent:
            self.parent[item] = item
            self.size[item] = 1

    def find(self, item):
        parent = self.parent
        while parent[item] != item:
            parent[item] = parent[parent[item]]
            item = parent[item]
        return item

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]

    def components(self) -> List[List]:
        groups: Dict = {}
        for item in self.parent:
            groups.setdefault(self.find(item), []).append(item)
        return list(groups.values())


@dataclass(frozen=True)
class TrustPartition:
    groups: Mapping[str, GroupId]

    def __getitem__(self, host: str) -> GroupId:
        return self.groups[host]

    def __contains__(self, host: str) -> bool:
        return host in self.groups

    def members(self) -> Dict[GroupId, List[str]]:
        out: Dict[GroupId, List[str]] = {}
        for host in sorted(self.groups):
            out.setdefault(self.groups[host], []).append(host)
        return out

    def to_json(self) -> str:
        return json.dumps({h: self.groups[h].hex() for h in sorted(self.groups)}, indent=2)


def build_trust_partition(
    hosts: Iterable[str],
    cert_map: Mapping[str, Certificate],
    resumption_edges: Iterable[Tuple[str, str]] = (),
    include_resumption: bool = True,
) -> TrustPartition:
    """Group hostnames that share a certificate or allow cross-host resumption.

    With ``include_resumption=False`` only shared certificates join hosts.
    """
    hosts = list(hosts)
    uf = UnionFind(hosts)

    by_cert: Dict[str, str] = {}
    for host in hosts:
        cert = cert_map.get(host)
        if cert is None:
            continue
        first = by_cert.setdefault(cert.cert_id, host)
        uf.union(first, host)

    for a, b in resumption_edges:
        if a not in uf.parent or b not in uf.parent:
            raise UnknownHostInEdge("resumption edge (%s, %s) names an unknown host" % (a, b))
        if include_resumption:
            uf.union(a, b)

    mapping: Dict[str, GroupId] = {}
    for component in uf.components():
        gid = group_id_for_hosts(component)
        for host in component:
            mapping[host] = gid
    return TrustPartition(mapping)

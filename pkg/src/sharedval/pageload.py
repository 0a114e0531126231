"""Replay website domain trees with and without shared address validation.

Every connection is assumed to face strict address validation and the
client starts each site with an empty token cache.  A connection whose group
has no cached token needs a retry handshake; otherwise it spends one token
and skips the retry round trip.  Each completed connection leaves one fresh
token for its group.
"""
import csv
import enum
import io
import json
import logging
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from .groups import Certificate, TrustPartition, build_trust_partition

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    pass


class SchemaVersionError(DatasetError):
    pass


class TreeInvariantViolation(DatasetError):
    pass


class UncoveredHostname(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class BadParameter(ValueError):
    pass


class Order(enum.Enum):
    TOTAL = "total"
    LEVEL = "level"


@dataclass(frozen=True)
class EvalPolicy:
    shared: bool
    order: Order = Order.TOTAL


@dataclass(frozen=True)
class SiteNode:
    host: str
    cert: Optional[str] = None
    resume_with: FrozenSet[str] = frozenset()


@dataclass
class DomainTree:
    site: str
    nodes: List[SiteNode]
    edges: List[Tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        hosts = [n.host for n in self.nodes]
        where = "site %s" % self.site
        if len(set(hosts)) != len(hosts):
            raise TreeInvariantViolation("%s: duplicate hostnames" % where)
        known = set(hosts)
        if self.site not in known:
            raise TreeInvariantViolation("%s: root is not among the nodes" % where)
        parent: Dict[str, str] = {}
        for a, b in self.edges:
            if a not in known or b not in known:
                raise TreeInvariantViolation("%s: edge (%s, %s) names an unknown host" % (where, a, b))
            if b == self.site:
                raise TreeInvariantViolation("%s: edge into the root (%s -> %s)" % (where, a, b))
            if b in parent:
                raise TreeInvariantViolation("%s: %s has two parents" % (where, b))
            parent[b] = a
        for node in self.nodes:
            for other in node.resume_with:
                if other not in known:
                    raise TreeInvariantViolation("%s: %s resumes with unknown host %s" % (where, node.host, other))
        # with one parent per non-root node, reachability from the root rules out cycles
        seen = set(self._walk())
        if seen != known:
            missing = sorted(known - seen)
            raise TreeInvariantViolation("%s: unreachable or cyclic nodes %s" % (where, ", ".join(missing)))

    def children(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {n.host: [] for n in self.nodes}
        for a, b in self.edges:
            out[a].append(b)
        return out

    def _walk(self) -> Iterable[str]:
        kids = self.children()
        stack, seen = [self.site], set()
        while stack:
            host = stack.pop()
            if host in seen:
                continue
            seen.add(host)
            yield host
            stack.extend(reversed(kids.get(host, [])))

    def preorder(self) -> List[str]:
        return list(self._walk())

    def levels(self) -> List[List[str]]:
        kids = self.children()
        levels, frontier = [], [self.site]
        while frontier:
            levels.append(frontier)
            frontier = [c for h in frontier for c in kids[h]]
        return levels

    def depth(self) -> int:
        return len(self.levels())

    def resumption_edges(self) -> List[Tuple[str, str]]:
        edges = set()
        for node in self.nodes:
            for other in node.resume_with:
                if other != node.host:
                    edges.add(tuple(sorted((node.host, other))))
        return sorted(edges)

    def partition(self, include_resumption: bool = True) -> TrustPartition:
        certs = {
            n.host: Certificate(n.cert, frozenset([n.host]))
            for n in self.nodes
            if n.cert is not None
        }
        return build_trust_partition(
            [n.host for n in self.nodes], certs, self.resumption_edges(), include_resumption
        )

    def as_dict(self) -> dict:
        return {
            "site": self.site,
            "nodes": [
                {"host": n.host, "cert": n.cert, "resume_with": sorted(n.resume_with)}
                for n in self.nodes
            ],
            "edges": [[a, b] for a, b in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DomainTree":
        try:
            nodes = [
                SiteNode(
                    host=n["host"].lower(),
                    cert=n.get("cert"),
                    resume_with=frozenset(h.lower() for h in n.get("resume_with", [])),
                )
                for n in data["nodes"]
            ]
            edges = [(a.lower(), b.lower()) for a, b in data.get("edges", [])]
            site = data["site"].lower()
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError("malformed tree record %r: %s" % (data.get("site") if isinstance(data, dict) else data, exc))
        return cls(site, nodes, edges)


def parse_dataset(text: str, strict: bool = True) -> List[DomainTree]:
    if not text.strip():
        return []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError("dataset is not valid JSON: %s" % exc) from exc
    if not isinstance(doc, dict) or "trees" not in doc:
        raise ParseError("dataset must be an object with a 'trees' list")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError("unsupported schema_version %r" % (version,))
    trees = []
    for record in doc["trees"]:
        try:
            trees.append(DomainTree.from_dict(record))
        except DatasetError as exc:
            if strict:
                raise
            logger.warning("skipping tree: %s", exc)
    return trees


def load_dataset(path: Union[str, Path], strict: bool = True) -> List[DomainTree]:
    """Read a dataset file; with ``strict=False`` malformed trees are skipped."""
    return parse_dataset(Path(path).read_text(encoding="utf-8"), strict=strict)


def dump_dataset(trees: Sequence[DomainTree]) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "trees": [t.as_dict() for t in trees]}, indent=1) + "\n"


# -- simulation -----------------------------------------------------------


@dataclass(frozen=True)
class SiteMetrics:
    site: str
    connections: int
    retry_handshakes: int
    longest_retry_path: int
    depth: int
    delay_overhead_ms: float
    retry_hosts: FrozenSet[str] = field(default=frozenset(), repr=False, compare=False)


def _mark_total(tree: DomainTree, partition: TrustPartition) -> set:
    tokens: Counter = Counter()
    retry = set()
    for host in tree.preorder():
        group = partition[host]
        if tokens[group]:
            tokens[group] -= 1
        else:
            retry.add(host)
        tokens[group] += 1
    return retry


def _mark_level(tree: DomainTree, partition: TrustPartition) -> set:
    tokens: Counter = Counter()
    retry = set()
    for level in tree.levels():
        fresh: Counter = Counter()
        for host in level:
            group = partition[host]
            if tokens[group]:
                tokens[group] -= 1
            else:
                retry.add(host)
            fresh[group] += 1
        # tokens from this level only become usable one level down
        tokens.update(fresh)
    return retry


def longest_marked_path(tree: DomainTree, marked: set) -> int:
    kids = tree.children()
    best: Dict[str, int] = {}
    for host in reversed(tree.preorder()):
        below = max((best[c] for c in kids[host]), default=0)
        best[host] = below + (1 if host in marked else 0)
    return best[tree.site]


def simulate_site(
    tree: DomainTree,
    partition: TrustPartition,
    policy: EvalPolicy,
    rtt_ms: float,
) -> SiteMetrics:
    hosts = [n.host for n in tree.nodes]
    uncovered = [h for h in hosts if h not in partition]
    if uncovered:
        raise UncoveredHostname("%s: no group for %s" % (tree.site, ", ".join(sorted(uncovered))))
    if not policy.shared:
        retry = set(hosts)
    elif policy.order is Order.TOTAL:
        retry = _mark_total(tree, partition)
    else:
        retry = _mark_level(tree, partition)
    longest = longest_marked_path(tree, retry)
    return SiteMetrics(
        site=tree.site,
        connections=len(hosts),
        retry_handshakes=len(retry),
        longest_retry_path=longest,
        depth=tree.depth(),
        delay_overhead_ms=longest * rtt_ms,
        retry_hosts=frozenset(retry),
    )


# -- aggregation ----------------------------------------------------------


def _histogram(values: Sequence[int]) -> Dict[int, float]:
    counts = Counter(values)
    n = len(values)
    return {k: float(Fraction(counts[k], n)) for k in sorted(counts)}


def _ratio(num: int, den: int) -> float:
    return float(Fraction(num, den)) if den else 0.0


@dataclass
class AggregateMetrics:
    policy: str
    sites: int
    total_connections: int
    total_retries: int
    total_longest_path: int
    mean_connections: float
    mean_retries: float
    mean_longest_path: float
    mean_delay_overhead_ms: float
    histogram_retries: Dict[int, float]
    histogram_path: Dict[int, float]

    @classmethod
    def from_sites(cls, policy: str, sites: Sequence[SiteMetrics], rtt_ms: float) -> "AggregateMetrics":
        n = len(sites)
        if not n:
            raise EmptyDataset("no sites to aggregate")
        conns = sum(s.connections for s in sites)
        retries = sum(s.retry_handshakes for s in sites)
        longest = sum(s.longest_retry_path for s in sites)
        return cls(
            policy=policy,
            sites=n,
            total_connections=conns,
            total_retries=retries,
            total_longest_path=longest,
            mean_connections=_ratio(conns, n),
            mean_retries=_ratio(retries, n),
            mean_longest_path=_ratio(longest, n),
            mean_delay_overhead_ms=float(Fraction(longest, n) * Fraction(rtt_ms)),
            histogram_retries=_histogram([s.retry_handshakes for s in sites]),
            histogram_path=_histogram([s.longest_retry_path for s in sites]),
        )

    def as_dict(self) -> dict:
        return {
            "policy": self.policy,
            "sites": self.sites,
            "total_connections": self.total_connections,
            "total_retries": self.total_retries,
            "total_longest_path": self.total_longest_path,
            "mean_connections": self.mean_connections,
            "mean_retries": self.mean_retries,
            "mean_longest_path": self.mean_longest_path,
            "mean_delay_overhead_ms": self.mean_delay_overhead_ms,
            "histogram_retries": {str(k): v for k, v in self.histogram_retries.items()},
            "histogram_path": {str(k): v for k, v in self.histogram_path.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AggregateMetrics":
        values = dict(data)
        for key in ("histogram_retries", "histogram_path"):
            values[key] = {int(k): float(v) for k, v in data[key].items()}
        return cls(**values)


@dataclass
class Savings:
    retries_abs: float
    retries_rel: float
    path_abs: float
    path_rel: float
    delay_saving_ms: float

    @classmethod
    def between(cls, baseline: AggregateMetrics, shared: AggregateMetrics, rtt_ms: float) -> "Savings":
        n = baseline.sites
        d_retry = baseline.total_retries - shared.total_retries
        d_path = baseline.total_longest_path - shared.total_longest_path
        return cls(
            retries_abs=_ratio(d_retry, n),
            retries_rel=_ratio(d_retry, baseline.total_retries),
            path_abs=_ratio(d_path, n),
            path_rel=_ratio(d_path, baseline.total_longest_path),
            delay_saving_ms=float(Fraction(d_path, n) * Fraction(rtt_ms)),
        )

    def as_dict(self) -> dict:
        return {
            "retries_abs": self.retries_abs,
            "retries_rel": self.retries_rel,
            "path_abs": self.path_abs,
            "path_rel": self.path_rel,
            "delay_saving_ms": self.delay_saving_ms,
        }


@dataclass
class Evaluation:
    order: Order
    rtt_ms: float
    baseline: Optional[AggregateMetrics] = None
    shared: Optional[AggregateMetrics] = None
    savings: Optional[Savings] = None
    sites: List[Tuple[SiteMetrics, SiteMetrics]] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "order": self.order.value,
            "rtt_ms": self.rtt_ms,
            "delay_overhead": "retry-attributable round trips on the longest path times rtt_ms",
        }
        if self.baseline is not None:
            out["baseline"] = self.baseline.as_dict()
        if self.shared is not None:
            out["shared"] = self.shared.as_dict()
        if self.savings is not None:
            out["savings"] = self.savings.as_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Evaluation":
        return cls(
            order=Order(data["order"]),
            rtt_ms=data["rtt_ms"],
            baseline=AggregateMetrics.from_dict(data["baseline"]) if "baseline" in data else None,
            shared=AggregateMetrics.from_dict(data["shared"]) if "shared" in data else None,
            savings=Savings(**data["savings"]) if "savings" in data else None,
        )


def evaluate_dataset(
    trees: Sequence[DomainTree],
    order: Order = Order.TOTAL,
    rtt_ms: float = 90,
    include_resumption: bool = True,
) -> Evaluation:
    """Compare the no-sharing baseline against shared validation."""
    if not trees:
        raise EmptyDataset("dataset has no trees")
    pairs = []
    for tree in trees:
        partition = tree.partition(include_resumption)
        pairs.append(
            (
                simulate_site(tree, partition, EvalPolicy(False, order), rtt_ms),
                simulate_site(tree, partition, EvalPolicy(True, order), rtt_ms),
            )
        )
    baseline = AggregateMetrics.from_sites("baseline", [b for b, _ in pairs], rtt_ms)
    shared = AggregateMetrics.from_sites("shared", [s for _, s in pairs], rtt_ms)
    return Evaluation(order, rtt_ms, baseline, shared, Savings.between(baseline, shared, rtt_ms), pairs)


# -- reports --------------------------------------------------------------

CSV_COLUMNS = ("policy", "metric", "count", "share")


def emit_report(evaluation: Evaluation, fmt: str = "json") -> bytes:
    """Serialize an evaluation.

    CSV holds one row per histogram bin with columns policy, metric
    (``retries`` or ``longest_path``), count and share.
    """
    if fmt == "json":
        return (json.dumps(evaluation.as_dict(), indent=2) + "\n").encode()
    if fmt != "csv":
        raise ValueError("unknown report format %r" % fmt)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for agg in (evaluation.baseline, evaluation.shared):
        if agg is None:
            continue
        for metric, hist in (("retries", agg.histogram_retries), ("longest_path", agg.histogram_path)):
            for count, share in hist.items():
                writer.writerow((agg.policy, metric, count, repr(share)))
    return buf.getvalue().encode()


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "order", "rtt_ms"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "order": {"enum": [o.value for o in Order]},
        "rtt_ms": {"type": "number", "minimum": 0},
        "baseline": {"$ref": "#/$defs/aggregate"},
        "shared": {"$ref": "#/$defs/aggregate"},
        "savings": {
            "type": "object",
            "required": ["retries_abs", "retries_rel", "path_abs", "path_rel", "delay_saving_ms"],
            "additionalProperties": {"type": "number"},
        },
    },
    "$defs": {
        "histogram": {
            "type": "object",
            "propertyNames": {"pattern": "^[0-9]+$"},
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "aggregate": {
            "type": "object",
            "required": [
                "policy",
                "sites",
                "mean_retries",
                "mean_longest_path",
                "histogram_retries",
                "histogram_path",
            ],
            "properties": {
                "policy": {"enum": ["baseline", "shared"]},
                "sites": {"type": "integer", "minimum": 1},
                "histogram_retries": {"$ref": "#/$defs/histogram"},
                "histogram_path": {"$ref": "#/$defs/histogram"},
            },
        },
    },
}


# -- synthetic data -------------------------------------------------------


def gen_synthetic(
    seed: int,
    site_count: int,
    depth_range: Tuple[int, int] = (1, 5),
    fanout_range: Tuple[int, int] = (0, 3),
    group_density: float = 0.3,
    max_nodes: int = 400,
) -> List[DomainTree]:
    """Random domain trees.

    Each node after the root joins the group of a random earlier node with
    probability ``group_density``, either by sharing its certificate or by a
    resumption relation (even odds); otherwise it gets a certificate of its own.
    """
    lo_d, hi_d = depth_range
    lo_f, hi_f = fanout_range
    if site_count < 0:
        raise BadParameter("site_count must be non-negative")
    if not 1 <= lo_d <= hi_d:
        raise BadParameter("depth_range must satisfy 1 <= min <= max")
    if not 0 <= lo_f <= hi_f:
        raise BadParameter("fanout_range must satisfy 0 <= min <= max")
    if not 0.0 <= group_density <= 1.0:
        raise BadParameter("group_density must lie in [0, 1]")
    if max_nodes < hi_d:
        raise BadParameter("max_nodes must allow the deepest chain")

    rng = random.Random(seed)
    trees = []
    for i in range(site_count):
        site = "site%d.example" % i
        depth = rng.randint(lo_d, hi_d)
        hosts = [site]
        edges = []
        # the spine is one chain reaching the drawn depth; budget is kept for it
        spine_left = depth - 1
        queue = deque([(site, 1, True)])
        while queue:
            host, level, spine = queue.popleft()
            if level >= depth:
                continue
            fan = rng.randint(lo_f, hi_f)
            extra = fan - 1 if spine else fan
            extra = max(0, min(extra, max_nodes - len(hosts) - spine_left - (1 if spine else 0)))
            children = [True] * spine + [False] * extra
            for on_spine in children:
                child = "h%d.%s" % (len(hosts), site)
                hosts.append(child)
                edges.append((host, child))
                queue.append((child, level + 1, on_spine))
            if spine:
                spine_left -= 1

        certs: List[str] = []
        resume: Dict[str, set] = {h: set() for h in hosts}
        for n, host in enumerate(hosts):
            if n and rng.random() < group_density:
                j = rng.randrange(n)
                if rng.random() < 0.5:
                    certs.append(certs[j])
                else:
                    certs.append("c%d-%d" % (i, n))
                    resume[host].add(hosts[j])
            else:
                certs.append("c%d-%d" % (i, n))
        nodes = [SiteNode(h, c, frozenset(resume[h])) for h, c in zip(hosts, certs)]
        trees.append(DomainTree(site, nodes, edges))
    return trees

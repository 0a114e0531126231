import csv
import io
import json
import math

import jsonschema
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import FIXTURES
from sharedval.groups import build_trust_partition
from sharedval.pageload import (
    REPORT_SCHEMA,
    BadParameter,
    DomainTree,
    EmptyDataset,
    EvalPolicy,
    Evaluation,
    Order,
    ParseError,
    SchemaVersionError,
    SiteNode,
    TreeInvariantViolation,
    UncoveredHostname,
    dump_dataset,
    emit_report,
    evaluate_dataset,
    gen_synthetic,
    load_dataset,
    parse_dataset,
    simulate_site,
)

SHARED_TOTAL = EvalPolicy(True, Order.TOTAL)
SHARED_LEVEL = EvalPolicy(True, Order.LEVEL)
BASELINE = EvalPolicy(False, Order.TOTAL)


def chain(certs):
    hosts = ["n%d.example" % i for i in range(len(certs))]
    nodes = [SiteNode(h, c) for h, c in zip(hosts, certs)]
    return DomainTree(hosts[0], nodes, list(zip(hosts, hosts[1:])))


def metrics(tree, policy, rtt=90):
    return simulate_site(tree, tree.partition(), policy, rtt)


# -- loading ----------------------------------------------------------------------


def test_google_chain_fixture():
    trees = load_dataset(FIXTURES / "google_chain.json")
    assert len(trees) == 1 and trees[0].depth() == 4
    m = metrics(trees[0], SHARED_TOTAL)
    assert (m.retry_handshakes, m.longest_retry_path) == (4, 4)


def test_cycle_fixture_rejected():
    with pytest.raises(TreeInvariantViolation):
        load_dataset(FIXTURES / "cycle.json")
    assert load_dataset(FIXTURES / "cycle.json", strict=False) == []


def test_empty_file(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    assert load_dataset(path) == []


@pytest.mark.parametrize(
    "text, exc",
    [
        ("{", ParseError),
        ("[]", ParseError),
        ('{"schema_version": 99, "trees": []}', SchemaVersionError),
        ('{"schema_version": 1, "trees": [{"nodes": []}]}', ParseError),
    ],
)
def test_malformed_datasets(text, exc):
    with pytest.raises(exc):
        parse_dataset(text)


def tree_dict(nodes, edges, site="a"):
    return {"site": site, "nodes": [{"host": h, "cert": h} for h in nodes], "edges": edges}


@pytest.mark.parametrize(
    "record",
    [
        tree_dict(["a", "a"], []),
        tree_dict(["b"], []),
        tree_dict(["a", "b"], [["a", "zz"]]),
        tree_dict(["a", "b"], [["b", "a"]]),
        tree_dict(["a", "b", "c"], [["a", "c"], ["b", "c"], ["a", "b"]]),
        tree_dict(["a", "b"], []),
        {"site": "a", "nodes": [{"host": "a", "cert": "x", "resume_with": ["q"]}], "edges": []},
    ],
)
def test_tree_invariants(record):
    with pytest.raises(TreeInvariantViolation):
        DomainTree.from_dict(record)


def test_dump_round_trip():
    trees = load_dataset(FIXTURES / "mini.json")
    assert parse_dataset(dump_dataset(trees)) == trees


# -- per-site simulation ---------------------------------------------------------


def test_chain_with_shared_second_and_fourth():
    tree = chain(["c1", "c2", "c3", "c2"])
    m = metrics(tree, SHARED_TOTAL)
    assert (m.retry_handshakes, m.longest_retry_path) == (3, 3)
    assert m.delay_overhead_ms == 270


def test_baseline_is_node_count_and_depth():
    tree = load_dataset(FIXTURES / "mini.json")[0]
    m = metrics(tree, BASELINE)
    assert (m.retry_handshakes, m.longest_retry_path) == (5, 4)


def test_uncovered_host():
    tree = chain(["a", "b"])
    partial = build_trust_partition(["n0.example"], {})
    with pytest.raises(UncoveredHostname):
        simulate_site(tree, partial, SHARED_TOTAL, 90)


def test_level_order_withholds_same_level_tokens():
    # root with two siblings sharing one certificate
    nodes = [SiteNode("r", "r"), SiteNode("x", "s"), SiteNode("y", "s")]
    tree = DomainTree("r", nodes, [("r", "x"), ("r", "y")])
    assert metrics(tree, SHARED_TOTAL).retry_handshakes == 2
    assert metrics(tree, SHARED_LEVEL).retry_handshakes == 3


def test_mini_dataset_matches_oracle_golden():
    expected = json.loads((FIXTURES / "mini_expected.json").read_text())
    ev = evaluate_dataset(load_dataset(FIXTURES / "mini.json"), rtt_ms=90)
    assert ev.baseline.mean_retries == pytest.approx(expected["baseline_mean_retries"], abs=1e-12)
    assert ev.shared.mean_retries == pytest.approx(expected["shared_mean_retries"], abs=1e-12)
    assert ev.baseline.mean_longest_path == pytest.approx(expected["baseline_mean_longest_path"], abs=1e-12)
    assert ev.shared.mean_longest_path == pytest.approx(expected["shared_mean_longest_path"], abs=1e-12)
    assert ev.savings.delay_saving_ms == pytest.approx(expected["delay_saving_ms"], abs=1e-9)
    for _, shared in ev.sites:
        want = expected["per_site_shared"][shared.site]
        assert [shared.connections, shared.retry_handshakes, shared.longest_retry_path] == want


def test_calibrated_dataset():
    expected = json.loads((FIXTURES / "calibrated_expected.json").read_text())
    ev = evaluate_dataset(load_dataset(FIXTURES / "calibrated.json"), rtt_ms=90)
    assert ev.baseline.mean_retries == pytest.approx(20.24, abs=1e-9) == expected["baseline_mean_retries"]
    assert ev.shared.mean_retries == pytest.approx(8.35, abs=1e-9)
    assert ev.baseline.mean_longest_path == pytest.approx(4.04, abs=1e-9)
    assert ev.shared.mean_longest_path == pytest.approx(2.46, abs=1e-9)
    assert ev.savings.path_abs == pytest.approx(1.58, abs=1e-9)
    assert abs(ev.savings.delay_saving_ms - 142.2) <= 1e-9
    assert ev.savings.retries_abs == pytest.approx(11.89, abs=1e-9)


def test_singleton_dataset():
    ev = evaluate_dataset([chain(["only"])])
    assert ev.baseline.mean_retries == ev.shared.mean_retries == 1.0


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        evaluate_dataset([])


def test_cert_only_partition_is_finer():
    shop = load_dataset(FIXTURES / "mini.json")[0]
    wide = evaluate_dataset([shop])
    narrow = evaluate_dataset([shop], include_resumption=False)
    assert narrow.shared.mean_retries == wide.shared.mean_retries + 1


# -- properties --------------------------------------------------------------------

synth_args = st.tuples(
    st.integers(0, 10_000),
    st.tuples(st.integers(1, 4), st.integers(0, 3)).map(lambda t: (t[0], t[0] + t[1])),
    st.tuples(st.integers(0, 3), st.integers(0, 3)).map(lambda t: (t[0], t[0] + t[1])),
    st.floats(0, 1),
)


@settings(max_examples=150, deadline=None)
@given(synth_args)
def test_properties_on_random_trees(args):
    seed, depth, fanout, density = args
    for tree in gen_synthetic(seed, 3, depth, fanout, density, max_nodes=60):
        d = tree.as_dict()
        base = metrics(tree, BASELINE)
        tot = metrics(tree, SHARED_TOTAL)
        lvl = metrics(tree, SHARED_LEVEL)
        assert (base.retry_handshakes, base.longest_retry_path) == (len(tree.nodes), oracles.depth(d))
        assert tot.retry_handshakes == oracles.distinct_group_count(d)
        assert (tot.connections, tot.retry_handshakes, tot.longest_retry_path) == oracles.site_metrics_total_order(d)
        for m in (tot, lvl):
            assert m.retry_handshakes <= base.retry_handshakes
            assert m.longest_retry_path <= base.longest_retry_path
            assert 0 <= m.longest_retry_path <= m.depth
        assert lvl.retry_handshakes >= tot.retry_handshakes
        assert depth[0] <= tree.depth() <= depth[1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_per_host_groups_reduce_to_baseline(seed):
    # group_bit=0 everywhere: each hostname is its own group
    for tree in gen_synthetic(seed, 3, (1, 4), (0, 3), 0.0):
        for order in Order:
            m = metrics(tree, EvalPolicy(True, order))
            b = metrics(tree, BASELINE)
            assert (m.retry_handshakes, m.longest_retry_path) == (b.retry_handshakes, b.longest_retry_path)


def test_per_site_saving_is_exact():
    for base, shared in evaluate_dataset(gen_synthetic(4, 30), rtt_ms=37.5).sites:
        assert base.delay_overhead_ms - shared.delay_overhead_ms == (
            base.longest_retry_path - shared.longest_retry_path
        ) * 37.5


# -- synthetic generator ------------------------------------------------------------


def test_synthetic_is_deterministic():
    assert dump_dataset(gen_synthetic(1, 10)) == dump_dataset(gen_synthetic(1, 10))
    assert dump_dataset(gen_synthetic(1, 10)) != dump_dataset(gen_synthetic(2, 10))


def test_density_zero_shared_equals_baseline():
    ev = evaluate_dataset(gen_synthetic(3, 40, group_density=0.0))
    assert ev.shared.mean_retries == ev.baseline.mean_retries
    assert ev.shared.mean_longest_path == ev.baseline.mean_longest_path


def test_density_one_gives_one_retry_per_site():
    for base, shared in evaluate_dataset(gen_synthetic(3, 40, group_density=1.0)).sites:
        assert shared.retry_handshakes == 1


@pytest.mark.parametrize(
    "kwargs",
    [
        {"site_count": -1},
        {"depth_range": (0, 2)},
        {"depth_range": (3, 2)},
        {"fanout_range": (2, 1)},
        {"group_density": 1.5},
        {"depth_range": (1, 50), "max_nodes": 10},
    ],
)
def test_synthetic_bad_parameters(kwargs):
    args = {"seed": 0, "site_count": 1, **kwargs}
    with pytest.raises(BadParameter):
        gen_synthetic(**args)


def test_synthetic_trees_validate_and_reload():
    trees = gen_synthetic(9, 25, (2, 5), (1, 3), 0.4)
    assert parse_dataset(dump_dataset(trees)) == trees


# -- reports ------------------------------------------------------------------------


def _mini_eval():
    return evaluate_dataset(load_dataset(FIXTURES / "mini.json"))


def test_json_report_matches_schema_and_round_trips():
    ev = _mini_eval()
    doc = json.loads(emit_report(ev, "json"))
    jsonschema.validate(doc, REPORT_SCHEMA)
    again = Evaluation.from_dict(doc)
    assert again.as_dict() == ev.as_dict()


def test_csv_report_rows_and_shares():
    ev = _mini_eval()
    rows = list(csv.reader(io.StringIO(emit_report(ev, "csv").decode())))
    bins = sum(len(a.histogram_retries) + len(a.histogram_path) for a in (ev.baseline, ev.shared))
    assert rows[0] == ["policy", "metric", "count", "share"]
    assert len(rows) == 1 + bins
    sums = {}
    for policy, metric, _, share in rows[1:]:
        sums[(policy, metric)] = sums.get((policy, metric), 0.0) + float(share)
    assert len(sums) == 4
    assert all(math.isclose(v, 1.0, abs_tol=1e-9) for v in sums.values())


def test_histograms_sum_to_one_on_larger_data():
    ev = evaluate_dataset(gen_synthetic(11, 333))
    for agg in (ev.baseline, ev.shared):
        for hist in (agg.histogram_retries, agg.histogram_path):
            assert abs(sum(hist.values()) - 1.0) <= 1e-9


def test_unknown_report_format():
    with pytest.raises(ValueError):
        emit_report(_mini_eval(), "xml")

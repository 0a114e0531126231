"""Command line entry point.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .groups import Certificate
from .handshake import Policy
from .netsim import (
    DEFAULT_LATENCY_MS,
    ScriptError,
    ServerSpec,
    SimConfig,
    events_to_jsonl,
    run_scenario,
    run_spoof_attack,
)
from .pageload import (
    BadParameter,
    DatasetError,
    EmptyDataset,
    Order,
    dump_dataset,
    emit_report,
    evaluate_dataset,
    gen_synthetic,
    load_dataset,
)
from .tokens import TokenFormatError, decode_token

logger = logging.getLogger("sharedval")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError("%s: error: %s" % (self.prog, message))


def _int_range(text: str) -> Tuple[int, int]:
    try:
        lo, _, hi = text.partition(":")
        return (int(lo), int(hi or lo))
    except ValueError:
        raise argparse.ArgumentTypeError("expected MIN:MAX, got %r" % text)


def _common(top: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the subcommand; the subcommand copy
    # suppresses its defaults so it never clobbers a value given up front
    dflt = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=dflt(0), help="seed for every random choice (default 0)")
    common.add_argument("--output", "-o", default=dflt(None), help="write results to this file instead of stdout")
    common.add_argument("--verbose", "-v", action="store_true", default=dflt(False), help="log progress to stderr")
    common.add_argument(
        "--pretty", action="store_true", default=dflt(False), help="human-readable tables instead of JSON"
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sharedval", description=__doc__.splitlines()[0], parents=[_common(True)])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    common = _common(False)

    p = sub.add_parser("handshake", parents=[common], help="run a scripted handshake scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--latency-ms", type=int, help="one-way latency; overrides the scenario")
    p.add_argument("--summary", action="store_true", help="print per-connection results instead of the event log")

    p = sub.add_parser("attack", parents=[common], help="spoofed-source ClientHello flood")
    p.add_argument("--attempts", type=int, default=1000)
    p.add_argument("--policy", choices=[x.value for x in Policy], default="strict")
    p.add_argument("--victim-ip", default="203.0.113.5")
    p.add_argument("--replay-token", action="store_true", help="attach a token captured by the attacker")
    p.add_argument("--latency-ms", type=int, default=DEFAULT_LATENCY_MS)
    p.add_argument("--events", action="store_true", help="print the event log instead of the report")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a domain-tree dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--order", choices=[o.value for o in Order], default="total")
    p.add_argument("--rtt-ms", type=float, default=90.0)
    p.add_argument("--shared", choices=["on", "off", "both"], default="both")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--cert-only", action="store_true", help="ignore resumption relations when grouping")
    p.add_argument("--skip-bad-trees", action="store_true", help="skip malformed trees instead of failing")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--sites", type=int, default=100)
    p.add_argument("--depth", type=_int_range, default=(1, 5), metavar="MIN:MAX")
    p.add_argument("--fanout", type=_int_range, default=(0, 3), metavar="MIN:MAX")
    p.add_argument("--density", type=float, default=0.3)

    p = sub.add_parser("token-decode", parents=[common], help="dump the fields of a token")
    p.add_argument("token", help="89-byte token as hex")
    return parser


def _write(args, data: bytes) -> None:
    if args.output:
        Path(args.output).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2) + "\n").encode()


def _table(rows: Sequence[Sequence], header: Sequence[str]) -> bytes:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return ("\n".join(lines) + "\n").encode()


def cmd_handshake(args) -> int:
    try:
        data = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScriptError("cannot read scenario: %s" % exc)
    data["seed"] = args.seed
    if args.latency_ms is not None:
        data["latency_ms"] = args.latency_ms
    config = SimConfig.from_dict(data)
    result = run_scenario(config)
    if args.pretty:
        rows = [
            (c.index, c.host, c.phase.value, c.rtts, c.first_data_ms, c.retries, c.wasted_tokens)
            for c in result.connections
        ]
        _write(args, _table(rows, ("#", "host", "phase", "rtts", "first_data_ms", "retries", "wasted")))
    elif args.summary:
        _write(args, _json({"connections": [c.as_dict() for c in result.connections], "counters": result.counters}))
    else:
        _write(args, result.event_log().encode())
    return EXIT_OK


def cmd_attack(args) -> int:
    if args.attempts < 0:
        raise UsageError("--attempts must be non-negative")
    cert = Certificate.of("attack-target", "target.example")
    config = SimConfig(
        servers=[ServerSpec("target.example", cert, policy=Policy(args.policy))],
        one_way_latency_ms=args.latency_ms,
        seed=args.seed,
    )
    report = run_spoof_attack(config, args.victim_ip, args.attempts, replay_captured=args.replay_token)
    if args.events:
        _write(args, events_to_jsonl(report.events).encode())
    elif args.pretty:
        _write(args, _table(sorted(report.as_dict().items()), ("field", "value")))
    else:
        _write(args, _json(report.as_dict()))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    trees = load_dataset(args.dataset, strict=not args.skip_bad_trees)
    logger.info("loaded %d trees from %s", len(trees), args.dataset)
    evaluation = evaluate_dataset(
        trees, Order(args.order), args.rtt_ms, include_resumption=not args.cert_only
    )
    if args.shared == "on":
        evaluation.baseline = evaluation.savings = None
    elif args.shared == "off":
        evaluation.shared = evaluation.savings = None
    if args.pretty:
        rows = []
        for agg in (evaluation.baseline, evaluation.shared):
            if agg is not None:
                rows.append((agg.policy, agg.mean_retries, agg.mean_longest_path, agg.mean_delay_overhead_ms))
        out = _table(rows, ("policy", "mean_retries", "mean_longest_path", "delay_overhead_ms"))
        if evaluation.savings is not None:
            out += b"delay saving: %r ms\n" % evaluation.savings.delay_saving_ms
        _write(args, out)
    else:
        _write(args, emit_report(evaluation, args.format))
    return EXIT_OK


def cmd_synth(args) -> int:
    trees = gen_synthetic(args.seed, args.sites, args.depth, args.fanout, args.density)
    _write(args, dump_dataset(trees).encode())
    return EXIT_OK


def cmd_token_decode(args) -> int:
    try:
        raw = bytes.fromhex(args.token)
    except ValueError:
        raise TokenFormatError(None, "token is not valid hex")
    fields = decode_token(raw)
    _write(args, _json(fields.as_dict()))
    return EXIT_OK


COMMANDS = {
    "handshake": cmd_handshake,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
    "token-decode": cmd_token_decode,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return exc.code or EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print("sharedval: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, EmptyDataset, BadParameter, ScriptError, TokenFormatError, OSError) as exc:
        print("sharedval: %s" % exc, file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``scg analyze|estimate|verify|fixtures``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import acceptance, experiment
from . import fixtures as fx
from .graph_analysis import analysis_report
from .estimators import InvalidSpec
from .graph_core import GraphError, load_graph


def _load(target: str):
    """A fixture name or a path to a graph JSON file."""
    if target in fx.fixture_names():
        f = fx.get_fixture(target)
        return f.graph, f.sets
    if not os.path.exists(target):
        raise SystemExit(f"scg: no fixture or file named {target!r} (fixtures: {', '.join(fx.fixture_names())})")
    try:
        return load_graph(target), {}
    except json.JSONDecodeError as exc:
        raise SystemExit(f"scg: {target}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except (GraphError, KeyError) as exc:
        raise SystemExit(f"scg: {target}: {exc}") from None


def _parse_set(text: str) -> tuple[str, list[str]]:
    label, _, members = text.partition("=")
    if not label:
        raise argparse.ArgumentTypeError(f"expected LABEL=a,b,... got {text!r}")
    return label, [m for m in members.split(",") if m]


def cmd_analyze(args) -> int:
    g, registered = _load(args.graph)
    nodes = args.node or list(g.order)
    unknown = [n for n in nodes if n not in g.nodes]
    if unknown:
        print(f"scg: unknown node(s): {', '.join(unknown)}", file=sys.stderr)
        return 2
    extra = dict(args.set or [])
    out = [analysis_report(g, v, {**registered.get(v, {}), **extra}) for v in nodes]
    json.dump(out if len(out) != 1 else out[0], sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_estimate(args) -> int:
    try:
        if args.builtin:
            cfg = experiment.builtin_config(args.config)
        else:
            cfg = experiment.load_config(args.config)
        if args.samples is not None:
            cfg["samples"] = args.samples
        if args.seed is not None:
            cfg["seed"] = args.seed
        rows, ok = experiment.run_experiment(cfg)
    except experiment.ConfigError as exc:
        print(f"scg: config error: {exc}", file=sys.stderr)
        return 2
    except InvalidSpec as exc:
        print(f"scg: estimator refused: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"scg: {exc}", file=sys.stderr)
        return 2
    out = args.output or cfg.get("output")
    if out and out.endswith(".json"):
        text = json.dumps([asdict(r) for r in rows], indent=2) + "\n"
    else:
        text = experiment.rows_to_csv(rows)
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    failed = [f"{r.id}/{r.param}" for r in rows if r.gate is False]
    if failed:
        print(f"scg: unbiasedness gate failed for {', '.join(failed)}", file=sys.stderr)
    return 0 if ok else 1


def cmd_verify(args) -> int:
    if args.list:
        for cid, title, _ in acceptance.CRITERIA:
            print(f"{cid} {title}")
        return 0
    ids = args.only or [cid for cid, _, _ in acceptance.CRITERIA]
    known = {cid for cid, _, _ in acceptance.CRITERIA}
    bad = [i for i in ids if i not in known]
    if bad:
        print(f"scg: unknown criterion id(s): {', '.join(bad)}", file=sys.stderr)
        return 2
    results = []
    for cid in ids:
        r = acceptance.run_criterion(cid)
        print(r.line(), flush=True)
        results.append(r)
    return 0 if all(r.passed for r in results) else 1


def cmd_fixtures(args) -> int:
    if args.dump:
        if args.dump not in fx.fixture_names():
            print(f"scg: unknown fixture {args.dump!r}", file=sys.stderr)
            return 2
        f = fx.get_fixture(args.dump)
        doc = f.graph.to_json()
        doc["inputs"] = f.inputs
        json.dump(doc, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return 0
    for name in fx.fixture_names():
        f = fx.get_fixture(name)
        print(f"{name}\t{len(f.graph.order)} nodes\tinputs={json.dumps(f.inputs)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="print the set-validity report of graph nodes as JSON")
    a.add_argument("graph", help="graph JSON file or fixture name")
    a.add_argument("--node", action="append", help="node to report on (repeatable; default: every node)")
    a.add_argument("--set", action="append", type=_parse_set, metavar="LABEL=a,b",
                   help="extra conditioning set to judge (repeatable)")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("estimate", help="run an estimator menu; exit 0 iff every unbiasedness gate passes")
    e.add_argument("config", help="experiment config JSON (or a fixture name with --builtin)")
    e.add_argument("-o", "--output", help="output file; .json for JSON rows, otherwise CSV")
    e.add_argument("--builtin", action="store_true", help="use the built-in menu of the named fixture")
    e.add_argument("--samples", type=int)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--list", action="store_true", help="print criterion ids without running")
    v.add_argument("--only", action="append", metavar="ID", help="run only this criterion (repeatable)")
    v.set_defaults(func=cmd_verify)

    f = sub.add_parser("fixtures", help="list fixtures or dump one as graph JSON")
    f.add_argument("--dump", metavar="NAME")
    f.set_defaults(func=cmd_fixtures)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

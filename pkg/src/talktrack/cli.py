"""Command-line surface.

    talktrack train -c run.toml
    talktrack eval -a artifact.json -s scenario.json -n 1000 --seed 7
    talktrack ab -a A.json -b B.json -s scenario.json -n 500
    talktrack ingest <dir-or-file>
    talktrack aggregate <logs> --catalog catalog.json
    talktrack serve -c run.toml --port 8077

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .artifact import PolicyArtifact
from .compliance import load_rules
from .dialogue import load_catalog
from .env import load_scenario, toyshop_paths
from .errors import ConfigError, DataError, DivergenceError, FingerprintMismatchError
from .logs import aggregate as aggregate_logs
from .logs import ingest_dir, ingest_log
from .orchestrate import RunConfig, ab_compare, evaluate, train


def _resolve_world(args):
    scenario_path = toyshop_paths()["scenario"] if args.scenario == "toyshop" else args.scenario
    base = os.path.dirname(os.path.abspath(scenario_path))
    catalog_path = args.catalog or os.path.join(base, "catalog.json")
    rules_path = args.rules or os.path.join(base, "rules.json")
    for name, path in (("scenario", scenario_path), ("catalog", catalog_path), ("rules", rules_path)):
        if not os.path.exists(path):
            raise ConfigError(f"{name} file does not exist: {path}")
    spec = load_scenario(scenario_path)
    catalog = load_catalog(catalog_path)
    rules = load_rules(rules_path, catalog)
    return spec, catalog, rules


def cmd_train(args) -> int:
    config = RunConfig.from_file(args.config)
    result = train(config)
    print(json.dumps(
        {
            "artifact": result.artifact_path,
            "metrics": result.metrics_path,
            "artifact_digest": result.artifact_digest,
            "metrics_digest": result.metrics_digest,
        },
        indent=2, sort_keys=True,
    ))
    return 0


def cmd_eval(args) -> int:
    spec, catalog, rules = _resolve_world(args)
    artifact = PolicyArtifact.load(args.artifact)
    report = evaluate(artifact, spec, catalog, rules, args.n, args.seed)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


def cmd_ab(args) -> int:
    spec, catalog, rules = _resolve_world(args)
    artifact_a = PolicyArtifact.load(args.artifact_a)
    artifact_b = PolicyArtifact.load(args.artifact_b)
    result = ab_compare(artifact_a, artifact_b, spec, catalog, rules, args.n, args.seed)
    print(json.dumps(result.to_json(), indent=2, sort_keys=True))
    return 0


def cmd_ingest(args) -> int:
    report = ingest_dir(args.path) if os.path.isdir(args.path) else ingest_log(args.path)
    print(f"episodes: {len(report.episodes)}")
    print(f"lines:    {report.total_lines}")
    print(f"errors:   {len(report.errors)}")
    for lineno, message in report.errors:
        print(f"  line {lineno}: {message}")
    return 0


def cmd_aggregate(args) -> int:
    ingest = ingest_dir(args.logs) if os.path.isdir(args.logs) else ingest_log(args.logs)
    if ingest.errors:
        for lineno, message in ingest.errors:
            print(f"skipping line {lineno}: {message}", file=sys.stderr)
    catalog_path = args.catalog or toyshop_paths()["catalog"]
    catalog = load_catalog(catalog_path)
    table = aggregate_logs(ingest.episodes, catalog)
    payload = json.dumps(table.to_json(), indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        print(f"wrote {len(table.cells)} cells to {args.output}")
    else:
        print(payload)
    return 0


def cmd_serve(args) -> int:
    from .service import build_service_from_config, run_server

    config = RunConfig.from_file(args.config)
    service = build_service_from_config(config)
    run_server(service, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talktrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy from a run config")
    p.add_argument("-c", "--config", required=True, help="run TOML file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy artifact")
    p.add_argument("-a", "--artifact", required=True)
    p.add_argument("-s", "--scenario", required=True, help="scenario JSON or 'toyshop'")
    p.add_argument("-n", type=int, default=1000, help="number of episodes")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--catalog", help="defaults to catalog.json next to the scenario")
    p.add_argument("--rules", help="defaults to rules.json next to the scenario")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ab", help="A/B-compare two policy artifacts")
    p.add_argument("-a", "--artifact-a", required=True)
    p.add_argument("-b", "--artifact-b", required=True)
    p.add_argument("-s", "--scenario", required=True)
    p.add_argument("-n", type=int, default=500, help="episodes per arm")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--catalog")
    p.add_argument("--rules")
    p.set_defaults(fn=cmd_ab)

    p = sub.add_parser("ingest", help="validate and count episode logs")
    p.add_argument("path", help="JSONL file or directory of *.jsonl files")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("aggregate", help="aggregate episode logs into statistics")
    p.add_argument("logs", help="JSONL file or directory")
    p.add_argument("--catalog", help="catalog JSON (defaults to the bundled toyshop catalog)")
    p.add_argument("-o", "--output", help="write the table to a file instead of stdout")
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("serve", help="run the labeling and chat service")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--port", type=int, default=8077)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FingerprintMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

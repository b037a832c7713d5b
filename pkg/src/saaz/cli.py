"""Command-line front end: run scenarios, replay traces, lint policies."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from .config import load_config
from .errors import ConfigError, SaazError, UnknownScenario
from .policy import lint, load_policy
from .sim import Scenario, Simulator, assert_outcome, load_scenario, read_trace, scenario_names

logger = logging.getLogger("saaz")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _execute(scenario: Scenario, args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outcome = Simulator(scenario, cfg, args.seed, controller=not args.no_controller).run()
    results = assert_outcome(outcome, scenario.expectations)
    report = outcome.report()
    report["digest"] = outcome.digest()
    report["expectations"] = [{"kind": r.kind, "ok": r.ok, "detail": r.detail} for r in results]
    if args.report:
        write_atomic(args.report, json.dumps(report, indent=1, sort_keys=True) + "\n")
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.kind}: {r.detail}")
    print(f"outcome digest {report['digest']}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except UnknownScenario:
        print(f"unknown scenario {args.scenario!r}; known: {', '.join(scenario_names())}", file=sys.stderr)
        return EXIT_CONFIG
    return _execute(scenario, args)


def cmd_replay(args) -> int:
    try:
        events = read_trace(args.trace)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read trace {args.trace}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    horizon = args.horizon or (max((e.clock for e in events), default=0.0) + 60.0)
    expectations = []
    if args.expect:
        try:
            expectations = json.loads(Path(args.expect).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            print(f"cannot read expectations {args.expect}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    scenario = Scenario(Path(args.trace).stem, "replayed trace", horizon, args.seed, events, expectations,
                        background=args.background)
    return _execute(scenario, args)


def cmd_lint(args) -> int:
    try:
        policy = load_policy(args.policy)
    except (OSError, ValueError, KeyError, TypeError, SaazError) as exc:
        print(f"cannot parse {args.policy}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    diags = lint(policy)
    for d in diags:
        print(d)
    if not diags:
        print(f"{policy.policy_id} v{policy.version}: clean")
    return EXIT_FAIL if diags else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saaz", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=None, help="config path, 'default', or $SAAZ_CONFIG")
        p.add_argument("--seed", type=int, required=True, help="64-bit run seed")
        p.add_argument("--report", help="where to write the outcome report")
        p.add_argument("--no-controller", action="store_true", help="run without the adaptation loop")
        p.add_argument("--verbose", "-v", action="count", default=0)

    run = sub.add_parser("run", help="run a shipped scenario")
    run.add_argument("--scenario", required=True)
    common(run)
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay", help="replay a recorded trace")
    replay.add_argument("--trace", required=True)
    replay.add_argument("--horizon", type=float)
    replay.add_argument("--expect", help="JSON list of expectations")
    replay.add_argument("--background", action="store_true", help="add seeded background traffic")
    common(replay)
    replay.set_defaults(func=cmd_replay)

    lint_p = sub.add_parser("lint", help="lint a policy file")
    lint_p.add_argument("policy")
    lint_p.add_argument("--verbose", "-v", action="count", default=0)
    lint_p.set_defaults(func=cmd_lint)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

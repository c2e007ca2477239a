"""Command line entry point: ``oacp run``, ``oacp check``, ``oacp sweep``.

Exit status is 0 on success, 1 when a trace fails the consistency check,
2 for usage errors (bad flags, unknown scenario, unreadable config) and 3
when a simulation itself fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .harness import PROTOCOLS, SCENARIOS, WorkloadSpec, check_trace, run_experiment, write_csv, write_json
from .simnet import ConfigError, FaultPlan, SimulationAborted, TraceParseError, load_config

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="counter", choices=SCENARIOS)
    p.add_argument("--ops", type=int, default=100)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=5000)
    p.add_argument("--auto-melt", action=argparse.BooleanOptionalAction, default=True,
                   help="replay stashed CvOps after a TOp commits (default); --no-auto-melt discards them")
    p.add_argument("--unoptimized-melt", action="store_true",
                   help="melt followers with explicit Melt/MeltAck messages instead of at commit")
    p.add_argument("--latency-config", metavar="PATH|three-site",
                   help="JSON file with regions and rtt_ms, or 'three-site' for the built-in Ohio, London and Sydney matrix")
    p.add_argument("--client-region")
    p.add_argument("--leader", help="server that should win the first election, e.g. s1")
    p.add_argument("--fault-plan", metavar="PATH", help="JSON file with crashes, recoveries, partitions")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oacp", description="Simulate OACP and comparison protocols.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment")
    _add_spec_flags(run)
    run.add_argument("--protocol", default="oacp", choices=PROTOCOLS)
    run.add_argument("--o2acp", action="store_true", help="shorthand for --protocol o2acp")
    run.add_argument("--nodes", type=int, default=3)
    run.add_argument("--cv-ratio", type=float, default=0.5)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", metavar="DIR", help="write trace.jsonl, report.json and report.csv here")
    run.add_argument("--check", action="store_true", help="also check the trace and exit 1 on violation")

    check = sub.add_parser("check", help="check a trace file for observable atomic consistency")
    check.add_argument("trace")

    sweep = sub.add_parser("sweep", help="run a grid of experiments and write one CSV row per run")
    _add_spec_flags(sweep)
    sweep.add_argument("--protocols", default="oacp", help="comma-separated protocol names")
    sweep.add_argument("--nodes", type=_ints, default=[3], help="comma-separated cluster sizes")
    sweep.add_argument("--cv-ratios", type=_floats, help="comma-separated ratios; overrides the range flags")
    sweep.add_argument("--cv-from", type=float, default=0.0)
    sweep.add_argument("--cv-to", type=float, default=1.0)
    sweep.add_argument("--cv-step", type=float, default=0.1)
    sweep.add_argument("--seeds", type=_ints, default=[0], help="comma-separated seeds")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel simulations")
    sweep.add_argument("--out", required=True, metavar="CSV")
    return parser


def _latency(arg: str | None):
    if arg is None or arg == "three-site":
        return arg, {}
    try:
        cfg = load_config(arg)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read latency config {arg}: {e}") from None
    return {k: cfg[k] for k in ("regions", "rtt_ms", "client_region") if k in cfg}, cfg


def _faults(arg: str | None, cfg: dict) -> FaultPlan | None:
    if arg is None:
        return FaultPlan.from_dict(cfg["faults"]) if "faults" in cfg else None
    try:
        return FaultPlan.from_dict(json.loads(Path(arg).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise UsageError(f"cannot read fault plan {arg}: {e}") from None


def _base_spec(args) -> WorkloadSpec:
    latency, cfg = _latency(args.latency_config)
    return WorkloadSpec(
        scenario=args.scenario,
        ops=args.ops,
        clients=args.clients,
        batch_size=args.batch_size,
        auto_melt=args.auto_melt,
        optimized_melt=not args.unoptimized_melt,
        latency=latency,
        client_region=args.client_region,
        leader=args.leader,
        faults=_faults(args.fault_plan, cfg),
        jitter=float(cfg.get("jitter", 0.0)),
    )


def _cmd_run(args) -> int:
    protocol = "o2acp" if args.o2acp else args.protocol
    spec = replace(_base_spec(args), protocol=protocol, nodes=args.nodes, cv_ratio=args.cv_ratio, seed=args.seed)
    trace = None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        trace = out / "trace.jsonl"
    result = run_experiment(spec, trace_path=trace)
    print(json.dumps(result.report.summary(), sort_keys=True))
    if args.out:
        write_json(result.report, out / "report.json")
        write_csv([result.report], out / "report.csv")
    if args.check:
        verdict = result.check()
        print(verdict.text())
        return EXIT_OK if verdict else EXIT_CHECK
    return EXIT_OK


def _cmd_check(args) -> int:
    try:
        verdict = check_trace(args.trace)
    except OSError as e:
        raise UsageError(f"cannot read trace {args.trace}: {e}") from None
    print(verdict.text())
    return EXIT_OK if verdict else EXIT_CHECK


def _sweep_ratios(args) -> list[float]:
    if args.cv_ratios:
        return args.cv_ratios
    if args.cv_step <= 0:
        raise UsageError("--cv-step must be positive")
    out, k = [], 0
    while True:
        r = round(args.cv_from + k * args.cv_step, 10)
        if r > args.cv_to + 1e-9:
            return out
        out.append(r)
        k += 1


def _run_one(spec: WorkloadSpec):
    return run_experiment(spec).report


def _cmd_sweep(args) -> int:
    base = _base_spec(args)
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    specs = [
        replace(base, protocol=p, nodes=n, cv_ratio=r, seed=s)
        for p in protocols
        for n in args.nodes
        for r in _sweep_ratios(args)
        for s in args.seeds
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_run_one, specs))
    else:
        reports = [_run_one(s) for s in specs]
    write_csv(reports, args.out)
    print(f"wrote {len(reports)} rows to {args.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return {"run": _cmd_run, "check": _cmd_check, "sweep": _cmd_sweep}[args.command](args)
    except (UsageError, ConfigError, TraceParseError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationAborted as e:
        print(f"simulation failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

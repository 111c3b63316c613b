"""Command-line entry point.

Subcommands: run (execute experiments against a target and report),
diff (compare two behavior profiles, live or documented), serve (start
the bundled reference broker), corpus (inspect the built-in corpus).

Every flag with an environment twin reads it as its default:
MQTTPROBE_TARGET, MQTTPROBE_FORMAT, MQTTPROBE_SETTLE_MS,
MQTTPROBE_FAIL_ON, MQTTPROBE_HOST, MQTTPROBE_PORT.

Exit codes: 0 clean, 1 local error (unreachable target, bad arguments,
bind failure), 2 anomalies at or above the --fail-on threshold.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

from . import __version__, oracle, profiles, refbroker, runner
from .corpus import builtin_corpus, corpus_by_name, corpus_hash
from .experiment import Experiment, ExperimentError, parse_experiment, render_experiment
from .oracle import (
    SEVERITY_BY_CODE,
    BehaviorProfile,
    NoOverlapError,
    Severity,
    diff_profiles,
    evaluate_trace,
    fingerprint,
    outcome_to_obj,
    profile_to_obj,
)
from .runner import CorpusResult, Endpoint, RunnerError, probe_liveness, run_corpus

EXIT_CLEAN = 0
EXIT_LOCAL_ERROR = 1
EXIT_ANOMALIES = 2


def _env(name: str, default: str | None = None) -> str | None:
    return os.environ.get(f"MQTTPROBE_{name}", default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mqttprobe",
        description="Differential conformance fuzzer for MQTT 3.1.1 brokers.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run experiments against a broker")
    run_p.add_argument("--target", default=_env("TARGET"),
                       help="broker endpoint as host:port")
    run_p.add_argument("--corpus", action="store_true",
                       help="run the built-in corpus")
    run_p.add_argument("--experiment", action="append", default=[],
                       metavar="FILE", help="experiment JSON file (repeatable)")
    run_p.add_argument("--format", choices=("json", "md"),
                       default=_env("FORMAT", "md"))
    run_p.add_argument("--settle-ms", type=int,
                       default=_int_env("SETTLE_MS"), metavar="MS",
                       help="override every experiment's settle window")
    run_p.add_argument("--fail-on", choices=("warning", "dos", "critical"),
                       default=_env("FAIL_ON", "dos"),
                       help="anomaly severity that makes the exit code 2")
    run_p.add_argument("--label", default=None,
                       help="broker label for the fingerprint (default: target)")
    run_p.add_argument("--output", metavar="FILE",
                       help="also write the report to this file")
    run_p.add_argument("--traces", metavar="DIR",
                       help="write one JSONL trace file per experiment")

    diff_p = sub.add_parser("diff", help="compare two behavior profiles")
    diff_p.add_argument("sources", nargs=2, metavar="SOURCE",
                        help="documented broker label, or host:port of a "
                             "live broker to fingerprint first")
    diff_p.add_argument("--format", choices=("json", "md"),
                        default=_env("FORMAT", "md"))

    serve_p = sub.add_parser("serve", help="run the reference broker")
    serve_p.add_argument("--host", default=_env("HOST", "127.0.0.1"))
    serve_p.add_argument("--port", type=int, default=_int_env("PORT", 1883))

    corpus_p = sub.add_parser("corpus", help="inspect the built-in corpus")
    corpus_p.add_argument("--show", metavar="NAME",
                          help="print one experiment as JSON")
    corpus_p.add_argument("--hash", action="store_true",
                          help="print the corpus hash")
    return parser


def _int_env(name: str, default: int | None = None) -> int | None:
    raw = _env(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        return default


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # Usage problems are local errors; exit 2 is reserved for findings.
        code = exc.code if isinstance(exc.code, int) else 1
        return EXIT_CLEAN if code == 0 else EXIT_LOCAL_ERROR
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "diff":
            return cmd_diff(args)
        if args.command == "serve":
            return cmd_serve(args)
        return cmd_corpus(args)
    except (RunnerError, ExperimentError, NoOverlapError, OSError) as exc:
        print(f"mqttprobe: error: {exc}", file=sys.stderr)
        return EXIT_LOCAL_ERROR


# --- run -------------------------------------------------------------------

def _load_experiments(args: argparse.Namespace) -> list[Experiment]:
    experiments: list[Experiment] = []
    if args.corpus:
        experiments.extend(builtin_corpus())
    for path in args.experiment:
        with open(path, "r", encoding="utf-8") as handle:
            experiments.append(parse_experiment(handle.read()))
    if args.settle_ms is not None:
        experiments = [dataclasses.replace(e, settle_ms=args.settle_ms)
                       for e in experiments]
    return experiments


def cmd_run(args: argparse.Namespace) -> int:
    if not args.target:
        print("mqttprobe: error: --target is required (or MQTTPROBE_TARGET)",
              file=sys.stderr)
        return EXIT_LOCAL_ERROR
    experiments = _load_experiments(args)
    if not experiments:
        print("mqttprobe: error: nothing to run; pass --corpus or --experiment",
              file=sys.stderr)
        return EXIT_LOCAL_ERROR
    endpoint = Endpoint.parse(args.target)
    first_probe = probe_liveness(endpoint)
    if not first_probe.alive:
        print(f"mqttprobe: error: target {endpoint.label} is not answering: "
              f"{first_probe.detail}", file=sys.stderr)
        return EXIT_LOCAL_ERROR

    results = run_corpus(experiments, endpoint)
    label = args.label or args.target
    profile = fingerprint(results, broker_label=label)
    if args.traces:
        os.makedirs(args.traces, exist_ok=True)
        for result in results:
            if result.trace is None:
                continue
            path = os.path.join(args.traces, f"{result.experiment.name}.jsonl")
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(runner.trace_to_jsonl(result.trace))

    threshold = Severity.from_label(args.fail_on)
    exit_code = EXIT_ANOMALIES if _worst_severity(profile) >= threshold else EXIT_CLEAN
    if args.format == "json":
        report = _json_report(args.target, results, profile, args.fail_on, exit_code)
    else:
        report = _md_report(label, results, profile)
    print(report, end="")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as handle:
            handle.write(report)
    return exit_code


def _worst_severity(profile: BehaviorProfile) -> Severity:
    worst = Severity.INFO
    for summary in profile.outcomes.values():
        for code in summary.anomalies:
            worst = max(worst, SEVERITY_BY_CODE[code])
    return worst


def _report_meta(target: str) -> dict:
    return {"tool": "mqttprobe", "version": __version__,
            "corpus_hash": corpus_hash(), "target": target,
            "generated_at": time.time()}


def _json_report(target: str, results: list[CorpusResult],
                 profile: BehaviorProfile, fail_on: str, exit_code: int) -> str:
    scenarios = []
    for result in results:
        entry: dict = {"experiment": result.experiment.name,
                       "skipped": result.skipped,
                       "liveness": {"alive": result.liveness.alive,
                                    "detail": result.liveness.detail}}
        if result.trace is not None:
            entry["trace_outcome"] = result.trace.outcome
            if result.trace.outcome != runner.OUTCOME_RUNNER_ERROR:
                outcome = evaluate_trace(result.experiment, result.trace)
                entry["outcome"] = outcome_to_obj(outcome)
        scenarios.append(entry)
    report = _report_meta(target)
    report.update({"fail_on": fail_on, "exit_code": exit_code,
                   "profile": profile_to_obj(profile), "scenarios": scenarios})
    return json.dumps(report, indent=2) + "\n"


def _security_problems(profile: BehaviorProfile) -> str:
    worst = _worst_severity(profile)
    parts = []
    if worst >= Severity.DOS:
        parts.append("Possible denial of service")
    if any(SEVERITY_BY_CODE[code] == Severity.WARNING
           for summary in profile.outcomes.values()
           for code in summary.anomalies):
        parts.append("Possible unwanted application scenarios")
    return " and ".join(parts) + "." if parts else "None observed."


def _md_report(label: str, results: list[CorpusResult],
               profile: BehaviorProfile) -> str:
    meta = _report_meta(label)
    findings = [f"{name}: {', '.join(summary.anomalies)}"
                for name, summary in sorted(profile.outcomes.items())
                if summary.anomalies]
    anomalies_cell = "; ".join(findings) if findings else "none"
    version_cell = profile.version or "-"
    lines = [
        f"# mqttprobe report",
        "",
        f"- tool version: {meta['version']}",
        f"- corpus hash: `{meta['corpus_hash']}`",
        f"- target: {meta['target']}",
        "",
        "| Broker | Anomalies found | Security problems | Version |",
        "| --- | --- | --- | --- |",
        f"| {label} | {anomalies_cell} | {_security_problems(profile)} "
        f"| {version_cell} |",
        "",
        "## Scenario detail",
        "",
    ]
    for result in results:
        name = result.experiment.name
        summary = profile.outcomes.get(name)
        if summary is None:
            continue
        if summary.skipped is not None:
            lines.append(f"- `{name}`: skipped ({summary.skipped})")
            continue
        if result.trace is not None and \
                result.trace.outcome != runner.OUTCOME_RUNNER_ERROR:
            outcome = evaluate_trace(result.experiment, result.trace)
            detail = "; ".join(
                f"{a.code} ({a.severity.label}): {a.explanation}"
                for a in outcome.anomalies) or "clean"
            delivered = len(outcome.delivered)
            lines.append(f"- `{name}`: {detail} "
                         f"[delivered={delivered}, outcome={result.trace.outcome}]")
    return "\n".join(lines) + "\n"


# --- diff ------------------------------------------------------------------

def _resolve_profile(source: str) -> BehaviorProfile:
    """A diff source is a documented broker label or a live host:port."""
    documented = profiles.documented_profiles()
    if source in documented:
        return documented[source]
    endpoint = Endpoint.parse(source)
    probe = probe_liveness(endpoint)
    if not probe.alive:
        raise RunnerError(f"target {endpoint.label} is not answering: "
                          f"{probe.detail}")
    scenario_set = [corpus_by_name()[name]
                    for name in profiles.PROFILED_SCENARIOS]
    results = run_corpus(scenario_set, endpoint)
    return fingerprint(results, broker_label=source)


def cmd_diff(args: argparse.Namespace) -> int:
    a, b = (_resolve_profile(source) for source in args.sources)
    divergences = diff_profiles(a, b)
    if args.format == "json":
        print(json.dumps({
            "tool": "mqttprobe", "version": __version__,
            "profile_a": a.broker_label, "profile_b": b.broker_label,
            "divergences": [{"scenario": name, "detail": text}
                            for name, text in divergences]}, indent=2))
    else:
        print(f"# profile diff: {a.broker_label} vs {b.broker_label}")
        if not divergences:
            print("no divergences")
        for name, text in divergences:
            print(f"- `{name}`: {text}")
    return EXIT_CLEAN


# --- serve / corpus --------------------------------------------------------

def cmd_serve(args: argparse.Namespace) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        broker = refbroker.serve(host=args.host, port=args.port)
    except refbroker.BrokerBindError as exc:
        print(f"mqttprobe: error: {exc}", file=sys.stderr)
        return EXIT_LOCAL_ERROR
    print(f"mqttprobe: reference broker listening on "
          f"{args.host}:{broker.port}", file=sys.stderr, flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return EXIT_CLEAN


def cmd_corpus(args: argparse.Namespace) -> int:
    if args.hash:
        print(corpus_hash())
        return EXIT_CLEAN
    if args.show:
        by_name = corpus_by_name()
        if args.show not in by_name:
            print(f"mqttprobe: error: no corpus experiment {args.show!r}",
                  file=sys.stderr)
            return EXIT_LOCAL_ERROR
        print(render_experiment(by_name[args.show]))
        return EXIT_CLEAN
    for experiment in builtin_corpus():
        print(f"{experiment.name}: {experiment.description}")
    return EXIT_CLEAN


if __name__ == "__main__":
    sys.exit(main())

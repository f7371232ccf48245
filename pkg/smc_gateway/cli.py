"""
Scenario runner.

    python -m smc_gateway --scenario scenarios/smoke.json --out out/smoke
    python -m smc_gateway --scenario scenarios/smoke.json --verify-only out/smoke/transcript.jsonl

Exit status is 0 when every invariant check passes, 1 when one fails and 2
when the scenario cannot be loaded.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .canonical import canonical_dumps
from .checks import CheckReport, run_checks, verify_transcript
from .config import configure_logging
from .errors import ConfigError
from .scenario import Deployment, ResultRecord, Scenario

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smc_gateway", description="Run a privacy-preserving aggregation scenario")
    parser.add_argument("--scenario", required=True, type=Path, help="Scenario file (canonical JSON)")
    parser.add_argument("--transport", choices=["sim", "socket"], default=None,
                        help="Override the scenario's transport")
    parser.add_argument("--seed", type=int, default=None, help="Override the scenario's seed")
    parser.add_argument("--out", type=Path, default=Path("out"), help="Artifact directory (default: out)")
    parser.add_argument("--verify-only", type=Path, default=None, metavar="TRANSCRIPT",
                        help="Only run the invariant checks on an exported transcript")
    parser.add_argument("--deadline", type=float, default=30.0,
                        help="Wall-clock seconds for socket runs (default: 30)")
    parser.add_argument("--log-level", default=None, help="Logging level (default: SMC_LOG_LEVEL or INFO)")
    return parser


def run_scenario(scenario: Scenario, out: Path, transport: Optional[str] = None,
                 seed: Optional[int] = None, deadline: float = 30.0) -> tuple[list[ResultRecord], CheckReport]:
    """Run a scenario, write results, transcript and report, and return them."""
    transport = transport or scenario.transport
    deployment = Deployment(scenario, out_dir=out, seed=seed).build(transport)
    if transport == "sim":
        results = deployment.run()
    else:
        results = asyncio.run(deployment.run_socket(deadline))
    deployment.write_artifacts(out)

    logs = {source_id: log.records() for source_id, log in deployment.logs.items()}
    report = run_checks(deployment.network.transcript, scenario, deployment.gateway.codec, logs)
    report.requests = [{"request_id": r.request_id, "outcome": r.outcome, "restart_count": r.restarts}
                       for r in results]
    _write_report(report, out)
    return results, report


def _write_report(report: CheckReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(canonical_dumps(report.model_dump(mode="json")) + "\n", encoding="ascii")


def format_table(results: Sequence[ResultRecord]) -> str:
    rows = [("request", "outcome", "value", "contributors", "restarts", "error")]
    for r in results:
        rows.append((r.request_id, r.outcome, "" if r.value is None else f"{r.value:g}",
                     "" if r.contributors is None else str(r.contributors), str(r.restarts),
                     (r.error or {}).get("error", "")))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows)


def format_checks(report: CheckReport) -> str:
    lines = [f"transcript sha256 {report.transcript_sha256} ({report.frames} frames)"]
    for name, result in report.checks.items():
        lines.append(f"{'PASS' if result.passed else 'FAIL'}  {name}")
        for v in result.violations:
            where = f"frame {v.index}: " if v.index is not None else ""
            lines.append(f"      {where}{v.detail}")
    return "\n".join(lines)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        scenario = Scenario.load(args.scenario)
        if args.verify_only is not None:
            report = verify_transcript(args.verify_only, args.scenario)
            _write_report(report, args.out)
            print(format_checks(report))
            return 0 if report.passed else 1
        results, report = run_scenario(scenario, args.out, args.transport, args.seed, args.deadline)
    except ConfigError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return 2

    print(format_table(results))
    print()
    print(format_checks(report))
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())

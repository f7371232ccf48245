"""
Invariant checks over a run's transcript and transparency logs.

The CLI report and the test suite call the same functions.
"""

import json
import logging
from collections import Counter
from pathlib import Path
from typing import Any, Iterator, Optional

from pydantic import BaseModel

from .datarequest import DataRequest
from .errors import ConfigError, MalformedRequest, OutOfRange
from .field import FixedPointCodec, encode_fixed
from .protocol import MessageKind
from .scenario import Scenario
from .source import TransparencyLog, TransparencyRecord
from .transport import DELIVERED, Transcript, TranscriptEntry

logger = logging.getLogger(__name__)

REFUSALS = {"AuthFailed", "AccessDenied"}


class Violation(BaseModel):
    index: Optional[int] = None
    detail: str


class CheckResult(BaseModel):
    passed: bool
    violations: list[Violation] = []


class CheckReport(BaseModel):
    transcript_sha256: str
    frames: int
    checks: dict[str, CheckResult]
    requests: list[dict[str, Any]] = []

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())


def _result(violations: list[Violation]) -> CheckResult:
    return CheckResult(passed=not violations, violations=violations)


def _frame(entry: TranscriptEntry) -> Optional[dict]:
    try:
        obj = json.loads(entry.frame)
    except ValueError:
        return None
    return obj if isinstance(obj, dict) else None


def _leaves(value: Any) -> Iterator[Any]:
    if isinstance(value, dict):
        for item in value.values():
            yield from _leaves(item)
    elif isinstance(value, list):
        for item in value:
            yield from _leaves(item)
    else:
        yield value


def _announced_spec(entry: TranscriptEntry) -> Optional[dict]:
    frame = _frame(entry)
    if frame is None or frame.get("kind") != MessageKind.ANNOUNCE.value:
        return None
    spec = frame.get("payload", {}).get("spec")
    return spec if isinstance(spec, dict) else None


def _request_texts(transcript: Transcript, gateway: str) -> dict[str, list[str]]:
    texts: dict[str, list[str]] = {}
    for _, entry in transcript.addressed_to(gateway):
        frame = _frame(entry)
        if frame is None or frame.get("kind") != MessageKind.REQUEST.value:
            continue
        text = frame.get("payload", {}).get("request")
        try:
            request_id = DataRequest.parse(text).request_id
        except (MalformedRequest, TypeError):
            continue
        texts.setdefault(request_id, []).append(text)
    return texts


# ============= CHECKS =============

def check_blindness(transcript: Transcript, scenario: Scenario, codec: FixedPointCodec) -> CheckResult:
    """No gateway-bound payload carries the field encoding of any scripted reading."""
    encodings: dict[str, str] = {}
    for source in scenario.sources:
        for reading in source.readings:
            try:
                encodings[encode_fixed(reading.value, codec).to_wire()] = f"{source.id}@{reading.time}"
            except OutOfRange:
                continue
    violations = []
    for index, entry in transcript.addressed_to(scenario.gateway):
        frame = _frame(entry)
        if frame is None:
            continue
        for leaf in _leaves(frame.get("payload", {})):
            if isinstance(leaf, str) and leaf in encodings:
                violations.append(Violation(index=index, detail=f"reading {encodings[leaf]} visible to gateway"))
    return _result(violations)


def check_share_routing(transcript: Transcript, scenario: Scenario) -> CheckResult:
    """ShareTransfer frames only ever travel between sources."""
    sources = {s.address for s in scenario.sources}
    violations = []
    for index, entry in transcript.of_kind(MessageKind.SHARE_TRANSFER.value):
        if entry.receiver not in sources or entry.sender not in sources:
            violations.append(Violation(index=index, detail=f"ShareTransfer {entry.sender} -> {entry.receiver}"))
    return _result(violations)


def check_transparency(transcript: Transcript, scenario: Scenario,
                       logs: dict[str, list[TransparencyRecord]]) -> CheckResult:
    """Every source that received an Announce logged exactly one record with the consumer's exact request."""
    requested = _request_texts(transcript, scenario.gateway)
    by_address = {s.address: s.id for s in scenario.sources}
    violations = []
    for index, entry in transcript.of_kind(MessageKind.ANNOUNCE.value):
        if entry.disposition != DELIVERED or entry.receiver not in by_address:
            continue
        spec = _announced_spec(entry)
        if spec is None:
            continue
        source_id = by_address[entry.receiver]
        session_id = spec.get("session_id")
        original = spec.get("original_request")
        if original not in requested.get(spec.get("request_id"), []):
            violations.append(Violation(index=index, detail=f"session {session_id}: forwarded request differs "
                                                            f"from the consumer's bytes"))
        records = [r for r in logs.get(source_id, []) if r.session_id == session_id]
        if len(records) != 1:
            violations.append(Violation(index=index, detail=f"{source_id} holds {len(records)} record(s) "
                                                            f"for session {session_id}"))
        elif records[0].original_request != original:
            violations.append(Violation(index=index, detail=f"{source_id} logged different request bytes "
                                                            f"for session {session_id}"))
    return _result(violations)


def check_fail_closed(transcript: Transcript, scenario: Scenario) -> CheckResult:
    """Requests refused for authentication or authorization never reach a source."""
    refused: set[str] = set()
    answered: set[str] = set()
    for _, entry in transcript.of_kind(MessageKind.ERROR.value):
        payload = (_frame(entry) or {}).get("payload", {})
        (refused if payload.get("error") in REFUSALS else answered).add(payload.get("request_id"))
    for _, entry in transcript.of_kind(MessageKind.RESULT.value):
        payload = (_frame(entry) or {}).get("payload", {})
        if "request_id" in payload:
            answered.add(payload["request_id"])
    refused -= answered

    violations = []
    for index, entry in transcript.of_kind(MessageKind.ANNOUNCE.value):
        spec = _announced_spec(entry)
        if spec is not None and spec.get("request_id") in refused:
            violations.append(Violation(index=index, detail=f"refused request {spec['request_id']} was announced"))
    return _result(violations)


def check_single_result(transcript: Transcript, scenario: Scenario) -> CheckResult:
    """Every completed request produced exactly one consumer-bound Result."""
    consumers = {c.node_address for c in scenario.consumers}
    counts: Counter = Counter()
    first_index: dict[str, int] = {}
    for index, entry in transcript.of_kind(MessageKind.RESULT.value):
        if entry.sender != scenario.gateway or entry.receiver not in consumers:
            continue
        request_id = (_frame(entry) or {}).get("payload", {}).get("request_id")
        counts[request_id] += 1
        first_index.setdefault(request_id, index)
    violations = [Violation(index=first_index[r], detail=f"{n} results for {r}") for r, n in counts.items() if n > 1]
    return _result(violations)


def run_checks(transcript: Transcript, scenario: Scenario, codec: FixedPointCodec,
               logs: Optional[dict[str, list[TransparencyRecord]]] = None) -> CheckReport:
    checks = {
        "blindness": check_blindness(transcript, scenario, codec),
        "share_routing": check_share_routing(transcript, scenario),
        "fail_closed": check_fail_closed(transcript, scenario),
        "single_result": check_single_result(transcript, scenario),
    }
    if logs is not None:
        checks["transparency_completeness"] = check_transparency(transcript, scenario, logs)
    else:
        logger.warning("no transparency logs given, completeness check skipped")
    for name, result in checks.items():
        if not result.passed:
            logger.error(f"check {name} failed with {len(result.violations)} violation(s)")
    return CheckReport(transcript_sha256=transcript.sha256(), frames=len(transcript), checks=checks)


def load_logs(directory: Path) -> Optional[dict[str, list[TransparencyRecord]]]:
    directory = Path(directory)
    if not directory.is_dir():
        return None
    return {path.stem: TransparencyLog(path).records() for path in sorted(directory.glob("*.jsonl"))}


def verify_transcript(transcript_path: Path, scenario_path: Path,
                      logs_dir: Optional[Path] = None) -> CheckReport:
    """Check a previously exported transcript against its scenario."""
    scenario = Scenario.load(scenario_path)
    codec = FixedPointCodec.from_settings(scenario.settings())
    try:
        transcript = Transcript.load(transcript_path)
    except (OSError, ValueError, TypeError) as e:
        raise ConfigError(str(transcript_path), f"cannot load transcript: {e}") from e
    if logs_dir is None:
        logs_dir = Path(transcript_path).parent / "transparency"
    return run_checks(transcript, scenario, codec, load_logs(logs_dir))

"""
Source node.

A source holds sensor readings that never leave it in the clear. It announces
itself until a gateway has set it up, answers session announcements with a
Commit or a Veto according to its local policy, re-shares its reading among
the session's participants and reports only its partial sum to the gateway.
Every session it is asked to join is written to its transparency log.
"""

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Iterable, Literal, Optional, Protocol

from pydantic import BaseModel, ValidationError, model_validator

from .canonical import canonical_dumps
from .config import Settings
from .datarequest import AggregateKind, DataRequest, TimeWindow
from .errors import MalformedRequest, NoLocalData, OutOfRange, PeerTimeout
from .field import FieldElement, Randomness, encode_fixed
from .protocol import (
    MessageKind,
    ProtocolMessage,
    SessionSpec,
    source_accumulate,
    source_prepare_shares,
)
from .transport import Node, TimerHandle

logger = logging.getLogger(__name__)


# ============= METADATA & POLICY =============

class DataTypeInfo(BaseModel):
    name: str
    unit: str = ""
    description: str = ""


class SourceMetadata(BaseModel):
    """What a source tells the gateway during setup."""

    source_id: str
    scope: str = ""
    data_types: list[DataTypeInfo]
    supported_protocols: list[AggregateKind] = list(AggregateKind)

    @model_validator(mode="after")
    def _check_data_types(self) -> "SourceMetadata":
        names = [d.name for d in self.data_types]
        if not names:
            raise ValueError(f"source {self.source_id} offers no data types")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate data type names for {self.source_id}: {names}")
        return self

    def offers(self, data_type: str) -> bool:
        return any(d.name == data_type for d in self.data_types)


class PolicyRule(BaseModel):
    consumer: str = "*"
    purpose: str = "*"
    data_type: str = "*"
    decision: Literal["allow", "deny"]

    def matches(self, request: DataRequest) -> bool:
        return (fnmatchcase(request.consumer_id, self.consumer)
                and fnmatchcase(request.purpose, self.purpose)
                and fnmatchcase(request.data_type, self.data_type))


class SourcePolicy(BaseModel):
    """Ordered glob rules; the first matching rule wins."""

    rules: list[PolicyRule] = []
    default_decision: Literal["allow", "deny"] = "deny"

    def decide(self, request: DataRequest) -> tuple[str, Optional[int]]:
        for index, rule in enumerate(self.rules):
            if rule.matches(request):
                return rule.decision, index
        return self.default_decision, None


@dataclass(frozen=True)
class SourceDecision:
    commit: bool
    reason: str = ""

    @classmethod
    def veto(cls, reason: str) -> "SourceDecision":
        return cls(False, reason)


def evaluate_request(request_text: str, policy: SourcePolicy) -> SourceDecision:
    """Decide on a forwarded consumer request; a pure function of its inputs."""
    try:
        request = DataRequest.parse(request_text)
    except MalformedRequest as e:
        return SourceDecision.veto(f"malformed request: {e.message}")
    decision, rule = policy.decide(request)
    if decision == "allow":
        return SourceDecision(True)
    which = f"rule {rule}" if rule is not None else "default decision"
    return SourceDecision.veto(
        f"{which} denies {request.consumer_id}/{request.purpose}/{request.data_type}")


# ============= TRANSPARENCY LOG =============

class TransparencyRecord(BaseModel):
    timestamp: float
    session_id: str
    original_request: str
    consumer_id: str
    decision: Literal["contributed", "vetoed"]
    reason: str = ""
    result_delivered: bool = False


GENESIS = "0" * 64


class TransparencyLog:
    """
    Append-only, hash-chained log of every session this source was asked to join.

    Request entries are never rewritten; delivery of a result is recorded as a
    separate outcome entry and folded into the record view by ``records()``.
    """

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self._lines: list[str] = []
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._lines = [line for line in self.path.read_text(encoding="ascii").splitlines() if line]

    def _append(self, entry: dict) -> None:
        with self._lock:
            prev = json.loads(self._lines[-1])["entry_hash"] if self._lines else GENESIS
            entry = dict(entry, prev_hash=prev)
            entry["entry_hash"] = hashlib.sha256(canonical_dumps(entry).encode("ascii")).hexdigest()
            line = canonical_dumps(entry)
            self._lines.append(line)
            if self.path:
                with self.path.open("a", encoding="ascii") as f:
                    f.write(line + "\n")

    def append(self, record: TransparencyRecord) -> None:
        self._append({"entry": "request", "record": record.model_dump(mode="json")})

    def mark_delivered(self, session_id: str, timestamp: float) -> None:
        self._append({"entry": "outcome", "session_id": session_id, "timestamp": timestamp,
                      "result_delivered": True})

    def entries(self) -> list[dict]:
        return [json.loads(line) for line in self._lines]

    def records(self) -> list[TransparencyRecord]:
        delivered = {e["session_id"] for e in self.entries() if e["entry"] == "outcome"}
        records = []
        for e in self.entries():
            if e["entry"] == "request":
                record = TransparencyRecord.model_validate(e["record"])
                if record.session_id in delivered:
                    record = record.model_copy(update={"result_delivered": True})
                records.append(record)
        return records

    def records_for(self, session_id: str) -> list[TransparencyRecord]:
        return [r for r in self.records() if r.session_id == session_id]

    def verify_chain(self) -> bool:
        prev = GENESIS
        for line in self._lines:
            entry = json.loads(line)
            claimed = entry.pop("entry_hash", None)
            if entry.get("prev_hash") != prev:
                return False
            if hashlib.sha256(canonical_dumps(entry).encode("ascii")).hexdigest() != claimed:
                return False
            prev = claimed
        return True


# ============= READINGS =============

class Reading(BaseModel):
    data_type: str
    time: float
    value: float


class ReadingProvider(Protocol):
    def reading(self, data_type: str, window: TimeWindow) -> Optional[float]:
        ...


class ScriptedReadings:
    """In-memory readings; the local value for a window is its latest reading."""

    def __init__(self, readings: Iterable[Reading] = ()):
        self.readings = sorted(readings, key=lambda r: r.time)

    def reading(self, data_type: str, window: TimeWindow) -> Optional[float]:
        matching = [r for r in self.readings if r.data_type == data_type and window.contains(r.time)]
        return matching[-1].value if matching else None


class FileReadings(ScriptedReadings):
    """Readings from a JSON-lines file of {data_type, time, value} records."""

    def __init__(self, path: Path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        super().__init__(Reading.model_validate_json(line) for line in lines if line.strip())


# ============= NODE =============

@dataclass
class Participation:
    spec: SessionSpec
    gateway: str
    value: FieldElement
    own_share: Optional[FieldElement] = None
    received: dict[str, FieldElement] = field(default_factory=dict)
    partial_sent: bool = False
    peer_timer: Optional[TimerHandle] = None
    expiry_timer: Optional[TimerHandle] = None

    def cancel_timers(self) -> None:
        for timer in (self.peer_timer, self.expiry_timer):
            if timer is not None:
                timer.cancel()


class SourceNode(Node):
    def __init__(self, address: str, metadata: SourceMetadata, policy: SourcePolicy,
                 readings: ReadingProvider, log: TransparencyLog, settings: Settings,
                 rng: Randomness):
        super().__init__(address)
        self.metadata = metadata
        self.policy = policy
        self.readings = readings
        self.log = log
        self.settings = settings
        self.rng = rng
        self.announces_sent = 0
        self.heartbeats_sent = 0
        self._clear()

    @property
    def source_id(self) -> str:
        return self.metadata.source_id

    def _clear(self) -> None:
        self.gateway: Optional[str] = None
        self.setup_done = False
        self.last_gateway_contact = 0.0
        self.sessions: dict[str, Participation] = {}
        self._announce_timer: Optional[TimerHandle] = None
        self._heartbeat_timer: Optional[TimerHandle] = None

    def reset(self) -> None:
        logger.info(f"source {self.source_id} restarting, dropping {len(self.sessions)} session(s)")
        self._clear()

    def start(self) -> None:
        self._resume_announcing()

    # -- discovery --

    def announce(self) -> ProtocolMessage:
        message = ProtocolMessage(kind=MessageKind.DISCOVERY_ANNOUNCE, sender=self.source_id,
                                  payload={"source_id": self.source_id, "endpoint": self.address})
        self.broadcast(message)
        self.announces_sent += 1
        return message

    def _resume_announcing(self) -> None:
        if self._announce_timer is not None:
            self._announce_timer.cancel()
        self._announce_tick()

    def _announce_tick(self) -> None:
        if self.setup_done:
            self._announce_timer = None
            return
        self.announce()
        self._announce_timer = self.call_later(self.settings.announce_interval, self._announce_tick)

    def _heartbeat_tick(self) -> None:
        if not self.setup_done:
            return
        if self.now() - self.last_gateway_contact > self.settings.liveness_timeout:
            logger.warning(f"source {self.source_id} lost gateway {self.gateway}, announcing again")
            self.setup_done = False
            self.gateway = None
            self._resume_announcing()
            return
        self.heartbeats_sent += 1
        self.send(self.gateway, ProtocolMessage(kind=MessageKind.HEARTBEAT, sender=self.source_id,
                                                payload={"seq": self.heartbeats_sent}))
        self._heartbeat_timer = self.call_later(self.settings.heartbeat_interval, self._heartbeat_tick)

    def _on_setup(self, sender: str, message: ProtocolMessage) -> None:
        stage = message.payload.get("stage")
        if stage == "request":
            self.send(sender, ProtocolMessage(
                kind=MessageKind.SETUP_METADATA, sender=self.source_id,
                payload={"stage": "metadata", "metadata": self.metadata.model_dump(mode="json")}))
        elif stage == "ack":
            logger.info(f"source {self.source_id} set up with gateway {sender}")
            self.gateway = sender
            self.setup_done = True
            self.last_gateway_contact = self.now()
            if self._announce_timer is not None:
                self._announce_timer.cancel()
                self._announce_timer = None
            if self._heartbeat_timer is not None:
                self._heartbeat_timer.cancel()
            self._heartbeat_timer = self.call_later(self.settings.heartbeat_interval, self._heartbeat_tick)
        elif stage == "reject":
            logger.warning(f"source {self.source_id} rejected by {sender}: {message.payload.get('reason')}")

    # -- sessions --

    def on_message(self, sender: str, message: ProtocolMessage) -> None:
        if self.gateway is not None and sender == self.gateway:
            self.last_gateway_contact = self.now()

        handlers = {
            MessageKind.SETUP_METADATA: self._on_setup,
            MessageKind.ANNOUNCE: self._on_announce,
            MessageKind.EXCHANGE: self._on_exchange,
            MessageKind.SHARE_TRANSFER: self._on_share,
            MessageKind.ABORT: self._on_abort,
            MessageKind.RESULT: self._on_result,
        }
        handler = handlers.get(message.kind)
        if handler is not None:
            handler(sender, message)
        elif message.kind not in (MessageKind.HEARTBEAT, MessageKind.DISCOVERY_ANNOUNCE):
            logger.debug(f"source {self.source_id} ignores {message.kind.value} from {sender}")

    def consider(self, spec: SessionSpec) -> tuple[SourceDecision, str, Optional[FieldElement]]:
        """Decide whether to contribute to a session; returns (decision, consumer, input)."""
        try:
            request = DataRequest.parse(spec.original_request)
        except MalformedRequest as e:
            return SourceDecision.veto(f"malformed request: {e.message}"), "", None
        if not spec.has(self.source_id):
            return SourceDecision.veto("not a participant"), request.consumer_id, None

        selector = spec.data_selector
        if (request.data_type != selector.data_type or request.window != selector.window
                or request.scope != selector.scope or request.aggregate != spec.protocol_id):
            return SourceDecision.veto("session selector does not match the request"), request.consumer_id, None

        decision = evaluate_request(spec.original_request, self.policy)
        if not decision.commit:
            return decision, request.consumer_id, None
        if spec.protocol_id not in self.metadata.supported_protocols:
            return SourceDecision.veto(f"protocol {spec.protocol_id.value} unsupported"), request.consumer_id, None

        reading = self.readings.reading(selector.data_type, selector.window)
        if reading is None:
            err = NoLocalData(f"no {selector.data_type} reading in window")
            return SourceDecision.veto(err.message), request.consumer_id, None
        if spec.protocol_id == AggregateKind.COUNT:
            return decision, request.consumer_id, FieldElement(1, spec.codec.modulus)
        try:
            return decision, request.consumer_id, encode_fixed(reading, spec.codec)
        except OutOfRange as e:
            return SourceDecision.veto(e.message), request.consumer_id, None

    def _on_announce(self, sender: str, message: ProtocolMessage) -> None:
        if message.session_id in self.sessions:
            return
        raw = message.payload.get("spec") or {}
        try:
            spec = SessionSpec.model_validate(raw)
        except ValidationError:
            spec = None

        if spec is None:
            decision, consumer, value = SourceDecision.veto("malformed session spec"), "", None
            original = str(raw.get("original_request", "")) if isinstance(raw, dict) else ""
        else:
            decision, consumer, value = self.consider(spec)
            original = spec.original_request

        self.log.append(TransparencyRecord(
            timestamp=self.now(), session_id=message.session_id or "", original_request=original,
            consumer_id=consumer, decision="contributed" if decision.commit else "vetoed",
            reason=decision.reason))

        if decision.commit:
            part = Participation(spec=spec, gateway=sender, value=value)
            part.expiry_timer = self.call_later(self.session_lifetime, lambda: self._expire(spec.session_id))
            self.sessions[spec.session_id] = part
            self.send(sender, ProtocolMessage(kind=MessageKind.COMMIT, session_id=spec.session_id,
                                              sender=self.source_id))
        else:
            logger.warning(f"source {self.source_id} vetoes session {message.session_id}: {decision.reason}")
            self.send(sender, ProtocolMessage(kind=MessageKind.VETO, session_id=message.session_id,
                                              sender=self.source_id, payload={"reason": decision.reason}))

    def _on_exchange(self, sender: str, message: ProtocolMessage) -> None:
        part = self.sessions.get(message.session_id)
        if part is not None and part.gateway == sender:
            self.participate(message.session_id)

    def participate(self, session_id: str) -> None:
        """Send a share to every peer, then wait for theirs."""
        part = self.sessions.get(session_id)
        if part is None or part.own_share is not None:
            return
        shares = source_prepare_shares(part.value, part.spec, self.source_id, self.rng)
        part.own_share = shares[self.source_id]
        for party_id, share in shares.items():
            if party_id == self.source_id:
                continue
            self.send(part.spec.endpoint_of(party_id), ProtocolMessage(
                kind=MessageKind.SHARE_TRANSFER, session_id=session_id, sender=self.source_id,
                payload={"share": share.to_wire()}))
        part.peer_timer = self.call_later(self.settings.exchange_timeout,
                                          lambda: self._on_peer_timeout(session_id))
        self._try_finish(part)

    def _on_share(self, sender: str, message: ProtocolMessage) -> None:
        part = self.sessions.get(message.session_id)
        if part is None:
            logger.debug(f"source {self.source_id} got a share for unknown session {message.session_id}")
            return
        spec = part.spec
        if not spec.has(message.sender) or spec.endpoint_of(message.sender) != sender:
            logger.warning(f"source {self.source_id} ignores share from non-participant {sender}")
            return
        try:
            share = FieldElement.from_wire(message.payload["share"], spec.codec.modulus)
        except ValueError as e:
            logger.warning(f"source {self.source_id} drops share from {message.sender}: {e}")
            return
        part.received[message.sender] = share
        self._try_finish(part)

    def _try_finish(self, part: Participation) -> None:
        if part.own_share is None or part.partial_sent:
            return
        peers = [p for p in part.spec.party_ids() if p != self.source_id]
        if any(p not in part.received for p in peers):
            return
        partial = source_accumulate(part.own_share, [part.received[p] for p in peers], len(peers))
        part.partial_sent = True
        if part.peer_timer is not None:
            part.peer_timer.cancel()
        self.send(part.gateway, ProtocolMessage(kind=MessageKind.PARTIAL_SUM, session_id=part.spec.session_id,
                                                sender=self.source_id, payload={"partial": partial.to_wire()}))

    def _on_peer_timeout(self, session_id: str) -> None:
        part = self.sessions.get(session_id)
        if part is None or part.partial_sent:
            return
        err = PeerTimeout(p for p in part.spec.party_ids() if p != self.source_id and p not in part.received)
        logger.warning(f"source {self.source_id} session {session_id}: {err.message}")
        self.send(part.gateway, ProtocolMessage(
            kind=MessageKind.ABORT, session_id=session_id, sender=self.source_id,
            payload={"reason": "peer_timeout", "missing": err.details["missing"]}))

    @property
    def session_lifetime(self) -> float:
        """Longest a session can stay open at the gateway, plus one liveness timeout."""
        s = self.settings
        return s.commit_timeout + s.partial_timeout + s.liveness_timeout

    def _from_session_gateway(self, sender: str, message: ProtocolMessage) -> Optional[Participation]:
        part = self.sessions.get(message.session_id)
        if part is None:
            return None
        if part.gateway != sender:
            logger.warning(f"source {self.source_id} ignores {message.kind.value} for session "
                           f"{message.session_id} from {sender}")
            return None
        del self.sessions[message.session_id]
        part.cancel_timers()
        return part

    def _on_abort(self, sender: str, message: ProtocolMessage) -> None:
        if self._from_session_gateway(sender, message) is not None:
            logger.info(f"source {self.source_id} discards session {message.session_id}: "
                        f"{message.payload.get('reason')}")

    def _on_result(self, sender: str, message: ProtocolMessage) -> None:
        if self._from_session_gateway(sender, message) is not None:
            self.log.mark_delivered(message.session_id, self.now())

    def _expire(self, session_id: str) -> None:
        part = self.sessions.pop(session_id, None)
        if part is not None:
            part.cancel_timers()
            logger.warning(f"source {self.source_id} gives up on session {session_id}: "
                           f"nothing from {part.gateway} in {self.session_lifetime:g}s")

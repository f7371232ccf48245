"""
Gateway node.

The gateway replaces a data-collecting middleware. It keeps a metadata
directory of live sources, authenticates consumer requests, checks them
against the access control list, plans SMC sessions among matching sources
and drives them to completion, restarting with fewer sources when one fails.
It never holds a share and only ever sees partial sums.
"""

import logging
from dataclasses import dataclass
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Any, Iterable, Literal, Optional

from pydantic import BaseModel, ValidationError

from .config import Settings
from .datarequest import AccessControlList, ConsumerKeyring, DataRequest
from .errors import (
    ConfigError,
    DecodeOverflow,
    Implausible,
    InsufficientSources,
    MalformedRequest,
    SessionFailed,
    SetupTimeout,
    SmcError,
    Timeout,
    Vetoed,
)
from .field import FieldElement, FixedPointCodec, Randomness
from .protocol import (
    AggregateResult,
    DataSelector,
    MessageKind,
    Participant,
    ProtocolMessage,
    SessionPhase,
    SessionSpec,
    SessionState,
    gateway_combine,
)
from .source import SourceMetadata
from .transport import Node, TimerHandle

logger = logging.getLogger(__name__)


# ============= METADATA DIRECTORY =============

@dataclass
class DirectoryEntry:
    metadata: SourceMetadata
    endpoint: str
    last_seen: float
    dead: bool = False

    @property
    def source_id(self) -> str:
        return self.metadata.source_id


class MetadataDirectory:
    """Live sources, what they offer, and where to reach them."""

    def __init__(self, liveness_timeout: float):
        self.liveness_timeout = liveness_timeout
        self.entries: dict[str, DirectoryEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, source_id: str) -> Optional[DirectoryEntry]:
        return self.entries.get(source_id)

    def is_live(self, source_id: str, now: float) -> bool:
        entry = self.entries.get(source_id)
        return entry is not None and not entry.dead and now - entry.last_seen <= self.liveness_timeout

    def register(self, metadata: SourceMetadata, endpoint: str, now: float) -> None:
        self.entries[metadata.source_id] = DirectoryEntry(metadata, endpoint, now)

    def touch(self, source_id: str, endpoint: str, now: float) -> bool:
        entry = self.entries.get(source_id)
        if entry is None or entry.endpoint != endpoint:
            return False
        entry.last_seen = now
        entry.dead = False
        return True

    def mark_dead(self, source_id: str) -> None:
        entry = self.entries.get(source_id)
        if entry is not None:
            entry.dead = True

    def live(self, now: float) -> list[DirectoryEntry]:
        return [e for _, e in sorted(self.entries.items()) if self.is_live(e.source_id, now)]

    def matching(self, data_type: str, scope: str, now: float) -> list[DirectoryEntry]:
        return [e for e in self.live(now)
                if e.metadata.offers(data_type) and fnmatchcase(e.metadata.scope, scope)]

    def listing(self, now: float, data_type: Optional[str] = None, scope: Optional[str] = None) -> dict[str, Any]:
        """Consumer-facing projection: data types, scopes and aggregates; never identities."""
        listing: dict[str, dict[str, set[str]]] = {}
        for entry in self.live(now):
            if scope is not None and not fnmatchcase(entry.metadata.scope, scope):
                continue
            for info in entry.metadata.data_types:
                if data_type is not None and info.name != data_type:
                    continue
                item = listing.setdefault(info.name, {"scopes": set(), "aggregates": set(), "units": set()})
                if entry.metadata.scope:
                    item["scopes"].add(entry.metadata.scope)
                item["aggregates"].update(a.value for a in entry.metadata.supported_protocols)
                if info.unit:
                    item["units"].add(info.unit)
        return {name: {key: sorted(values) for key, values in item.items()}
                for name, item in sorted(listing.items())}


# ============= OUTCOMES =============

class SessionOutcome(BaseModel):
    """Operator-side ledger entry for one consumer request."""

    request_id: str
    consumer: str
    status: Literal["completed", "error"]
    result: Optional[AggregateResult] = None
    error: Optional[dict[str, Any]] = None
    restarts: int = 0
    session_ids: list[str] = []
    finished_at: float = 0.0


# ============= SESSION DRIVER =============

class SessionDriver:
    """Owns one request's SessionState across all of its restart attempts."""

    def __init__(self, gateway: "Gateway", spec: SessionSpec, request: DataRequest, consumer: str):
        self.gateway = gateway
        self.spec = spec
        self.request = request
        self.consumer = consumer
        self.state = SessionState(participants=tuple(spec.party_ids()))
        self.session_ids = [spec.session_id]
        self.restarts = 0
        self._timer: Optional[TimerHandle] = None

    def _send_all(self, kind: MessageKind, payload: dict, exclude: Iterable[str] = ()) -> None:
        exclude = set(exclude)
        for p in self.spec.participants:
            if p.party_id not in exclude:
                self.gateway.send(p.endpoint, ProtocolMessage(
                    kind=kind, session_id=self.spec.session_id, sender=self.gateway.address, payload=payload))

    def _arm(self, delay: float, phase: SessionPhase) -> None:
        if self._timer is not None:
            self._timer.cancel()
        self._timer = self.gateway.call_later(delay, lambda: self.on_timeout(phase))

    def _disarm(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def begin(self) -> None:
        self.state.transition(SessionPhase.ANNOUNCED)
        self._announce()

    def _announce(self) -> None:
        logger.info(f"session {self.spec.session_id} for {self.request.request_id}: announcing to "
                    f"{self.spec.party_ids()} (attempt {self.spec.attempt})")
        self._send_all(MessageKind.ANNOUNCE, {"spec": self.spec.model_dump(mode="json")})
        self._arm(self.gateway.settings.commit_timeout, SessionPhase.ANNOUNCED)

    def on_commit(self, party_id: str) -> None:
        if self.state.phase != SessionPhase.ANNOUNCED:
            return
        self.state.record_commit(party_id)
        if self.state.commits != set(self.state.participants):
            return
        self.state.transition(SessionPhase.COMMITTED)
        self._send_all(MessageKind.EXCHANGE, {})
        self.state.transition(SessionPhase.EXCHANGING)
        self._arm(self.gateway.settings.partial_timeout, SessionPhase.EXCHANGING)

    def on_veto(self, party_id: str, reason: str) -> None:
        if self.state.terminal:
            return
        self.state.record_veto(party_id)
        logger.warning(f"session {self.spec.session_id}: {party_id} vetoed ({reason})")
        self._abort(Vetoed(self.state.vetoes, {party_id: reason}), exclude=self.state.vetoes)

    def on_partial(self, party_id: str, partial: FieldElement) -> None:
        if self.state.phase != SessionPhase.EXCHANGING:
            return
        self.state.record_partial(party_id, partial)
        if set(self.state.partials) != set(self.state.participants):
            return
        self._disarm()
        self.state.transition(SessionPhase.COMBINING)
        try:
            result = gateway_combine(self.state.partials, self.spec)
        except DecodeOverflow as e:
            self._abort(SessionFailed(self.restarts, e.code))
            return
        self.state.transition(SessionPhase.COMPLETED)
        logger.info(f"session {self.spec.session_id} for {self.request.request_id} completed "
                    f"with {result.contributors} contributor(s)")
        self._send_all(MessageKind.RESULT, {"status": "completed"})
        self.gateway.deliver_result(self, result)

    def on_failure_report(self, party_id: str, missing: Iterable[str]) -> None:
        if self.state.phase != SessionPhase.EXCHANGING:
            return
        failed = set(missing) & set(self.state.participants)
        if failed:
            self._recover(Timeout(SessionPhase.EXCHANGING.value), failed)

    def on_timeout(self, phase: SessionPhase) -> None:
        if self.state.phase != phase:
            return
        if phase == SessionPhase.ANNOUNCED:
            failed = set(self.state.participants) - self.state.commits
        else:
            failed = set(self.state.participants) - set(self.state.partials)
        self._recover(Timeout(phase.value), failed)

    def _recover(self, failure: Timeout, failed: set[str]) -> None:
        self._disarm()
        logger.warning(f"session {self.spec.session_id}: {failure.message}, failed sources {sorted(failed)}")
        self._send_all(MessageKind.ABORT, {"reason": "restart"})
        self.state.transition(SessionPhase.RESTARTING, failure.code)
        try:
            new_spec = self.gateway.recover_session(self.spec, self.state, failure, failed)
        except SessionFailed as e:
            self.state.transition(SessionPhase.ABORTED, e.code)
            logger.error(f"request {self.request.request_id}: {e.message}")
            self.gateway.deliver_error(self, e)
            return
        self.gateway.rekey(self, new_spec)
        self.spec = new_spec
        self.session_ids.append(new_spec.session_id)
        self.restarts += 1
        self.state.reannounce(new_spec.party_ids())
        self._announce()

    def _abort(self, error: SmcError, exclude: Iterable[str] = ()) -> None:
        self._disarm()
        self.state.transition(SessionPhase.ABORTED, error.code)
        self._send_all(MessageKind.ABORT, {"reason": error.code}, exclude=exclude)
        self.gateway.deliver_error(self, error)


# ============= GATEWAY =============

class Gateway(Node):
    def __init__(self, address: str, settings: Settings, keyring: ConsumerKeyring,
                 acl: AccessControlList, rng: Randomness, acl_path: Optional[Path] = None,
                 keys_path: Optional[Path] = None, operators: Iterable[str] = ("operator",)):
        super().__init__(address)
        self.settings = settings
        self.keyring = keyring
        self.acl = acl
        self.rng = rng
        self.acl_path = acl_path
        self.keys_path = keys_path
        self.operators = set(operators)
        self.codec = FixedPointCodec.from_settings(settings)
        self.outcomes: dict[str, SessionOutcome] = {}
        self._clear()

    def _clear(self) -> None:
        self.directory = MetadataDirectory(self.settings.liveness_timeout)
        self.sessions: dict[str, SessionDriver] = {}
        self._pending_setups: dict[str, tuple[str, TimerHandle]] = {}

    def reset(self) -> None:
        logger.info(f"gateway {self.address} restarting with an empty directory")
        self._clear()

    def _new_session_id(self) -> str:
        return f"s-{self.rng.below(1 << 64):016x}"

    def on_message(self, sender: str, message: ProtocolMessage) -> None:
        kind = message.kind
        if kind == MessageKind.DISCOVERY_ANNOUNCE:
            self.handle_announcement(sender, message)
        elif kind == MessageKind.SETUP_METADATA:
            self._on_metadata(sender, message)
        elif kind == MessageKind.HEARTBEAT:
            if self.directory.touch(message.sender, sender, self.now()):
                self.send(sender, ProtocolMessage(kind=MessageKind.HEARTBEAT, sender=self.address,
                                                  payload={"seq": message.payload.get("seq", 0)}))
        elif kind == MessageKind.REQUEST:
            self.handle_request(sender, message)
        elif kind == MessageKind.DIRECTORY_QUERY:
            data_type, scope = message.payload.get("data_type"), message.payload.get("scope")
            if not all(f is None or isinstance(f, str) for f in (data_type, scope)):
                logger.warning(f"gateway answers malformed directory query from {sender} with an empty listing")
                listing = {}
            else:
                listing = self.query_directory(data_type, scope)
            self.send(sender, ProtocolMessage(kind=MessageKind.DIRECTORY_LISTING, sender=self.address,
                                              payload={"listing": listing}))
        elif kind == MessageKind.RELOAD:
            if message.sender in self.operators:
                self.reload()
            else:
                logger.warning(f"gateway ignores reload from {message.sender}")
        elif kind in (MessageKind.COMMIT, MessageKind.VETO, MessageKind.PARTIAL_SUM, MessageKind.ABORT):
            self._on_session_message(sender, message)
        else:
            logger.debug(f"gateway ignores {kind.value} from {sender}")

    # -- discovery --

    def handle_announcement(self, sender: str, message: ProtocolMessage) -> None:
        source_id = message.payload.get("source_id")
        endpoint = message.payload.get("endpoint", sender)
        if not isinstance(source_id, str) or endpoint != sender:
            logger.warning(f"gateway ignores inconsistent announcement from {sender}")
            return
        entry = self.directory.get(source_id)
        if entry is not None and entry.endpoint != endpoint and self.directory.is_live(source_id, self.now()):
            logger.warning(f"gateway rejects {source_id} at {endpoint}: id is live at {entry.endpoint}")
            self.send(endpoint, ProtocolMessage(kind=MessageKind.SETUP_METADATA, sender=self.address,
                                                payload={"stage": "reject", "reason": "duplicate source id"}))
            return
        if endpoint in self._pending_setups:
            return
        timer = self.call_later(self.settings.setup_timeout, lambda: self._setup_timeout(endpoint))
        self._pending_setups[endpoint] = (source_id, timer)
        self.send(endpoint, ProtocolMessage(kind=MessageKind.SETUP_METADATA, sender=self.address,
                                            payload={"stage": "request"}))

    def _setup_timeout(self, endpoint: str) -> None:
        pending = self._pending_setups.pop(endpoint, None)
        if pending is not None:
            err = SetupTimeout(f"no metadata from {pending[0]} at {endpoint}")
            logger.warning(f"gateway: {err.message}")

    def _on_metadata(self, sender: str, message: ProtocolMessage) -> None:
        if message.payload.get("stage") != "metadata":
            return
        pending = self._pending_setups.pop(sender, None)
        if pending is None:
            return
        source_id, timer = pending
        timer.cancel()
        try:
            metadata = SourceMetadata.model_validate(message.payload.get("metadata"))
        except ValidationError as e:
            logger.warning(f"gateway rejects malformed metadata from {sender}: {e}")
            metadata = None
        if metadata is None or metadata.source_id != source_id:
            self.send(sender, ProtocolMessage(kind=MessageKind.SETUP_METADATA, sender=self.address,
                                              payload={"stage": "reject", "reason": "bad metadata"}))
            return
        replaced = self.directory.get(source_id)
        if replaced is not None and replaced.endpoint != sender and self.directory.is_live(source_id, self.now()):
            logger.warning(f"gateway rejects {source_id} at {sender}: id is live at {replaced.endpoint}")
            self.send(sender, ProtocolMessage(kind=MessageKind.SETUP_METADATA, sender=self.address,
                                              payload={"stage": "reject", "reason": "duplicate source id"}))
            return
        self.directory.register(metadata, sender, self.now())
        if replaced is not None and replaced.endpoint != sender:
            logger.info(f"gateway moved {source_id} from {replaced.endpoint} to {sender}")
        else:
            logger.info(f"gateway registered {source_id} at {sender} offering "
                        f"{[d.name for d in metadata.data_types]}")
        self.send(sender, ProtocolMessage(kind=MessageKind.SETUP_METADATA, sender=self.address,
                                          payload={"stage": "ack"}))

    def query_directory(self, data_type: Optional[str] = None, scope: Optional[str] = None) -> dict[str, Any]:
        return self.directory.listing(self.now(), data_type, scope)

    def reload(self) -> None:
        """Re-read the ACL and consumer key files; a broken file keeps the old state."""
        try:
            if self.acl_path:
                self.acl = AccessControlList.load(self.acl_path)
            if self.keys_path:
                self.keyring = ConsumerKeyring.load(self.keys_path)
        except ConfigError as e:
            logger.error(f"gateway reload failed, keeping previous state: {e.message}")
            return
        logger.info(f"gateway reloaded {len(self.acl.grants)} grant(s), {len(self.keyring.keys)} key(s)")

    # -- requests --

    def admit(self, text: str) -> DataRequest:
        """Authenticate, authorize, and sanity-check a request before any source is contacted."""
        request = self.keyring.authenticate(text)
        self.acl.check(request)
        self.check_plausible(request)
        return request

    def check_plausible(self, request: DataRequest) -> None:
        if request.window.degenerate:
            raise Implausible("empty time window")
        offering = [e for e in self.directory.live(self.now()) if e.metadata.offers(request.data_type)]
        if not offering:
            raise Implausible(f"unknown data type {request.data_type}")
        in_scope = [e for e in offering if fnmatchcase(e.metadata.scope, request.scope)]
        if not in_scope:
            raise Implausible(f"unknown scope {request.scope}")
        if not any(request.aggregate in e.metadata.supported_protocols for e in in_scope):
            raise Implausible(f"aggregate {request.aggregate.value} not supported for {request.data_type}")
        if any(d.request.request_id == request.request_id for d in self.sessions.values()):
            raise Implausible(f"request {request.request_id} already in progress")

    def _matching_participants(self, request: DataRequest) -> list[Participant]:
        matches = [e for e in self.directory.matching(request.data_type, request.scope, self.now())
                   if request.aggregate in e.metadata.supported_protocols]
        if len(matches) > self.codec.max_participants:
            logger.info(f"request {request.request_id}: capping {len(matches)} sources at "
                        f"{self.codec.max_participants}")
            matches = matches[:self.codec.max_participants]
        return [Participant(party_id=e.source_id, endpoint=e.endpoint) for e in matches]

    def plan_session(self, request: DataRequest, text: str) -> SessionSpec:
        participants = self._matching_participants(request)
        required = self.settings.min_participants
        if len(participants) < required:
            raise InsufficientSources(len(participants), required)
        return SessionSpec(
            session_id=self._new_session_id(),
            request_id=request.request_id,
            participants=participants,
            data_selector=DataSelector(data_type=request.data_type, scope=request.scope, window=request.window),
            protocol_id=request.aggregate,
            codec=self.codec,
            original_request=text,
            min_participants=required,
        )

    def handle_request(self, sender: str, message: ProtocolMessage) -> None:
        text = message.payload.get("request")
        try:
            if not isinstance(text, str):
                raise MalformedRequest("request frame carries no request text")
            request = self.admit(text)
            spec = self.plan_session(request, text)
        except SmcError as e:
            request_id = e.details.get("request_id") or _peek_request_id(text)
            logger.warning(f"gateway refuses request {request_id} from {sender}: {e.code} {e.message}")
            self._send_error(sender, request_id, e)
            self.outcomes[request_id] = SessionOutcome(request_id=request_id, consumer=sender, status="error",
                                                       error=e.to_payload(), finished_at=self.now())
            return
        self.orchestrate(spec, request, sender)

    def orchestrate(self, spec: SessionSpec, request: DataRequest, consumer: str) -> SessionDriver:
        driver = SessionDriver(self, spec, request, consumer)
        self.sessions[spec.session_id] = driver
        driver.begin()
        return driver

    def recover_session(self, spec: SessionSpec, state: SessionState, failure: SmcError,
                        failed: Iterable[str]) -> SessionSpec:
        """Drop failed sources and re-plan with a fresh session id, or give up."""
        for source_id in failed:
            self.directory.mark_dead(source_id)
        phase = failure.details.get("phase")
        cause = f"{failure.code}({phase})" if phase else failure.code
        if spec.attempt >= self.settings.max_restarts:
            raise SessionFailed(spec.attempt, cause)
        request = DataRequest.parse(spec.original_request)
        participants = self._matching_participants(request)
        if len(participants) < spec.min_participants:
            raise SessionFailed(spec.attempt, cause)
        logger.info(f"request {spec.request_id}: restarting with {[p.party_id for p in participants]}")
        return SessionSpec.model_validate({
            **spec.model_dump(),
            "session_id": self._new_session_id(),
            "participants": [p.model_dump() for p in participants],
            "attempt": spec.attempt + 1,
        })

    def rekey(self, driver: SessionDriver, new_spec: SessionSpec) -> None:
        self.sessions.pop(driver.spec.session_id, None)
        self.sessions[new_spec.session_id] = driver

    def _on_session_message(self, sender: str, message: ProtocolMessage) -> None:
        driver = self.sessions.get(message.session_id or "")
        if driver is None:
            logger.debug(f"gateway ignores {message.kind.value} for inactive session {message.session_id}")
            return
        party = message.sender
        if not driver.spec.has(party) or driver.spec.endpoint_of(party) != sender:
            logger.warning(f"gateway ignores {message.kind.value} from non-participant {sender}")
            return
        if message.kind == MessageKind.COMMIT:
            driver.on_commit(party)
        elif message.kind == MessageKind.VETO:
            driver.on_veto(party, str(message.payload.get("reason", "")))
        elif message.kind == MessageKind.PARTIAL_SUM:
            try:
                partial = FieldElement.from_wire(message.payload["partial"], self.codec.modulus)
            except ValueError as e:
                logger.warning(f"gateway drops partial sum from {party}: {e}")
                return
            driver.on_partial(party, partial)
        elif message.payload.get("reason") == "peer_timeout":
            driver.on_failure_report(party, message.payload.get("missing", []))

    # -- replies --

    def _send_error(self, consumer: str, request_id: str, error: SmcError) -> None:
        self.send(consumer, ProtocolMessage(kind=MessageKind.ERROR, sender=self.address,
                                            payload={"request_id": request_id, **error.to_payload()}))

    def _finish(self, driver: SessionDriver, outcome: SessionOutcome) -> None:
        self.sessions.pop(driver.spec.session_id, None)
        self.outcomes[outcome.request_id] = outcome

    def deliver_result(self, driver: SessionDriver, result: AggregateResult) -> None:
        request_id = driver.request.request_id
        self.send(driver.consumer, ProtocolMessage(
            kind=MessageKind.RESULT, sender=self.address,
            payload={"request_id": request_id, **result.model_dump(mode="json")}))
        self._finish(driver, SessionOutcome(
            request_id=request_id, consumer=driver.consumer, status="completed", result=result,
            restarts=driver.restarts, session_ids=list(driver.session_ids), finished_at=self.now()))

    def deliver_error(self, driver: SessionDriver, error: SmcError) -> None:
        request_id = driver.request.request_id
        self._send_error(driver.consumer, request_id, error)
        self._finish(driver, SessionOutcome(
            request_id=request_id, consumer=driver.consumer, status="error", error=error.to_payload(),
            restarts=driver.restarts, session_ids=list(driver.session_ids), finished_at=self.now()))


def _peek_request_id(text: Any) -> str:
    try:
        return DataRequest.parse(text).request_id
    except (MalformedRequest, TypeError):
        return "?"

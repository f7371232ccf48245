"""
SMC sum-session round functions, the session state machine, and the
newline-delimited wire format.

Sources re-share their inputs among themselves and add up what they hold;
only those partial sums ever reach the gateway.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Sequence

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .canonical import canonical_dumps
from .datarequest import AggregateKind, TimeWindow
from .errors import (
    IllegalTransition,
    IncompletePartials,
    MalformedFrame,
    MissingShares,
    NotParticipant,
    UnknownKind,
)
from .field import (
    FieldElement,
    FixedPointCodec,
    Randomness,
    decode_fixed,
    fe_add,
    fe_sum,
    share_additive,
)

logger = logging.getLogger(__name__)


# ============= MESSAGES =============

class MessageKind(str, Enum):
    ANNOUNCE = "Announce"
    COMMIT = "Commit"
    VETO = "Veto"
    SHARE_TRANSFER = "ShareTransfer"
    PARTIAL_SUM = "PartialSum"
    RESULT = "Result"
    ABORT = "Abort"
    HEARTBEAT = "Heartbeat"
    DISCOVERY_ANNOUNCE = "DiscoveryAnnounce"
    SETUP_METADATA = "SetupMetadata"
    EXCHANGE = "Exchange"
    REQUEST = "Request"
    ERROR = "Error"
    DIRECTORY_QUERY = "DirectoryQuery"
    DIRECTORY_LISTING = "DirectoryListing"
    RELOAD = "Reload"


# payload field holding the single field element of numeric kinds
NUMERIC_PAYLOAD = {
    MessageKind.SHARE_TRANSFER: "share",
    MessageKind.PARTIAL_SUM: "partial",
}

FRAME_FIELDS = {"kind", "session_id", "sender", "payload"}


class ProtocolMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: MessageKind
    session_id: Optional[str] = None
    sender: str
    payload: dict[str, Any] = {}


def encode_message(m: ProtocolMessage) -> bytes:
    """One canonical frame, newline terminated."""
    return (canonical_dumps(m.model_dump(mode="json")) + "\n").encode("ascii")


def decode_message(frame: bytes) -> ProtocolMessage:
    if not frame.endswith(b"\n"):
        raise MalformedFrame("truncated frame: missing terminator")
    body = frame[:-1]
    if b"\n" in body:
        raise MalformedFrame("more than one frame")
    try:
        obj = json.loads(body.decode("ascii"))
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedFrame(f"frame is not canonical JSON: {e}") from e
    if not isinstance(obj, dict) or set(obj) != FRAME_FIELDS:
        raise MalformedFrame(f"frame must have exactly the fields {sorted(FRAME_FIELDS)}")
    if obj["kind"] not in {k.value for k in MessageKind}:
        raise UnknownKind(obj["kind"])
    try:
        message = ProtocolMessage.model_validate(obj)
    except ValidationError as e:
        raise MalformedFrame(str(e)) from e

    numeric = NUMERIC_PAYLOAD.get(message.kind)
    if numeric is not None:
        value = message.payload.get(numeric)
        well_formed = isinstance(value, str) and value.isascii() and value.isdigit()
        if set(message.payload) != {numeric} or not well_formed:
            raise MalformedFrame(f"{message.kind.value} payload must hold exactly one field element")
    return message


# ============= SESSION SPEC =============

class Participant(BaseModel):
    model_config = ConfigDict(frozen=True)

    party_id: str
    endpoint: str


class DataSelector(BaseModel):
    model_config = ConfigDict(frozen=True)

    data_type: str
    scope: str = "*"
    window: TimeWindow


class SessionSpec(BaseModel):
    """Everything the sources need to run one session."""

    model_config = ConfigDict(frozen=True)

    session_id: str
    request_id: str
    participants: list[Participant]
    data_selector: DataSelector
    protocol_id: AggregateKind
    codec: FixedPointCodec
    original_request: str
    min_participants: int = 3
    attempt: int = 0

    @model_validator(mode="after")
    def _check_participants(self) -> "SessionSpec":
        ids = self.party_ids()
        if len(set(ids)) != len(ids):
            raise ValueError(f"participants not distinct: {ids}")
        if self.min_participants < 2:
            raise ValueError("min_participants must be at least 2")
        if len(ids) < self.min_participants:
            raise ValueError(f"{len(ids)} participants, at least {self.min_participants} required")
        return self

    def party_ids(self) -> list[str]:
        return [p.party_id for p in self.participants]

    def endpoint_of(self, party_id: str) -> str:
        for p in self.participants:
            if p.party_id == party_id:
                return p.endpoint
        raise NotParticipant(party_id, self.session_id)

    def has(self, party_id: str) -> bool:
        return any(p.party_id == party_id for p in self.participants)


class AggregateResult(BaseModel):
    aggregate: AggregateKind
    value: float
    contributors: int


# ============= SESSION STATE =============

class SessionPhase(str, Enum):
    PLANNED = "Planned"
    ANNOUNCED = "Announced"
    COMMITTED = "Committed"
    EXCHANGING = "Exchanging"
    COMBINING = "Combining"
    COMPLETED = "Completed"
    ABORTED = "Aborted"
    RESTARTING = "Restarting"


TERMINAL = {SessionPhase.COMPLETED, SessionPhase.ABORTED}

TRANSITIONS = {
    SessionPhase.PLANNED: {SessionPhase.ANNOUNCED},
    SessionPhase.ANNOUNCED: {SessionPhase.COMMITTED, SessionPhase.RESTARTING},
    SessionPhase.COMMITTED: {SessionPhase.EXCHANGING, SessionPhase.RESTARTING},
    SessionPhase.EXCHANGING: {SessionPhase.COMBINING, SessionPhase.RESTARTING},
    SessionPhase.COMBINING: {SessionPhase.COMPLETED},
    SessionPhase.RESTARTING: {SessionPhase.ANNOUNCED},
}


@dataclass
class SessionState:
    """Position of one session; owned and mutated by a single session driver."""

    participants: tuple[str, ...]
    phase: SessionPhase = SessionPhase.PLANNED
    reason: Optional[str] = None
    attempt: int = 0
    commits: set[str] = field(default_factory=set)
    vetoes: set[str] = field(default_factory=set)
    partials: dict[str, FieldElement] = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL

    def can_transition(self, target: SessionPhase) -> bool:
        if target == SessionPhase.ABORTED:
            return not self.terminal
        return target in TRANSITIONS.get(self.phase, set())

    def transition(self, target: SessionPhase, reason: Optional[str] = None) -> None:
        if not self.can_transition(target):
            raise IllegalTransition(self.phase.value, target.value)
        if target == SessionPhase.COMMITTED and self.commits != set(self.participants):
            raise IllegalTransition(self.phase.value, target.value)
        if target == SessionPhase.COMPLETED and set(self.partials) != set(self.participants):
            raise IncompletePartials(set(self.participants) - set(self.partials))
        if target == SessionPhase.RESTARTING:
            self.attempt += 1
        self.phase = target
        self.reason = reason

    def _require_participant(self, party_id: str) -> None:
        if party_id not in self.participants:
            raise NotParticipant(party_id, "")

    def record_commit(self, party_id: str) -> None:
        self._require_participant(party_id)
        self.commits.add(party_id)

    def record_veto(self, party_id: str) -> None:
        self._require_participant(party_id)
        self.vetoes.add(party_id)

    def record_partial(self, party_id: str, partial: FieldElement) -> None:
        self._require_participant(party_id)
        self.partials[party_id] = partial

    def reannounce(self, participants: Sequence[str]) -> None:
        """Restarting -> Announced with a fresh participant set; old progress is discarded."""
        self.transition(SessionPhase.ANNOUNCED)
        self.participants = tuple(participants)
        self.commits = set()
        self.vetoes = set()
        self.partials = {}

    @property
    def label(self) -> str:
        if self.phase == SessionPhase.ABORTED:
            return f"Aborted({self.reason})"
        if self.phase == SessionPhase.RESTARTING:
            return f"Restarting({self.attempt})"
        return self.phase.value


# ============= ROUND FUNCTIONS =============

def source_prepare_shares(value: FieldElement, spec: SessionSpec, party_id: str,
                          rng: Randomness) -> dict[str, FieldElement]:
    """Share this source's input among all participants, in spec order."""
    if not spec.has(party_id):
        raise NotParticipant(party_id, spec.session_id)
    return share_additive(value, spec.party_ids(), rng).as_dict()


def source_accumulate(own_share: FieldElement, received: Sequence[FieldElement],
                      expected_peers: Optional[int] = None) -> FieldElement:
    """The party's partial sum: its own share plus one share from every peer."""
    if expected_peers is None:
        missing = 0 if received else 1
    else:
        missing = expected_peers - len(received)
    if missing > 0 or not received:
        raise MissingShares(max(missing, 1))
    total = own_share
    for share in received:
        total = fe_add(total, share)
    return total


def gateway_combine(partials: Mapping[str, FieldElement], spec: SessionSpec) -> AggregateResult:
    missing = set(spec.party_ids()) - set(partials)
    if missing:
        raise IncompletePartials(missing)
    n = len(spec.participants)
    if spec.protocol_id == AggregateKind.COUNT:
        return AggregateResult(aggregate=spec.protocol_id, value=float(n), contributors=n)

    total = fe_sum((partials[p] for p in spec.party_ids()), spec.codec.modulus)
    decoded = decode_fixed(total, spec.codec)
    if spec.protocol_id == AggregateKind.AVERAGE:
        decoded = decoded / n
    return AggregateResult(aggregate=spec.protocol_id, value=decoded, contributors=n)

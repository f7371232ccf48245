"""
Structured errors.

Every error has a stable ``code`` and a ``details`` dict so that it can be
carried on the wire, written to result files, and mapped onto HTTP statuses
without losing information.
"""

from typing import Any, Iterable, Optional


class SmcError(Exception):
    """Base class of all errors raised by the package."""

    code = "SmcError"

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def to_payload(self) -> dict[str, Any]:
        return {"error": self.code, "message": self.message, "details": self.details}

    @classmethod
    def from_payload(cls, payload: dict[str, Any]) -> "SmcError":
        """Rebuild an error received from the wire."""
        error_cls = ERRORS_BY_CODE.get(payload.get("error", ""), SmcError)
        err = error_cls.__new__(error_cls)
        SmcError.__init__(err, payload.get("message", ""), **payload.get("details", {}))
        return err


# ============= FIELD =============

class OutOfRange(SmcError, ValueError):
    code = "OutOfRange"

    def __init__(self, value: float, half_range: int):
        super().__init__(f"|{value}| exceeds encodable range {half_range}", value=value, half_range=half_range)


class DecodeOverflow(SmcError, ValueError):
    code = "DecodeOverflow"

    def __init__(self, magnitude: int, bound: int):
        super().__init__(f"signed residue magnitude {magnitude} exceeds {bound}", magnitude=magnitude, bound=bound)


class EmptyParticipants(SmcError, ValueError):
    code = "EmptyParticipants"


class EmptyShares(SmcError, ValueError):
    code = "EmptyShares"


# ============= PROTOCOL =============

class NotParticipant(SmcError):
    code = "NotParticipant"

    def __init__(self, party_id: str, session_id: str):
        super().__init__(f"{party_id} is not a participant of {session_id}", party_id=party_id, session_id=session_id)


class MissingShares(SmcError):
    code = "MissingShares"

    def __init__(self, count: int):
        super().__init__(f"{count} share(s) missing", count=count)

    @property
    def count(self) -> int:
        return self.details["count"]


class IncompletePartials(SmcError):
    code = "IncompletePartials"

    def __init__(self, missing: Iterable[str]):
        missing = sorted(missing)
        super().__init__(f"partial sums missing from {missing}", missing=missing)


class MalformedFrame(SmcError, ValueError):
    code = "MalformedFrame"


class UnknownKind(SmcError, ValueError):
    code = "UnknownKind"

    def __init__(self, kind: Any):
        super().__init__(f"unknown message kind {kind!r}", kind=str(kind))


class IllegalTransition(SmcError):
    code = "IllegalTransition"

    def __init__(self, current: str, target: str):
        super().__init__(f"illegal transition {current} -> {target}", current=current, target=target)


# ============= SOURCE =============

class NoLocalData(SmcError):
    code = "NoLocalData"


class PeerTimeout(SmcError):
    code = "PeerTimeout"

    def __init__(self, missing: Iterable[str]):
        missing = sorted(missing)
        super().__init__(f"no share received from {missing}", missing=missing)


class MalformedRequest(SmcError):
    code = "MalformedRequest"


# ============= GATEWAY =============

class AuthFailed(SmcError):
    code = "AuthFailed"


class AccessDenied(SmcError):
    code = "AccessDenied"


class Implausible(SmcError):
    code = "Implausible"

    def __init__(self, reason: str):
        super().__init__(f"implausible request: {reason}", reason=reason)


class InsufficientSources(SmcError):
    code = "InsufficientSources"

    def __init__(self, found: int, required: int):
        super().__init__(f"{found} matching source(s), {required} required", found=found, required=required)


class Vetoed(SmcError):
    code = "Vetoed"

    def __init__(self, parties: Iterable[str], reasons: Optional[dict[str, str]] = None):
        parties = sorted(parties)
        super().__init__(f"vetoed by {parties}", parties=parties, reasons=reasons or {})


class Timeout(SmcError):
    code = "Timeout"

    def __init__(self, phase: str):
        super().__init__(f"timeout in phase {phase}", phase=phase)

    @property
    def phase(self) -> str:
        return self.details["phase"]


class SessionFailed(SmcError):
    code = "SessionFailed"

    def __init__(self, attempts: int, last_cause: str):
        super().__init__(f"session failed after {attempts} restart(s): {last_cause}",
                         attempts=attempts, last_cause=last_cause)


class SetupTimeout(SmcError):
    code = "SetupTimeout"


# ============= TRANSPORT / CLI =============

class UnknownNode(SmcError):
    code = "UnknownNode"

    def __init__(self, address: str):
        super().__init__(f"unknown node {address}", address=address)


class ConfigError(SmcError, ValueError):
    code = "ConfigError"

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}", path=str(path), reason=reason)


ERRORS_BY_CODE: dict[str, type[SmcError]] = {
    cls.code: cls
    for cls in (
        OutOfRange, DecodeOverflow, EmptyParticipants, EmptyShares,
        NotParticipant, MissingShares, IncompletePartials, MalformedFrame, UnknownKind, IllegalTransition,
        NoLocalData, PeerTimeout, MalformedRequest,
        AuthFailed, AccessDenied, Implausible, InsufficientSources, Vetoed, Timeout, SessionFailed,
        SetupTimeout, UnknownNode, ConfigError,
    )
}

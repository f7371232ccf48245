"""
Consumer data requests, their integrity tags, consumer keys and the access
control list the gateway checks requests against.
"""

import hashlib
import hmac
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from .canonical import canonical_dumps
from .errors import AccessDenied, AuthFailed, ConfigError, MalformedRequest

logger = logging.getLogger(__name__)


class AggregateKind(str, Enum):
    SUM = "sum"
    COUNT = "count"
    AVERAGE = "average"


class TimeWindow(BaseModel):
    """Half-open interval [start, end) in deployment seconds."""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    start: float
    end: float

    def contains(self, t: float) -> bool:
        return self.start <= t < self.end

    @property
    def degenerate(self) -> bool:
        return self.end <= self.start


class DataRequest(BaseModel):
    """An authenticated consumer request for one aggregate."""

    model_config = ConfigDict(frozen=True)

    request_id: str
    consumer_id: str
    purpose: str
    aggregate: AggregateKind
    data_type: str
    scope: str = "*"
    window: TimeWindow
    auth_tag: str = ""

    def signing_text(self) -> str:
        """Canonical serialization of every field that precedes the tag."""
        return canonical_dumps(self.model_dump(mode="json", exclude={"auth_tag"}))

    def to_text(self) -> str:
        return canonical_dumps(self.model_dump(mode="json"))

    @classmethod
    def parse(cls, text: str) -> "DataRequest":
        try:
            return cls.model_validate_json(text)
        except (ValidationError, ValueError) as e:
            raise MalformedRequest(f"cannot parse request: {e}") from e


def compute_tag(request: DataRequest, key: str) -> str:
    return hmac.new(key.encode(), request.signing_text().encode(), hashlib.sha256).hexdigest()


def sign_request(request: DataRequest, key: str) -> DataRequest:
    return request.model_copy(update={"auth_tag": compute_tag(request, key)})


def verify_request(request: DataRequest, key: str) -> bool:
    return hmac.compare_digest(request.auth_tag, compute_tag(request, key))


def _read_records(path: Path) -> list[dict]:
    records = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(str(path), f"cannot read: {e}") from e
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except ValueError as e:
            raise ConfigError(str(path), f"line {number}: {e}") from e
    return records


class ConsumerKeyring:
    """Pre-shared per-consumer keys registered at the gateway."""

    def __init__(self, keys: Optional[dict[str, str]] = None):
        self.keys: dict[str, str] = dict(keys or {})

    @classmethod
    def load(cls, path: Path) -> "ConsumerKeyring":
        try:
            return cls({r["consumer_id"]: r["key"] for r in _read_records(path)})
        except KeyError as e:
            raise ConfigError(str(path), f"record without {e}") from e

    def dump(self, path: Path) -> None:
        lines = [canonical_dumps({"consumer_id": c, "key": k}) for c, k in sorted(self.keys.items())]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    def authenticate(self, text: str) -> DataRequest:
        """Parse request text and verify its tag; any byte change fails."""
        try:
            request = DataRequest.parse(text)
        except MalformedRequest as e:
            raise AuthFailed("request does not parse") from e
        if request.to_text() != text:
            raise AuthFailed("request is not in canonical form", request_id=request.request_id)
        key = self.keys.get(request.consumer_id)
        if key is None or not verify_request(request, key):
            raise AuthFailed("auth tag does not verify", request_id=request.request_id,
                             consumer_id=request.consumer_id)
        return request


class Grant(BaseModel):
    model_config = ConfigDict(frozen=True)

    consumer_id: str
    data_type: str
    aggregate: AggregateKind
    purpose: str


class AccessControlList:
    """A request is admissible iff its exact (consumer, data type, aggregate, purpose) is granted."""

    def __init__(self, grants: Iterable[Grant] = ()):
        self.grants: set[Grant] = set(grants)

    @classmethod
    def load(cls, path: Path) -> "AccessControlList":
        try:
            return cls(Grant.model_validate(r) for r in _read_records(path))
        except ValidationError as e:
            raise ConfigError(str(path), str(e)) from e

    def dump(self, path: Path) -> None:
        lines = sorted(canonical_dumps(g.model_dump(mode="json")) for g in self.grants)
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    def admits(self, request: DataRequest) -> bool:
        return Grant(consumer_id=request.consumer_id, data_type=request.data_type,
                     aggregate=request.aggregate, purpose=request.purpose) in self.grants

    def check(self, request: DataRequest) -> None:
        if not self.admits(request):
            raise AccessDenied(f"{request.consumer_id} may not request {request.aggregate.value} of "
                               f"{request.data_type} for {request.purpose}", request_id=request.request_id)

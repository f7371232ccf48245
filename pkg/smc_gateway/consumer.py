"""
Consumer node: signs and issues scheduled data requests, queries the
directory, and records what came back.
"""

import logging
from typing import Any, Iterable, Literal, Optional

from pydantic import BaseModel

from .datarequest import AggregateKind, DataRequest, TimeWindow, sign_request
from .errors import SmcError
from .protocol import AggregateResult, MessageKind, ProtocolMessage
from .transport import Node

logger = logging.getLogger(__name__)


class RequestPlan(BaseModel):
    """A request a consumer issues at a given (virtual) time."""

    at: float = 0.0
    request_id: str
    purpose: str
    aggregate: AggregateKind
    data_type: str
    scope: str = "*"
    window: TimeWindow
    tamper: bool = False

    def build(self, consumer_id: str, key: str) -> str:
        """Canonical signed request text; a tampered plan carries a corrupted tag."""
        request = sign_request(DataRequest(
            request_id=self.request_id, consumer_id=consumer_id, purpose=self.purpose,
            aggregate=self.aggregate, data_type=self.data_type, scope=self.scope, window=self.window,
        ), key)
        if self.tamper:
            request = request.model_copy(update={"auth_tag": corrupt_tag(request.auth_tag)})
        return request.to_text()


def corrupt_tag(tag: str) -> str:
    last = tag[-1:] or "0"
    return tag[:-1] + ("1" if last == "0" else "0")


class ConsumerOutcome(BaseModel):
    request_id: str
    status: Literal["completed", "error"]
    result: Optional[AggregateResult] = None
    error: Optional[dict[str, Any]] = None
    issued_at: Optional[float] = None
    completed_at: float

    def raise_for_error(self) -> AggregateResult:
        if self.status == "error":
            raise SmcError.from_payload(self.error or {})
        return self.result


class ConsumerNode(Node):
    def __init__(self, address: str, consumer_id: str, key: str, gateway: str,
                 plans: Iterable[RequestPlan] = ()):
        super().__init__(address)
        self.consumer_id = consumer_id
        self.key = key
        self.gateway = gateway
        self.plans = list(plans)
        self.issued: dict[str, str] = {}
        self.issued_at: dict[str, float] = {}
        self.outcomes: dict[str, ConsumerOutcome] = {}
        self.listings: list[dict[str, Any]] = []
        self._scheduled = False

    def start(self) -> None:
        if self._scheduled:
            return
        self._scheduled = True
        for plan in self.plans:
            text = plan.build(self.consumer_id, self.key)
            self.call_later(max(0.0, plan.at - self.now()),
                            lambda text=text, rid=plan.request_id: self.submit(text, rid))

    def submit(self, text: str, request_id: str) -> None:
        """Send verbatim request text to the gateway."""
        logger.info(f"consumer {self.consumer_id} issues request {request_id}")
        self.issued[request_id] = text
        self.issued_at[request_id] = self.now()
        self.send(self.gateway, ProtocolMessage(kind=MessageKind.REQUEST, sender=self.address,
                                                payload={"request": text}))

    def query_directory(self, data_type: Optional[str] = None, scope: Optional[str] = None) -> None:
        payload = {k: v for k, v in (("data_type", data_type), ("scope", scope)) if v is not None}
        self.send(self.gateway, ProtocolMessage(kind=MessageKind.DIRECTORY_QUERY, sender=self.address,
                                                payload=payload))

    @property
    def expected(self) -> set[str]:
        return {p.request_id for p in self.plans} | set(self.issued)

    def resolved(self) -> bool:
        return self.expected <= set(self.outcomes)

    def on_message(self, sender: str, message: ProtocolMessage) -> None:
        if sender != self.gateway:
            return
        if message.kind == MessageKind.RESULT:
            request_id = message.payload.get("request_id", "")
            result = AggregateResult.model_validate(
                {k: v for k, v in message.payload.items() if k != "request_id"})
            self._record(ConsumerOutcome(request_id=request_id, status="completed", result=result,
                                         issued_at=self.issued_at.get(request_id), completed_at=self.now()))
        elif message.kind == MessageKind.ERROR:
            request_id = message.payload.get("request_id", "")
            error = {k: v for k, v in message.payload.items() if k != "request_id"}
            self._record(ConsumerOutcome(request_id=request_id, status="error", error=error,
                                         issued_at=self.issued_at.get(request_id), completed_at=self.now()))
        elif message.kind == MessageKind.DIRECTORY_LISTING:
            self.listings.append(message.payload.get("listing", {}))

    def _record(self, outcome: ConsumerOutcome) -> None:
        if outcome.request_id in self.outcomes:
            logger.warning(f"consumer {self.consumer_id}: second answer for {outcome.request_id}")
        self.outcomes[outcome.request_id] = outcome
        logger.info(f"consumer {self.consumer_id}: {outcome.request_id} -> {outcome.status}")

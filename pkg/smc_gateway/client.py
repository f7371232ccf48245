"""
Thin consumer client for the HTTP API.
"""

import logging
import uuid
from typing import Any, Optional

import httpx

from .datarequest import AggregateKind, DataRequest, TimeWindow, sign_request
from .errors import SmcError

logger = logging.getLogger(__name__)


class GatewayClient:
    """Signs data requests as one consumer and sends them to the gateway API."""

    def __init__(self, base_url: str, consumer_id: str, key: str,
                 transport: Optional[httpx.AsyncBaseTransport] = None, timeout: float = 30.0):
        self.consumer_id = consumer_id
        self.key = key
        self._http = httpx.AsyncClient(base_url=base_url, transport=transport, timeout=timeout)

    async def __aenter__(self) -> "GatewayClient":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        await self._http.aclose()

    async def _call(self, method: str, endpoint: str, **kwargs) -> Any:
        try:
            response = await self._http.request(method, endpoint, **kwargs)
            response.raise_for_status()
            return response.json()
        except httpx.HTTPStatusError as e:
            try:
                detail = e.response.json().get("detail", str(e))
            except ValueError:
                detail = str(e)
            if isinstance(detail, dict) and "error" in detail:
                raise SmcError.from_payload(detail) from e
            raise ValueError(f"API Error ({e.response.status_code}): {detail}") from e
        except httpx.HTTPError as e:
            raise ValueError(f"HTTP Error: {e}") from e

    async def health(self) -> dict[str, Any]:
        return await self._call("GET", "/health")

    async def directory(self, data_type: Optional[str] = None, scope: Optional[str] = None) -> dict[str, Any]:
        params = {k: v for k, v in (("data_type", data_type), ("scope", scope)) if v is not None}
        return await self._call("GET", "/directory", params=params)

    def build_request(self, aggregate: AggregateKind | str, data_type: str, purpose: str,
                      start: float, end: float, scope: str = "*",
                      request_id: Optional[str] = None) -> str:
        request = DataRequest(
            request_id=request_id or f"r-{uuid.uuid4().hex[:12]}",
            consumer_id=self.consumer_id,
            purpose=purpose,
            aggregate=AggregateKind(aggregate),
            data_type=data_type,
            scope=scope,
            window=TimeWindow(start=start, end=end),
        )
        return sign_request(request, self.key).to_text()

    async def submit(self, text: str) -> dict[str, Any]:
        """Post verbatim request text; structured gateway errors are re-raised as SmcError."""
        return await self._call("POST", "/requests", content=text.encode("ascii"),
                                headers={"content-type": "application/json"})

    async def request_aggregate(self, aggregate: AggregateKind | str, data_type: str, purpose: str,
                                start: float, end: float, scope: str = "*",
                                request_id: Optional[str] = None) -> dict[str, Any]:
        text = self.build_request(aggregate, data_type, purpose, start, end, scope, request_id)
        logger.info(f"consumer {self.consumer_id} requests {aggregate} of {data_type} for {purpose}")
        return await self.submit(text)

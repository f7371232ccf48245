"""Canonical JSON text shared by the wire format, request signing and log files."""

import json
from typing import Any


def canonical_dumps(obj: Any) -> str:
    """Sorted keys, no whitespace, ASCII only; stable input for HMAC tags and hashes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)

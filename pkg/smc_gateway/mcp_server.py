#!/usr/bin/env python3
"""
MCP server for the gateway API.

Lets an MCP client discover what aggregates are obtainable and request them
as one configured consumer. Requests are signed here and forwarded to the
HTTP API; nothing about sources or sessions is exposed.
"""

import json
import logging
import os
from typing import Optional

from dotenv import load_dotenv
from fastmcp import FastMCP

from .client import GatewayClient
from .config import configure_logging
from .errors import SmcError

# Load environment variables from .env file if it exists
load_dotenv()

# Configuration
API_PORT = os.getenv("API_PORT", "8000")
API_BASE_URL = os.getenv("SMC_API_URL", f"http://localhost:{API_PORT}")
MCP_PORT = int(os.getenv("MCP_PORT", "9010"))
CONSUMER_ID = os.getenv("SMC_MCP_CONSUMER_ID", "display")
CONSUMER_KEY = os.getenv("SMC_MCP_CONSUMER_KEY", "")

logger = logging.getLogger(__name__)

# Create the FastMCP server instance
mcp = FastMCP("smc-gateway-mcp")

gateway_client: Optional[GatewayClient] = None


def get_gateway_client() -> GatewayClient:
    """Get or create the gateway API client."""
    global gateway_client
    if gateway_client is None:
        gateway_client = GatewayClient(API_BASE_URL, CONSUMER_ID, CONSUMER_KEY)
    return gateway_client


def set_gateway_client(client: Optional[GatewayClient]) -> None:
    global gateway_client
    gateway_client = client


def format_listing(listing: dict) -> str:
    if not listing:
        return "No data is obtainable right now."
    lines = []
    for data_type, info in listing.items():
        scopes = ", ".join(info.get("scopes", [])) or "any"
        aggregates = ", ".join(info.get("aggregates", []))
        units = ", ".join(info.get("units", []))
        unit_text = f" [{units}]" if units else ""
        lines.append(f"- {data_type}{unit_text}: scopes {scopes}; aggregates {aggregates}")
    return f"{len(listing)} data type(s) obtainable:\n\n" + "\n".join(lines)


# Tools
@mcp.tool()
async def list_obtainable_data(data_type: Optional[str] = None, scope: Optional[str] = None) -> str:
    """List the data types, scopes and aggregates that can be requested right now

    Args:
        data_type: Only show this data type (optional)
        scope: Glob over scopes, e.g. "3.*" (optional)
    """
    listing = await get_gateway_client().directory(data_type, scope)
    return format_listing(listing)


@mcp.tool()
async def request_aggregate(aggregate: str, data_type: str, purpose: str, start: float, end: float,
                            scope: str = "*") -> str:
    """Request an aggregate over all matching sources

    Args:
        aggregate: One of sum, count, average
        data_type: Data type to aggregate, e.g. occupancy
        purpose: Why the data is needed; checked against grants and source policies
        start: Window start (inclusive), deployment seconds
        end: Window end (exclusive), deployment seconds
        scope: Scope selector glob (defaults to all scopes)
    """
    logger.info(f"request_aggregate: {aggregate} of {data_type} in {scope} for {purpose}")
    try:
        result = await get_gateway_client().request_aggregate(aggregate, data_type, purpose, start, end, scope)
    except SmcError as e:
        raise ValueError(f"{e.code}: {e.message}") from e
    return (f"{result['aggregate']} of {data_type} over {scope}: {result['value']:g}\n"
            f"Contributors: {result['contributors']}")


# Resources
@mcp.resource("directory://listing")
async def get_listing() -> str:
    """Everything obtainable right now, as JSON"""
    listing = await get_gateway_client().directory()
    return json.dumps(listing, indent=2)


if __name__ == "__main__":
    configure_logging()
    # Run the server with HTTP transport
    mcp.run(transport="http", port=MCP_PORT)

"""
Message delivery substrate.

Two interchangeable networks carry the same node code:

- SimNetwork: deterministic discrete-event simulation with virtual time and
  fault injection (node crashes, partitions, lost and delayed messages).
- SocketNetwork: loopback TCP with asyncio streams, one reader per connection.

Nodes are callback driven: they receive whole frames through ``on_frame`` and
schedule timers through ``call_later``; they never block.
"""

import asyncio
import functools
import hashlib
import heapq
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Literal, Optional

from pydantic import BaseModel, model_validator

from .canonical import canonical_dumps
from .errors import MalformedFrame, UnknownKind, UnknownNode
from .field import SeededRandomness
from .protocol import ProtocolMessage, decode_message, encode_message

logger = logging.getLogger(__name__)

DELIVERED = "delivered"
DROPPED = "dropped"


# ============= TRANSCRIPT =============

@dataclass(frozen=True)
class TranscriptEntry:
    time: float
    sender: str
    receiver: str
    frame: str
    disposition: str
    note: str = ""

    def to_record(self) -> dict:
        return {
            "time": self.time,
            "sender": self.sender,
            "receiver": self.receiver,
            "frame": self.frame,
            "disposition": self.disposition,
            "note": self.note,
        }

    def message(self) -> ProtocolMessage:
        return decode_message((self.frame + "\n").encode("ascii"))

    @property
    def kind(self) -> Optional[str]:
        try:
            return json.loads(self.frame).get("kind")
        except (ValueError, AttributeError):
            return None


class Transcript:
    """Append-only record of every frame, delivered or dropped."""

    def __init__(self, entries: Iterable[TranscriptEntry] = ()):
        self._entries: list[TranscriptEntry] = list(entries)

    def record(self, time: float, sender: str, receiver: str, frame: bytes,
               disposition: str, note: str = "") -> None:
        text = frame.decode("utf-8", errors="replace").rstrip("\n")
        self._entries.append(TranscriptEntry(time, sender, receiver, text, disposition, note))

    @property
    def entries(self) -> tuple[TranscriptEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[TranscriptEntry]:
        return iter(self._entries)

    def to_bytes(self) -> bytes:
        return "".join(canonical_dumps(e.to_record()) + "\n" for e in self._entries).encode("ascii")

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def export(self, path: Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "Transcript":
        entries = []
        for line in Path(path).read_text(encoding="ascii").splitlines():
            if line.strip():
                entries.append(TranscriptEntry(**json.loads(line)))
        return cls(entries)

    def addressed_to(self, address: str) -> list[tuple[int, TranscriptEntry]]:
        return [(i, e) for i, e in enumerate(self._entries) if e.receiver == address]

    def of_kind(self, kind: str) -> list[tuple[int, TranscriptEntry]]:
        return [(i, e) for i, e in enumerate(self._entries) if e.kind == kind]


# ============= FAULTS =============

class MessageMatch(BaseModel):
    """Matches frames by kind, sender and receiver; unset fields match anything."""

    kind: Optional[str] = None
    sender: Optional[str] = None
    receiver: Optional[str] = None

    def matches(self, sender: str, receiver: str, kind: Optional[str]) -> bool:
        return ((self.kind is None or self.kind == kind)
                and (self.sender is None or self.sender == sender)
                and (self.receiver is None or self.receiver == receiver))


class Fault(BaseModel):
    at: float
    kind: Literal["drop_node", "revive_node", "partition", "heal", "lose_message", "delay"]
    node: Optional[str] = None
    groups: Optional[list[list[str]]] = None
    match: Optional[MessageMatch] = None
    extra: float = 0.0
    until: Optional[float] = None
    count: Optional[int] = None

    @model_validator(mode="after")
    def _check_fields(self) -> "Fault":
        if self.kind in ("drop_node", "revive_node") and not self.node:
            raise ValueError(f"{self.kind} needs a node")
        if self.kind == "partition" and not self.groups:
            raise ValueError("partition needs groups")
        if self.kind in ("lose_message", "delay") and self.match is None:
            raise ValueError(f"{self.kind} needs a match rule")
        return self

    def referenced_nodes(self) -> set[str]:
        nodes = {self.node} if self.node else set()
        for group in self.groups or []:
            nodes.update(group)
        if self.match:
            nodes.update(n for n in (self.match.sender, self.match.receiver) if n)
        return nodes


class _ActiveRule:
    def __init__(self, fault: Fault):
        self.fault = fault
        self.remaining = fault.count

    def applies(self, now: float, sender: str, receiver: str, kind: Optional[str]) -> bool:
        if self.remaining is not None and self.remaining <= 0:
            return False
        if self.fault.until is not None and now >= self.fault.until:
            return False
        return self.fault.match.matches(sender, receiver, kind)

    def consume(self) -> None:
        if self.remaining is not None:
            self.remaining -= 1


# ============= NODES =============

class TimerHandle:
    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Node:
    """Something with an address on a network."""

    def __init__(self, address: str):
        self.address = address
        self.network: Optional["Network"] = None

    def attach(self, network: "Network") -> None:
        self.network = network

    def start(self) -> None:
        """Called once the network runs, and again after a revive."""

    def reset(self) -> None:
        """Forget volatile state after a crash; persistent state survives."""

    def now(self) -> float:
        return self.network.now()

    def send(self, to: str, message: ProtocolMessage) -> None:
        self.network.send(self.address, to, encode_message(message))

    def broadcast(self, message: ProtocolMessage) -> None:
        self.network.broadcast(self.address, encode_message(message))

    def call_later(self, delay: float, callback: Callable[[], None]) -> TimerHandle:
        return self.network.call_later(self.address, delay, callback)

    def on_frame(self, sender: str, frame: bytes) -> None:
        try:
            message = decode_message(frame)
        except (MalformedFrame, UnknownKind) as e:
            logger.warning(f"{self.address}: dropping frame from {sender}: {e.message}")
            return
        self.on_message(sender, message)

    def on_message(self, sender: str, message: ProtocolMessage) -> None:
        raise NotImplementedError


class Network(ABC):
    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.transcript = Transcript()

    def register(self, node: Node) -> None:
        if node.address in self.nodes:
            raise ValueError(f"address {node.address} already registered")
        self.nodes[node.address] = node
        node.attach(self)

    def _require(self, address: str) -> Node:
        node = self.nodes.get(address)
        if node is None:
            raise UnknownNode(address)
        return node

    @abstractmethod
    def now(self) -> float:
        ...

    @abstractmethod
    def send(self, sender: str, receiver: str, frame: bytes) -> None:
        ...

    def broadcast(self, sender: str, frame: bytes) -> None:
        self._require(sender)
        for address in self.nodes:
            if address != sender:
                self.send(sender, address, frame)

    @abstractmethod
    def call_later(self, owner: str, delay: float, callback: Callable[[], None]) -> TimerHandle:
        ...

    def install_faults(self, faults: Iterable[Fault]) -> None:
        faults = list(faults)
        if faults:
            logger.warning(f"{type(self).__name__} ignores {len(faults)} scheduled fault(s)")


# ============= SIMULATOR =============

class SimNetwork(Network):
    """Discrete-event network; identical seed and scenario give an identical transcript."""

    def __init__(self, rng: SeededRandomness, latency: float = 0.01, jitter: float = 0.0):
        super().__init__()
        self.rng = rng
        self.latency = latency
        self.jitter = jitter
        self._now = 0.0
        self._seq = 0
        self._queue: list[tuple[float, int, Callable[[], None]]] = []
        self._down: set[str] = set()
        self._epochs: dict[str, int] = {}
        self._groups: list[set[str]] = []
        self._rules: list[_ActiveRule] = []
        self._link_clock: dict[tuple[str, str], float] = {}
        self.pending_faults = 0

    def register(self, node: Node) -> None:
        super().register(node)
        self._epochs[node.address] = 0

    def now(self) -> float:
        return self._now

    def _schedule(self, at: float, callback: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, callback))

    def start_nodes(self) -> None:
        for node in self.nodes.values():
            self._schedule(self._now, node.start)

    def is_up(self, address: str) -> bool:
        return address not in self._down

    def call_later(self, owner: str, delay: float, callback: Callable[[], None]) -> TimerHandle:
        self._require(owner)
        handle = TimerHandle()
        epoch = self._epochs[owner]

        def fire():
            # timers of a crashed node die with it
            if not handle.cancelled and self.is_up(owner) and self._epochs[owner] == epoch:
                callback()

        self._schedule(self._now + delay, fire)
        return handle

    # -- faults --

    def install_faults(self, faults: Iterable[Fault]) -> None:
        for fault in faults:
            for address in fault.referenced_nodes():
                self._require(address)
            self.pending_faults += 1
            self._schedule(fault.at, functools.partial(self._apply_fault, fault))

    def _apply_fault(self, fault: Fault) -> None:
        self.pending_faults -= 1
        logger.info(f"t={self._now:.3f} fault {fault.kind} {fault.node or fault.groups or fault.match}")
        if fault.kind == "drop_node":
            self._down.add(fault.node)
            self._epochs[fault.node] += 1
        elif fault.kind == "revive_node":
            if fault.node in self._down:
                self._down.discard(fault.node)
                node = self.nodes[fault.node]
                node.reset()
                node.start()
        elif fault.kind == "partition":
            self._groups = [set(group) for group in fault.groups]
        elif fault.kind == "heal":
            self._groups = []
        else:
            self._rules.append(_ActiveRule(fault))

    def _group_of(self, address: str) -> int:
        for index, group in enumerate(self._groups):
            if address in group:
                return index
        return -1

    def reachable(self, a: str, b: str) -> bool:
        return self._group_of(a) == self._group_of(b)

    # -- delivery --

    def send(self, sender: str, receiver: str, frame: bytes) -> None:
        self._require(sender)
        self._require(receiver)
        if not self.is_up(receiver) or not self.is_up(sender):
            self.transcript.record(self._now, sender, receiver, frame, DROPPED, "node down")
            return
        if not self.reachable(sender, receiver):
            self.transcript.record(self._now, sender, receiver, frame, DROPPED, "partitioned")
            return

        kind = _peek_kind(frame)
        extra = 0.0
        for rule in self._rules:
            if not rule.applies(self._now, sender, receiver, kind):
                continue
            rule.consume()
            if rule.fault.kind == "lose_message":
                self.transcript.record(self._now, sender, receiver, frame, DROPPED, "lost")
                return
            extra += rule.fault.extra

        delay = self.latency + extra
        if self.jitter:
            delay += self.rng.uniform(0.0, self.jitter)
        link = (sender, receiver)
        # links are FIFO, like a stream connection
        deliver_at = max(self._now + delay, self._link_clock.get(link, 0.0))
        self._link_clock[link] = deliver_at
        self._schedule(deliver_at, functools.partial(self._deliver, sender, receiver, frame))

    def _deliver(self, sender: str, receiver: str, frame: bytes) -> None:
        if not self.is_up(receiver):
            self.transcript.record(self._now, sender, receiver, frame, DROPPED, "node down")
            return
        if not self.reachable(sender, receiver):
            self.transcript.record(self._now, sender, receiver, frame, DROPPED, "partitioned")
            return
        self.transcript.record(self._now, sender, receiver, frame, DELIVERED)
        try:
            self.nodes[receiver].on_frame(sender, frame)
        except Exception:
            logger.exception(f"{receiver}: handler failed on frame from {sender}")

    def _step(self) -> None:
        at, _, callback = heapq.heappop(self._queue)
        self._now = at
        callback()

    def advance_time(self, until: float) -> int:
        """Execute every event scheduled at or before ``until``; returns how many ran."""
        if until < self._now:
            raise ValueError(f"cannot move time back from {self._now} to {until}")
        executed = 0
        while self._queue and self._queue[0][0] <= until:
            self._step()
            executed += 1
        self._now = until
        return executed

    def run_until(self, predicate: Callable[[], bool], max_time: float) -> bool:
        """Run events until ``predicate`` holds or virtual time would pass ``max_time``."""
        while not predicate():
            if not self._queue or self._queue[0][0] > max_time:
                self._now = max(self._now, max_time)
                return predicate()
            self._step()
        return True


def _peek_kind(frame: bytes) -> Optional[str]:
    try:
        return json.loads(frame).get("kind")
    except (ValueError, AttributeError):
        return None


# ============= LOOPBACK SOCKETS =============

class SocketNetwork(Network):
    """Loopback TCP transport; every node listens on its own ephemeral port."""

    def __init__(self, host: str = "127.0.0.1", time_scale: float = 1.0):
        super().__init__()
        self.host = host
        self.time_scale = time_scale
        self._ports: dict[str, int] = {}
        self._servers: list[asyncio.AbstractServer] = []
        self._links: dict[tuple[str, str], asyncio.Queue] = {}
        self._tasks: list[asyncio.Task] = []
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._t0 = 0.0

    async def open(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._t0 = self._loop.time()
        for address in self.nodes:
            server = await asyncio.start_server(
                functools.partial(self._serve, address), self.host, 0)
            self._ports[address] = server.sockets[0].getsockname()[1]
            self._servers.append(server)
        logger.info(f"socket transport listening on {len(self._ports)} loopback port(s)")

    def start_nodes(self) -> None:
        for node in self.nodes.values():
            node.start()

    def now(self) -> float:
        return (self._loop.time() - self._t0) / self.time_scale

    def call_later(self, owner: str, delay: float, callback: Callable[[], None]) -> TimerHandle:
        self._require(owner)
        handle = TimerHandle()

        def fire():
            if not handle.cancelled:
                self._guarded(callback)

        self._loop.call_later(delay * self.time_scale, fire)
        return handle

    def send(self, sender: str, receiver: str, frame: bytes) -> None:
        self._require(sender)
        self._require(receiver)
        link = (sender, receiver)
        queue = self._links.get(link)
        if queue is None:
            queue = asyncio.Queue()
            self._links[link] = queue
            self._tasks.append(self._loop.create_task(self._pump(sender, receiver, queue)))
        queue.put_nowait(frame)

    async def _pump(self, sender: str, receiver: str, queue: asyncio.Queue) -> None:
        writer = None
        try:
            _, writer = await asyncio.open_connection(self.host, self._ports[receiver])
            writer.write((canonical_dumps({"link": sender}) + "\n").encode("ascii"))
            while True:
                frame = await queue.get()
                writer.write(frame)
                await writer.drain()
        except asyncio.CancelledError:
            pass
        except OSError as e:
            logger.warning(f"link {sender}->{receiver} failed: {e}")
        finally:
            if writer is not None:
                writer.close()

    async def _serve(self, address: str, reader: asyncio.StreamReader,
                     writer: asyncio.StreamWriter) -> None:
        try:
            header = await reader.readline()
            sender = json.loads(header)["link"]
            while True:
                frame = await reader.readline()
                if not frame:
                    break
                self.transcript.record(self.now(), sender, address, frame, DELIVERED)
                self._guarded(functools.partial(self.nodes[address].on_frame, sender, frame))
        except (ValueError, KeyError, OSError) as e:
            logger.warning(f"connection to {address} closed: {e}")
        finally:
            writer.close()

    def _guarded(self, callback: Callable[[], None]) -> None:
        try:
            callback()
        except Exception:
            logger.exception("node handler failed")

    async def close(self) -> None:
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        for server in self._servers:
            server.close()
            try:
                await asyncio.wait_for(server.wait_closed(), timeout=1.0)
            except asyncio.TimeoutError:
                logger.warning("listener did not close within 1s")
        logger.info("socket transport closed")

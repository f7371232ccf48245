"""
Scenario files and deployments.

A scenario describes a whole desk-scale deployment: sources with their
metadata, policies and scripted readings, consumers with the requests they
issue, the gateway's grants, a fault schedule, and parameter overrides. A
Deployment wires it onto the simulated network or loopback sockets and runs
it.
"""

import asyncio
import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ValidationError, model_validator

from .canonical import canonical_dumps
from .config import Settings
from .consumer import ConsumerNode, ConsumerOutcome, RequestPlan
from .datarequest import AccessControlList, AggregateKind, ConsumerKeyring, DataRequest, Grant
from .errors import ConfigError, Timeout
from .field import SeededRandomness
from .gateway import Gateway
from .source import (
    DataTypeInfo,
    Reading,
    ScriptedReadings,
    SourceMetadata,
    SourceNode,
    SourcePolicy,
    TransparencyLog,
)
from .transport import Fault, Network, SimNetwork, SocketNetwork

logger = logging.getLogger(__name__)

API_CONSUMER_ADDRESS = "api"


# ============= SCENARIO FILE =============

class SourceConfig(BaseModel):
    id: str
    endpoint: Optional[str] = None
    scope: str = ""
    data_types: list[DataTypeInfo]
    supported_protocols: list[AggregateKind] = list(AggregateKind)
    policy: SourcePolicy = SourcePolicy(default_decision="allow")
    readings: list[Reading] = []

    @property
    def address(self) -> str:
        return self.endpoint or self.id

    def metadata(self) -> SourceMetadata:
        return SourceMetadata(source_id=self.id, scope=self.scope, data_types=self.data_types,
                              supported_protocols=self.supported_protocols)


class ConsumerConfig(BaseModel):
    id: str
    key: str
    address: Optional[str] = None
    requests: list[RequestPlan] = []

    @property
    def node_address(self) -> str:
        return self.address or self.id


class Scenario(BaseModel):
    seed: int = 0
    transport: Literal["sim", "socket"] = "sim"
    parameters: dict[str, Any] = {}
    gateway: str = "gateway"
    sources: list[SourceConfig] = []
    consumers: list[ConsumerConfig] = []
    grants: list[Grant] = []
    faults: list[Fault] = []

    @model_validator(mode="after")
    def _check_references(self) -> "Scenario":
        addresses = ([self.gateway] + [s.address for s in self.sources]
                     + [c.node_address for c in self.consumers])
        if len(set(addresses)) != len(addresses):
            raise ValueError(f"node addresses must be unique: {addresses}")
        source_ids = [s.id for s in self.sources]
        if len(set(source_ids)) != len(source_ids):
            raise ValueError(f"source ids must be unique: {source_ids}")

        consumer_ids = {c.id for c in self.consumers}
        for grant in self.grants:
            if grant.consumer_id not in consumer_ids:
                raise ValueError(f"grant references unknown consumer {grant.consumer_id}")
        request_ids = [r.request_id for c in self.consumers for r in c.requests]
        if len(set(request_ids)) != len(request_ids):
            raise ValueError("request ids must be unique across consumers")
        for fault in self.faults:
            unknown = fault.referenced_nodes() - set(addresses)
            if unknown:
                raise ValueError(f"fault at t={fault.at} references unknown node(s) {sorted(unknown)}")
        unknown_params = set(self.parameters) - set(Settings.model_fields)
        if unknown_params:
            raise ValueError(f"unknown parameters {sorted(unknown_params)}")
        return self

    def to_text(self) -> str:
        return canonical_dumps(self.model_dump(mode="json"))

    @classmethod
    def parse(cls, text: str, origin: str = "<scenario>") -> "Scenario":
        try:
            return cls.model_validate(json.loads(text))
        except ValueError as e:
            # ValidationError is a ValueError too
            raise ConfigError(origin, str(e)) from e

    @classmethod
    def load(cls, path: Path) -> "Scenario":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(str(path), f"cannot read: {e}") from e
        return cls.parse(text, str(path))

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_text() + "\n", encoding="utf-8")

    def settings(self, base: Optional[Settings] = None) -> Settings:
        try:
            return (base or Settings.from_env()).with_parameters(self.parameters)
        except ValidationError as e:
            raise ConfigError("parameters", str(e)) from e

    def source_address(self, source_id: str) -> str:
        for source in self.sources:
            if source.id == source_id:
                return source.address
        raise KeyError(source_id)


# ============= RESULTS =============

class ResultRecord(BaseModel):
    """One line of results.jsonl."""

    request_id: str
    consumer_id: str
    outcome: Literal["completed", "error", "unresolved"]
    aggregate: Optional[AggregateKind] = None
    value: Optional[float] = None
    contributors: Optional[int] = None
    error: Optional[dict[str, Any]] = None
    issued_at: Optional[float] = None
    completed_at: Optional[float] = None
    restarts: int = 0


# ============= DEPLOYMENT =============

class Deployment:
    """A scenario instantiated on a network."""

    def __init__(self, scenario: Scenario, settings: Optional[Settings] = None,
                 out_dir: Optional[Path] = None, seed: Optional[int] = None):
        self.scenario = scenario
        self.settings = settings or scenario.settings()
        self.out_dir = Path(out_dir) if out_dir else None
        self.seed = scenario.seed if seed is None else seed
        self.rng = SeededRandomness(self.seed)
        self.network: Optional[Network] = None
        self.gateway: Optional[Gateway] = None
        self.sources: dict[str, SourceNode] = {}
        self.consumers: dict[str, ConsumerNode] = {}
        self.logs: dict[str, TransparencyLog] = {}
        self._started = False

    # -- wiring --

    def _transparency_path(self, source_id: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        path = self.out_dir / "transparency" / f"{source_id}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists():
            path.unlink()
        return path

    def build(self, transport: Optional[str] = None) -> "Deployment":
        transport = transport or self.scenario.transport
        if transport == "sim":
            self.network = SimNetwork(self.rng.fork("network"), self.settings.latency, self.settings.jitter)
        else:
            self.network = SocketNetwork(time_scale=self.settings.time_scale)

        keyring = ConsumerKeyring({c.id: c.key for c in self.scenario.consumers})
        acl = AccessControlList(self.scenario.grants)
        acl_path = keys_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            acl_path, keys_path = self.out_dir / "acl.jsonl", self.out_dir / "keys.jsonl"
            acl.dump(acl_path)
            keyring.dump(keys_path)

        self.gateway = Gateway(self.scenario.gateway, self.settings, keyring, acl,
                               self.rng.fork("gateway"), acl_path=acl_path, keys_path=keys_path)
        self.network.register(self.gateway)

        for config in self.scenario.sources:
            log = TransparencyLog(self._transparency_path(config.id))
            node = SourceNode(config.address, config.metadata(), config.policy,
                              ScriptedReadings(config.readings), log, self.settings,
                              self.rng.fork(f"source:{config.id}"))
            self.network.register(node)
            self.sources[config.id] = node
            self.logs[config.id] = log

        for config in self.scenario.consumers:
            node = ConsumerNode(config.node_address, config.id, config.key, self.scenario.gateway,
                                config.requests)
            self.network.register(node)
            self.consumers[config.id] = node

        logger.info(f"deployment built on {transport}: {len(self.sources)} source(s), "
                    f"{len(self.consumers)} consumer(s), seed {self.seed}")
        return self

    @property
    def sim(self) -> SimNetwork:
        if not isinstance(self.network, SimNetwork):
            raise RuntimeError("deployment is not running on the simulator")
        return self.network

    def _start(self) -> None:
        if self._started:
            return
        self._started = True
        self.network.install_faults(self.scenario.faults)
        self.network.start_nodes()

    def resolved(self) -> bool:
        return all(c.resolved() for c in self.consumers.values())

    # -- simulated runs --

    def warm_up(self) -> None:
        """Start every node and let discovery settle."""
        self._start()
        self.sim.advance_time(self.sim.now() + self.settings.settle_time)

    def run(self) -> list[ResultRecord]:
        """Run the simulation to quiescence, bounded by max_time."""
        sim = self.sim
        self._start()
        quiet = sim.run_until(lambda: self.resolved() and sim.pending_faults == 0, self.settings.max_time)
        if not quiet:
            logger.warning(f"simulation reached max_time {self.settings.max_time} before quiescence")
        sim.advance_time(min(sim.now() + self.settings.settle_time, max(self.settings.max_time, sim.now())))
        return self.results()

    def advance(self, seconds: float) -> int:
        return self.sim.advance_time(self.sim.now() + seconds)

    def submit(self, text: str, max_wait: Optional[float] = None) -> ConsumerOutcome:
        """Issue verbatim request text through a service consumer and run until it is answered."""
        request_id = DataRequest.parse(text).request_id
        sim = self.sim
        self._start()
        api = sim.nodes.get(API_CONSUMER_ADDRESS)
        if api is None:
            api = ConsumerNode(API_CONSUMER_ADDRESS, API_CONSUMER_ADDRESS, "", self.scenario.gateway)
            sim.register(api)
        api.outcomes.pop(request_id, None)
        api.submit(text, request_id)
        settings = self.settings
        if max_wait is None:
            max_wait = (settings.commit_timeout + settings.partial_timeout + 1.0) * (settings.max_restarts + 1)
        if not sim.run_until(lambda: request_id in api.outcomes, sim.now() + max_wait):
            raise Timeout("Request")
        # let Result notifications reach the sources
        sim.advance_time(sim.now() + 2 * (settings.latency + settings.jitter))
        return api.outcomes[request_id]

    def directory(self, data_type: Optional[str] = None, scope: Optional[str] = None) -> dict[str, Any]:
        return self.gateway.query_directory(data_type, scope)

    # -- socket runs --

    async def run_socket(self, deadline: float = 30.0) -> list[ResultRecord]:
        """Run on loopback sockets until every request is answered or the wall-clock deadline passes."""
        network = self.network
        if not isinstance(network, SocketNetwork):
            raise RuntimeError("deployment is not built for sockets")
        await network.open()
        try:
            self._start()
            loop = asyncio.get_running_loop()
            stop_at = loop.time() + deadline
            while not self.resolved() and loop.time() < stop_at:
                await asyncio.sleep(0.02)
            if not self.resolved():
                logger.warning(f"socket run hit its {deadline}s deadline")
            await asyncio.sleep(min(self.settings.settle_time * self.settings.time_scale,
                                    max(0.0, stop_at - loop.time())))
        finally:
            await network.close()
        return self.results()

    # -- results --

    def results(self) -> list[ResultRecord]:
        records = []
        for config in self.scenario.consumers:
            node = self.consumers[config.id]
            for plan in config.requests:
                outcome = node.outcomes.get(plan.request_id)
                ledger = self.gateway.outcomes.get(plan.request_id)
                record = ResultRecord(request_id=plan.request_id, consumer_id=config.id, outcome="unresolved",
                                      issued_at=node.issued_at.get(plan.request_id),
                                      restarts=ledger.restarts if ledger else 0)
                if outcome is not None:
                    update: dict[str, Any] = {"outcome": outcome.status, "completed_at": outcome.completed_at,
                                              "error": outcome.error}
                    if outcome.result is not None:
                        update.update(aggregate=outcome.result.aggregate, value=outcome.result.value,
                                      contributors=outcome.result.contributors)
                    record = record.model_copy(update=update)
                records.append(record)
        return records

    def write_artifacts(self, out_dir: Optional[Path] = None) -> Path:
        """Write results.jsonl and transcript.jsonl; transparency logs are written as they grow."""
        out = Path(out_dir or self.out_dir or ".")
        out.mkdir(parents=True, exist_ok=True)
        lines = [canonical_dumps(r.model_dump(mode="json")) for r in self.results()]
        (out / "results.jsonl").write_text("".join(line + "\n" for line in lines), encoding="ascii")
        self.network.transcript.export(out / "transcript.jsonl")
        return out

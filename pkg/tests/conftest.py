"""
Shared fixtures: baseline settings, scenario builders and a small helper for
running deployments on the simulator.
"""

from pathlib import Path
from typing import Callable, Optional, Sequence

import pytest

from smc_gateway.config import Settings
from smc_gateway.consumer import RequestPlan
from smc_gateway.datarequest import AggregateKind, Grant, TimeWindow
from smc_gateway.scenario import ConsumerConfig, Deployment, Scenario, SourceConfig
from smc_gateway.source import DataTypeInfo, Reading, SourcePolicy

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

CONSUMER = "display"
CONSUMER_KEY = "display-secret"
PURPOSE = "statistics"
WINDOW = TimeWindow(start=0.0, end=3600.0)


@pytest.fixture(scope="session")
def settings() -> Settings:
    """Defaults, independent of SMC_* variables in the environment."""
    return Settings()


def make_scenario(values: Sequence[float], aggregate: AggregateKind = AggregateKind.SUM,
                  data_type: str = "occupancy", seed: int = 1,
                  policies: Optional[dict[int, SourcePolicy]] = None,
                  extra_requests: Sequence[RequestPlan] = (), faults: Sequence[dict] = (),
                  parameters: Optional[dict] = None, request_at: float = 5.0,
                  granted: bool = True) -> Scenario:
    """One source per value, one consumer issuing one request at ``request_at``."""
    policies = policies or {}
    sources = [
        SourceConfig(
            id=f"S{i + 1}", scope=f"3.{chr(ord('A') + i % 2)}",
            data_types=[DataTypeInfo(name=data_type, unit="persons")],
            policy=policies.get(i, SourcePolicy(default_decision="allow")),
            readings=[Reading(data_type=data_type, time=1.0, value=value)],
        )
        for i, value in enumerate(values)
    ]
    plan = RequestPlan(at=request_at, request_id="r-1", purpose=PURPOSE, aggregate=aggregate,
                       data_type=data_type, window=WINDOW)
    grants = [Grant(consumer_id=CONSUMER, data_type=data_type, aggregate=a, purpose=PURPOSE)
              for a in AggregateKind] if granted else []
    return Scenario(
        seed=seed,
        parameters=parameters or {},
        sources=sources,
        consumers=[ConsumerConfig(id=CONSUMER, key=CONSUMER_KEY, requests=[plan, *extra_requests])],
        grants=grants,
        faults=list(faults),
    )


def run_sim(scenario: Scenario, out_dir: Optional[Path] = None) -> Deployment:
    deployment = Deployment(scenario, settings=scenario.settings(Settings()), out_dir=out_dir).build("sim")
    deployment.run()
    return deployment


@pytest.fixture(scope="session")
def scenario_factory() -> Callable[..., Scenario]:
    return make_scenario


@pytest.fixture(scope="session")
def simulate() -> Callable[..., Deployment]:
    return run_sim


@pytest.fixture(scope="session")
def bundled() -> Callable[[str], Scenario]:
    def load(name: str) -> Scenario:
        return Scenario.load(SCENARIOS / f"{name}.json")
    return load

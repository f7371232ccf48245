import json
import random

import pytest

from smc_gateway.config import Settings
from smc_gateway.datarequest import (
    AccessControlList,
    AggregateKind,
    ConsumerKeyring,
    DataRequest,
    Grant,
    TimeWindow,
    sign_request,
)
from smc_gateway.errors import MalformedRequest
from smc_gateway.field import SeededRandomness
from smc_gateway.gateway import Gateway, MetadataDirectory
from smc_gateway.protocol import MessageKind, ProtocolMessage, encode_message
from smc_gateway.scenario import Deployment
from smc_gateway.source import (
    DataTypeInfo,
    PolicyRule,
    Reading,
    ScriptedReadings,
    SourceMetadata,
    SourceNode,
    SourcePolicy,
    TransparencyLog,
)
from smc_gateway.transport import Fault, SimNetwork

KEY = "display-secret"
WINDOW = TimeWindow(start=0.0, end=3600.0)


def signed(request_id="q-1", aggregate=AggregateKind.SUM, data_type="occupancy", scope="*",
           purpose="statistics", window=WINDOW, consumer="display", key=KEY) -> str:
    return sign_request(DataRequest(request_id=request_id, consumer_id=consumer, purpose=purpose,
                                    aggregate=aggregate, data_type=data_type, scope=scope, window=window),
                        key).to_text()


def warmed(scenario) -> Deployment:
    deployment = Deployment(scenario, settings=scenario.settings(Settings())).build("sim")
    deployment.warm_up()
    return deployment


def metadata(source_id, scope="", names=("occupancy",)):
    return SourceMetadata(source_id=source_id, scope=scope,
                          data_types=[DataTypeInfo(name=n, unit="persons") for n in names])


# ============= METADATA DIRECTORY =============

def test_directory_liveness():
    directory = MetadataDirectory(liveness_timeout=3.0)
    directory.register(metadata("S1"), "node-1", now=0.0)
    assert directory.is_live("S1", 3.0)
    assert not directory.is_live("S1", 3.5)
    assert directory.touch("S1", "node-1", 3.4)
    assert not directory.touch("S1", "elsewhere", 3.4)
    directory.mark_dead("S1")
    assert not directory.is_live("S1", 3.5)
    directory.touch("S1", "node-1", 3.6)
    assert directory.is_live("S1", 3.6)


def test_listing_projects_without_identities():
    directory = MetadataDirectory(liveness_timeout=3.0)
    directory.register(metadata("S1", "3.A"), "node-1", 0.0)
    directory.register(metadata("S2", "3.B"), "node-2", 0.0)
    directory.register(metadata("S3", "3.B", ("occupancy", "co2")), "node-3", 0.0)
    listing = directory.listing(1.0)
    assert listing["occupancy"] == {"scopes": ["3.A", "3.B"], "aggregates": ["average", "count", "sum"],
                                    "units": ["persons"]}
    assert set(listing) == {"co2", "occupancy"}
    text = json.dumps(listing)
    assert "S1" not in text and "node-" not in text
    assert directory.listing(1.0, data_type="co2")["co2"]["scopes"] == ["3.B"]
    assert directory.listing(1.0, scope="3.A") == {"occupancy": listing["occupancy"] | {"scopes": ["3.A"]}}


def test_empty_listing():
    assert MetadataDirectory(3.0).listing(0.0) == {}


# ============= DISCOVERY =============

def test_sources_register_after_announcing(scenario_factory):
    deployment = warmed(scenario_factory([1.0, 2.0, 3.0]))
    directory = deployment.gateway.directory
    assert sorted(directory.entries) == ["S1", "S2", "S3"]
    assert all(directory.is_live(s, deployment.sim.now()) for s in directory.entries)


@pytest.mark.parametrize("seed", range(5))
def test_ten_sources_register_in_any_order(scenario_factory, seed):
    scenario = scenario_factory([float(i) for i in range(10)], seed=seed, parameters={"jitter": 0.05})
    deployment = warmed(scenario)
    assert len(deployment.gateway.directory) == 10


def _two_claimants():
    settings = Settings()
    network = SimNetwork(SeededRandomness(0), latency=settings.latency)
    gateway = Gateway("gateway", settings, ConsumerKeyring(), AccessControlList(), SeededRandomness(1))
    network.register(gateway)
    nodes = []
    for address in ("node-a", "node-b"):
        node = SourceNode(address, metadata("S1"), SourcePolicy(), ScriptedReadings(), TransparencyLog(),
                          settings, SeededRandomness(address))
        network.register(node)
        nodes.append(node)
    return network, gateway, nodes


def test_duplicate_source_id_is_rejected_while_live():
    network, gateway, (first, second) = _two_claimants()
    network.start_nodes()
    network.advance_time(2.5)
    assert gateway.directory.get("S1").endpoint == "node-a"
    assert first.setup_done and not second.setup_done
    rejects = [e for _, e in network.transcript.addressed_to("node-b")
               if e.kind == "SetupMetadata" and e.message().payload.get("stage") == "reject"]
    assert rejects


def test_reannounce_from_new_endpoint_replaces_stale_entry():
    network, gateway, (first, second) = _two_claimants()
    network.install_faults([Fault(at=1.5, kind="drop_node", node="node-a")])
    network.start_nodes()
    network.advance_time(10.0)
    assert len(gateway.directory) == 1
    assert gateway.directory.get("S1").endpoint == "node-b"
    assert second.setup_done


def test_revived_gateway_relearns_sources(scenario_factory):
    faults = [{"at": 2.0, "kind": "drop_node", "node": "gateway"},
              {"at": 4.0, "kind": "revive_node", "node": "gateway"}]
    scenario = scenario_factory([1.0, 2.0, 3.0], faults=faults, request_at=12.0)
    deployment = Deployment(scenario, settings=Settings()).build("sim")
    deployment.warm_up()
    deployment.advance(1.5)
    assert len(deployment.gateway.directory) == 0
    deployment.advance(4.0)
    assert sorted(deployment.gateway.directory.entries) == ["S1", "S2", "S3"]
    assert all(node.announces_sent == 2 for node in deployment.sources.values())
    results = deployment.run()
    assert results[0].outcome == "completed" and results[0].value == 6.0


def test_listing_drops_dead_source_within_liveness_timeout(scenario_factory):
    scenario = scenario_factory([1.0, 2.0, 3.0], faults=[{"at": 4.0, "kind": "drop_node", "node": "S3"}],
                                request_at=100.0)
    scenario.sources[2].data_types.append(DataTypeInfo(name="co2", unit="ppm"))
    deployment = Deployment(scenario, settings=Settings()).build("sim")
    deployment.warm_up()
    deployment.advance(1.0)
    assert "co2" in deployment.directory()
    deployment.advance(Settings().liveness_timeout)
    assert "co2" not in deployment.directory()
    assert "occupancy" in deployment.directory()


# ============= REQUEST HANDLING =============

def test_canonical_request_average_on_floor(scenario_factory):
    scenario = scenario_factory([12.0, 7.0, 20.0, 3.0, 9.0], aggregate=AggregateKind.AVERAGE)
    deployment = warmed(scenario)
    # scopes alternate 3.A / 3.B: S1, S3, S5 are on floor 3.A
    outcome = deployment.submit(signed(aggregate=AggregateKind.AVERAGE, scope="3.A"))
    result = outcome.raise_for_error()
    assert result.contributors == 3
    assert result.value == pytest.approx((12.0 + 20.0 + 9.0) / 3, abs=3 * 2 ** -16)


def _announces(deployment):
    return deployment.network.transcript.of_kind(MessageKind.ANNOUNCE.value)


@pytest.mark.parametrize("text, code", [
    (signed(key="wrong-key"), "AuthFailed"),
    (signed(consumer="mallory", key="mallory-key"), "AuthFailed"),
    (signed(purpose="marketing"), "AccessDenied"),
    (signed(data_type="humidity"), "AccessDenied"),
])
def test_refused_requests_never_reach_sources(scenario_factory, text, code):
    deployment = warmed(scenario_factory([1.0, 2.0, 3.0]))
    before = len(deployment.network.transcript)
    outcome = deployment.submit(text)
    assert outcome.status == "error" and outcome.error["error"] == code
    new = deployment.network.transcript.entries[before:]
    assert not [e for e in new if e.receiver in deployment.sources and e.kind != "Heartbeat"]


@pytest.mark.parametrize("old, new", [
    ('"end":3600.0', '"end":NaN'),
    ('"end":3600.0', '"end":Infinity'),
    ('"start":0.0', '"start":-Infinity'),
])
def test_non_finite_window_fails_closed(scenario_factory, old, new):
    text = signed(request_id="nan-1").replace(old, new)
    assert text != signed(request_id="nan-1")
    with pytest.raises(MalformedRequest):
        DataRequest.parse(text)

    deployment = warmed(scenario_factory([1.0, 2.0, 3.0]))
    consumer = deployment.consumers["display"]
    before = len(deployment.network.transcript)
    consumer.submit(text, "nan-1")
    deployment.advance(0.1)
    assert consumer.outcomes["?"].error["error"] == "AuthFailed"
    new_entries = deployment.network.transcript.entries[before:]
    assert not [e for e in new_entries if e.receiver in deployment.sources and e.kind != "Heartbeat"]


def test_non_canonical_text_fails_auth(scenario_factory):
    deployment = warmed(scenario_factory([1.0, 2.0, 3.0]))
    pretty = json.dumps(json.loads(signed()), indent=2)
    assert deployment.submit(pretty).error["error"] == "AuthFailed"


@pytest.mark.parametrize("kwargs, reason", [
    ({"window": TimeWindow(start=10.0, end=10.0)}, "empty time window"),
    ({"scope": "9.*"}, "unknown scope 9.*"),
])
def test_implausible_requests(scenario_factory, kwargs, reason):
    deployment = warmed(scenario_factory([1.0, 2.0, 3.0]))
    outcome = deployment.submit(signed(**kwargs))
    assert outcome.error["error"] == "Implausible"
    assert outcome.error["details"]["reason"] == reason
    assert not _announces(deployment)


def test_unknown_data_type_is_implausible(scenario_factory):
    scenario = scenario_factory([1.0, 2.0, 3.0])
    scenario.grants.append(Grant(consumer_id="display", data_type="humidity", aggregate=AggregateKind.SUM,
                                 purpose="statistics"))
    deployment = warmed(scenario)
    outcome = deployment.submit(signed(data_type="humidity"))
    assert outcome.error["details"]["reason"] == "unknown data type humidity"


def test_insufficient_sources(scenario_factory):
    deployment = warmed(scenario_factory([1.0, 2.0]))
    outcome = deployment.submit(signed())
    assert outcome.error["error"] == "InsufficientSources"
    assert outcome.error["details"] == {"found": 2, "required": 3}


def test_plan_session_takes_every_live_match(scenario_factory):
    deployment = warmed(scenario_factory([1.0, 2.0, 3.0, 4.0, 5.0]))
    text = signed()
    spec = deployment.gateway.plan_session(DataRequest.parse(text), text)
    assert spec.party_ids() == ["S1", "S2", "S3", "S4", "S5"]
    assert spec.original_request == text


def test_spec_embeds_request_bytes_verbatim(scenario_factory):
    deployment = warmed(scenario_factory([1.0, 2.0, 3.0]))
    rng = random.Random(4)
    alphabet = "abcdefghijklmnopqrstuvwxyz-_.:/ \"\\é☃"
    for i in range(200):
        purpose = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 24)))
        text = signed(request_id=f"fuzz-{i}-{rng.random()}", purpose=purpose,
                      window=TimeWindow(start=rng.uniform(-1e6, 0), end=rng.uniform(1, 1e6)))
        spec = deployment.gateway.plan_session(DataRequest.parse(text), text)
        assert spec.original_request.encode() == text.encode()
        assert DataRequest.parse(spec.original_request).purpose == purpose


# ============= ORCHESTRATION =============

def test_single_veto_aborts_and_notifies_the_rest(scenario_factory, simulate):
    deny = SourcePolicy(rules=[PolicyRule(decision="deny")], default_decision="allow")
    deployment = simulate(scenario_factory([1.0, 2.0, 3.0, 4.0], policies={1: deny}))
    result = deployment.results()[0]
    assert result.outcome == "error"
    assert result.error["error"] == "Vetoed"
    assert result.error["details"]["parties"] == ["S2"]

    transcript = deployment.network.transcript
    assert not transcript.of_kind("ShareTransfer")
    aborted = sorted(e.receiver for _, e in transcript.of_kind("Abort") if e.sender == "gateway")
    assert aborted == ["S1", "S3", "S4"]
    for source_id, log in deployment.logs.items():
        decisions = [r.decision for r in log.records()]
        assert decisions == (["vetoed"] if source_id == "S2" else ["contributed"])


def test_lost_partial_sum_is_recorded_and_recovered(scenario_factory, simulate):
    lose = {"at": 0.0, "kind": "lose_message", "match": {"kind": "PartialSum", "sender": "S2"}, "count": 1}
    deployment = simulate(scenario_factory([1.0, 2.0, 3.0, 4.0], faults=[lose]))
    dropped = [e for _, e in deployment.network.transcript.of_kind("PartialSum")
               if e.sender == "S2" and e.disposition == "dropped"]
    assert len(dropped) == 1 and dropped[0].note == "lost"
    ledger = deployment.gateway.outcomes["r-1"]
    assert ledger.status == "completed" and ledger.restarts == 1
    assert len(ledger.session_ids) == 2 and len(set(ledger.session_ids)) == 2


def test_failure_with_three_sources_exhausts_quorum(scenario_factory, simulate):
    crash = {"at": 5.035, "kind": "drop_node", "node": "S3"}
    deployment = simulate(scenario_factory([1.0, 2.0, 3.0], faults=[crash]))
    result = deployment.results()[0]
    assert result.outcome == "error"
    assert result.error["error"] == "SessionFailed"
    assert result.error["details"]["attempts"] <= 2


def test_repeated_churn_exhausts_restarts(scenario_factory, simulate):
    losses = [
        {"at": 0.0, "kind": "lose_message", "match": {"kind": "PartialSum", "sender": "S1"}, "count": 1},
        {"at": 6.5, "kind": "lose_message", "match": {"kind": "PartialSum", "sender": "S2"}, "count": 1},
        {"at": 9.5, "kind": "lose_message", "match": {"kind": "PartialSum", "sender": "S3"}, "count": 1},
    ]
    deployment = simulate(scenario_factory([float(i) for i in range(1, 7)], faults=losses))
    result = deployment.results()[0]
    assert result.error == {
        "error": "SessionFailed",
        "message": "session failed after 2 restart(s): Timeout(Exchanging)",
        "details": {"attempts": 2, "last_cause": "Timeout(Exchanging)"},
    }
    assert result.restarts == 2


def test_restarted_session_uses_fresh_shares(scenario_factory, simulate):
    lose = {"at": 0.0, "kind": "lose_message", "match": {"kind": "PartialSum", "sender": "S4"}, "count": 1}
    deployment = simulate(scenario_factory([1.0, 2.0, 3.0, 4.0], faults=[lose]))
    sessions = deployment.gateway.outcomes["r-1"].session_ids
    payloads = {}
    for _, entry in deployment.network.transcript.of_kind("ShareTransfer"):
        message = entry.message()
        payloads.setdefault(message.session_id, set()).add(message.payload["share"])
    assert set(payloads) == set(sessions)
    assert not payloads[sessions[0]] & payloads[sessions[1]]


def test_exactly_one_result_per_completed_request(scenario_factory, simulate):
    deployment = simulate(scenario_factory([1.0, 2.0, 3.0]))
    results = [e for _, e in deployment.network.transcript.of_kind("Result") if e.receiver == "display"]
    assert len(results) == 1
    payload = results[0].message().payload
    assert payload == {"request_id": "r-1", "aggregate": "sum", "value": 6.0, "contributors": 3}


def test_sources_learn_completion_but_not_the_value(scenario_factory, simulate):
    deployment = simulate(scenario_factory([1.0, 2.0, 3.0]))
    for _, entry in deployment.network.transcript.of_kind("Result"):
        if entry.receiver in deployment.sources:
            assert entry.message().payload == {"status": "completed"}


# ============= CONSUMER FRAMES & OPERATOR CONTROL =============

def test_directory_query_frame(scenario_factory):
    deployment = warmed(scenario_factory([1.0, 2.0, 3.0]))
    consumer = deployment.consumers["display"]
    consumer.query_directory(data_type="occupancy")
    deployment.advance(0.1)
    assert consumer.listings == [{"occupancy": {"aggregates": ["average", "count", "sum"],
                                                "scopes": ["3.A", "3.B"], "units": ["persons"]}}]


@pytest.mark.parametrize("payload", [{"scope": 5}, {"data_type": ["occupancy"]}])
def test_malformed_directory_query_gets_empty_listing(scenario_factory, payload):
    deployment = warmed(scenario_factory([1.0, 2.0, 3.0]))
    consumer = deployment.consumers["display"]
    consumer.send("gateway", ProtocolMessage(kind=MessageKind.DIRECTORY_QUERY, sender="display", payload=payload))
    deployment.advance(0.1)
    consumer.query_directory(scope="3.*")
    deployment.advance(0.1)
    assert consumer.listings[0] == {}
    assert set(consumer.listings[1]) == {"occupancy"}


def test_unreduced_partial_sum_is_dropped(scenario_factory):
    deployment = warmed(scenario_factory([1.0, 2.0, 4.5]))
    deployment.advance(2.025)
    [session_id] = deployment.gateway.sessions
    bad = ProtocolMessage(kind=MessageKind.PARTIAL_SUM, session_id=session_id, sender="S1",
                          payload={"partial": str(2 ** 61 + 5)})
    deployment.sim.send("S1", "gateway", encode_message(bad))
    [record] = deployment.run()
    assert record.outcome == "completed"
    assert record.value == 7.5 and record.contributors == 3 and record.restarts == 0


def test_reload_only_from_operator(scenario_factory, tmp_path):
    scenario = scenario_factory([1.0, 2.0, 3.0], granted=False)
    deployment = Deployment(scenario, settings=Settings(), out_dir=tmp_path).build("sim")
    deployment.warm_up()
    gateway = deployment.gateway
    assert deployment.submit(signed(request_id="before")).error["error"] == "AccessDenied"

    AccessControlList([Grant(consumer_id="display", data_type="occupancy", aggregate=AggregateKind.SUM,
                             purpose="statistics")]).dump(tmp_path / "acl.jsonl")
    gateway.on_message("display", ProtocolMessage(kind=MessageKind.RELOAD, sender="display"))
    assert not gateway.acl.grants
    gateway.on_message("operator", ProtocolMessage(kind=MessageKind.RELOAD, sender="operator"))
    assert len(gateway.acl.grants) == 1

    assert deployment.submit(signed(request_id="after")).status == "completed"


def test_reload_keeps_state_on_broken_file(scenario_factory, tmp_path):
    deployment = Deployment(scenario_factory([1.0, 2.0, 3.0]), settings=Settings(), out_dir=tmp_path).build("sim")
    (tmp_path / "keys.jsonl").write_text("not json\n")
    deployment.gateway.reload()
    assert deployment.gateway.keyring.keys == {"display": "display-secret"}

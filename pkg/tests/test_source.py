import json

import pytest
from pydantic import ValidationError

from smc_gateway.checks import check_blindness
from smc_gateway.config import Settings
from smc_gateway.datarequest import AggregateKind, DataRequest, TimeWindow
from smc_gateway.field import FixedPointCodec, SeededRandomness, encode_fixed
from smc_gateway.protocol import DataSelector, MessageKind, Participant, ProtocolMessage, SessionSpec, encode_message
from smc_gateway.scenario import Deployment
from smc_gateway.source import (
    DataTypeInfo,
    FileReadings,
    PolicyRule,
    Reading,
    ScriptedReadings,
    SourceMetadata,
    SourceNode,
    SourcePolicy,
    TransparencyLog,
    TransparencyRecord,
    evaluate_request,
)
from smc_gateway.transport import SimNetwork

WINDOW = TimeWindow(start=0.0, end=60.0)


def request_text(consumer="display-1", purpose="statistics", data_type="occupancy",
                 aggregate=AggregateKind.SUM) -> str:
    return DataRequest(request_id="r-1", consumer_id=consumer, purpose=purpose, aggregate=aggregate,
                       data_type=data_type, window=WINDOW).to_text()


DISPLAY_POLICY = SourcePolicy(rules=[
    PolicyRule(consumer="display-*", purpose="statistics", data_type="occupancy", decision="allow"),
])


def make_node(address="S1", readings=(), policy=DISPLAY_POLICY, protocols=tuple(AggregateKind)):
    metadata = SourceMetadata(source_id=address, data_types=[DataTypeInfo(name="occupancy")],
                              supported_protocols=list(protocols))
    return SourceNode(address, metadata, policy, ScriptedReadings(readings), TransparencyLog(),
                      Settings(), SeededRandomness(address))


def make_spec(text, parties=("S1", "S2", "S3"), data_type="occupancy", aggregate=AggregateKind.SUM):
    return SessionSpec(
        session_id="s-1", request_id="r-1",
        participants=[Participant(party_id=p, endpoint=p) for p in parties],
        data_selector=DataSelector(data_type=data_type, window=WINDOW),
        protocol_id=aggregate, codec=FixedPointCodec(), original_request=text,
    )


# ============= METADATA & POLICY =============

def test_metadata_requires_unique_data_types():
    with pytest.raises(ValidationError):
        SourceMetadata(source_id="S1", data_types=[])
    with pytest.raises(ValidationError):
        SourceMetadata(source_id="S1", data_types=[DataTypeInfo(name="t"), DataTypeInfo(name="t")])


def test_policy_rule_match_commits():
    assert evaluate_request(request_text(), DISPLAY_POLICY).commit


def test_policy_default_deny():
    decision = evaluate_request(request_text(consumer="maintenance-bot"), DISPLAY_POLICY)
    assert not decision.commit
    assert "default decision" in decision.reason


def test_first_matching_rule_wins():
    policy = SourcePolicy(rules=[
        PolicyRule(purpose="marketing*", decision="deny"),
        PolicyRule(decision="allow"),
    ])
    assert not evaluate_request(request_text(purpose="marketing-analytics"), policy).commit
    assert evaluate_request(request_text(purpose="statistics"), policy).commit


def test_policy_evaluation_is_pure():
    text = request_text(consumer="display-7")
    decisions = {evaluate_request(text, DISPLAY_POLICY) for _ in range(20)}
    assert len(decisions) == 1


def test_malformed_request_is_a_veto():
    decision = evaluate_request('{"request_id": 1}', DISPLAY_POLICY)
    assert not decision.commit
    assert decision.reason.startswith("malformed request")


# ============= TRANSPARENCY LOG =============

def record(session_id="s-1", decision="contributed"):
    return TransparencyRecord(timestamp=1.0, session_id=session_id, original_request=request_text(),
                              consumer_id="display-1", decision=decision)


def test_log_folds_delivery_without_rewriting(tmp_path):
    path = tmp_path / "S1.jsonl"
    log = TransparencyLog(path)
    log.append(record("s-1"))
    log.append(record("s-2", "vetoed"))
    first_line = path.read_text().splitlines()[0]
    log.mark_delivered("s-1", 2.0)

    assert path.read_text().splitlines()[0] == first_line
    assert [r.result_delivered for r in log.records()] == [True, False]
    assert len(log.entries()) == 3
    assert log.verify_chain()

    reloaded = TransparencyLog(path)
    assert reloaded.records() == log.records()
    assert reloaded.verify_chain()


def test_log_detects_edits(tmp_path):
    path = tmp_path / "S1.jsonl"
    log = TransparencyLog(path)
    log.append(record("s-1"))
    log.append(record("s-2"))
    lines = path.read_text().splitlines()
    entry = json.loads(lines[0])
    entry["record"]["decision"] = "vetoed"
    lines[0] = json.dumps(entry, sort_keys=True, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n")
    assert not TransparencyLog(path).verify_chain()


# ============= READINGS =============

def test_latest_reading_in_half_open_window():
    readings = ScriptedReadings([
        Reading(data_type="occupancy", time=10.0, value=1.0),
        Reading(data_type="occupancy", time=50.0, value=2.0),
        Reading(data_type="occupancy", time=60.0, value=3.0),
        Reading(data_type="co2", time=20.0, value=400.0),
    ])
    assert readings.reading("occupancy", WINDOW) == 2.0
    assert readings.reading("occupancy", TimeWindow(start=60.0, end=61.0)) == 3.0
    assert readings.reading("occupancy", TimeWindow(start=0.0, end=10.0)) is None
    assert readings.reading("humidity", WINDOW) is None


def test_file_readings(tmp_path):
    path = tmp_path / "readings.jsonl"
    path.write_text('{"data_type":"occupancy","time":5.0,"value":12.5}\n\n'
                    '{"data_type":"occupancy","time":2.0,"value":3.0}\n')
    assert FileReadings(path).reading("occupancy", WINDOW) == 12.5


# ============= DECISIONS ON ANNOUNCED SESSIONS =============

def test_consider_commits_with_encoded_reading():
    node = make_node(readings=[Reading(data_type="occupancy", time=1.0, value=22.5)])
    decision, consumer, value = node.consider(make_spec(request_text()))
    assert decision.commit and consumer == "display-1"
    assert value == encode_fixed(22.5, FixedPointCodec())


def test_consider_count_contributes_one():
    node = make_node(readings=[Reading(data_type="occupancy", time=1.0, value=22.5)])
    spec = make_spec(request_text(aggregate=AggregateKind.COUNT), aggregate=AggregateKind.COUNT)
    _, _, value = node.consider(spec)
    assert value.value == 1


@pytest.mark.parametrize("spec_kwargs, reason", [
    ({"parties": ("S2", "S3", "S4")}, "not a participant"),
    ({"data_type": "co2"}, "selector"),
    ({"aggregate": AggregateKind.AVERAGE}, "selector"),
])
def test_consider_vetoes_inconsistent_sessions(spec_kwargs, reason):
    node = make_node(readings=[Reading(data_type="occupancy", time=1.0, value=1.0)])
    decision, _, value = node.consider(make_spec(request_text(), **spec_kwargs))
    assert not decision.commit and reason in decision.reason
    assert value is None


def test_consider_vetoes_without_local_data():
    decision, _, _ = make_node().consider(make_spec(request_text()))
    assert not decision.commit and "no occupancy reading" in decision.reason


def test_consider_vetoes_unsupported_protocol():
    node = make_node(readings=[Reading(data_type="occupancy", time=1.0, value=1.0)],
                     protocols=[AggregateKind.COUNT])
    decision, _, _ = node.consider(make_spec(request_text()))
    assert not decision.commit and "unsupported" in decision.reason


def test_consider_vetoes_out_of_range_reading():
    node = make_node(readings=[Reading(data_type="occupancy", time=1.0, value=2.0 ** 41)])
    decision, _, _ = node.consider(make_spec(request_text()))
    assert not decision.commit and "exceeds" in decision.reason


# ============= DISCOVERY TIMING =============

def test_announces_once_per_interval_without_gateway():
    network = SimNetwork(SeededRandomness(0))
    node = make_node()
    network.register(node)
    network.start_nodes()
    network.advance_time(5.5)
    assert node.announces_sent == 6
    assert not node.setup_done


def test_announcing_stops_after_setup(scenario_factory, simulate):
    deployment = simulate(scenario_factory([1.0, 2.0, 3.0]))
    for node in deployment.sources.values():
        assert node.setup_done
        assert node.announces_sent == 1


# ============= PARTICIPATION IN A RUNNING DEPLOYMENT =============

def test_message_counts_per_source(scenario_factory, simulate):
    deployment = simulate(scenario_factory([1.0, 2.0, 4.5]))
    entries = deployment.network.transcript.entries
    for source_id in deployment.sources:
        out_shares = [e for e in entries if e.kind == "ShareTransfer" and e.sender == source_id]
        in_shares = [e for e in entries if e.kind == "ShareTransfer" and e.receiver == source_id]
        partials = [e for e in entries if e.kind == "PartialSum" and e.sender == source_id]
        assert len(out_shares) == 2 and len(in_shares) == 2 and len(partials) == 1


def test_shares_only_after_own_commit(scenario_factory, simulate):
    deployment = simulate(scenario_factory([1.0, 2.0, 4.5, 8.0]))
    entries = deployment.network.transcript.entries
    for index, entry in enumerate(entries):
        if entry.kind != "ShareTransfer":
            continue
        session = entry.message().session_id
        commits = [i for i, e in enumerate(entries[:index])
                   if e.kind == "Commit" and e.sender == entry.sender and e.message().session_id == session]
        assert commits, f"share from {entry.sender} at {index} precedes its commit"


def test_raw_reading_never_reaches_gateway(scenario_factory, simulate, settings):
    deployment = simulate(scenario_factory([22.5, 19.0, 21.25]))
    encoded = encode_fixed(22.5, FixedPointCodec.from_settings(settings)).to_wire()
    for _, entry in deployment.network.transcript.addressed_to("gateway"):
        assert encoded not in entry.frame
    assert check_blindness(deployment.network.transcript, deployment.scenario,
                           FixedPointCodec.from_settings(settings)).passed


def test_completed_sessions_are_marked_delivered(scenario_factory, simulate, tmp_path):
    deployment = simulate(scenario_factory([1.0, 2.0, 4.5]), out_dir=tmp_path)
    for source_id, log in deployment.logs.items():
        records = log.records()
        assert len(records) == 1
        assert records[0].decision == "contributed" and records[0].result_delivered
        assert (tmp_path / "transparency" / f"{source_id}.jsonl").exists()
        assert TransparencyLog(tmp_path / "transparency" / f"{source_id}.jsonl").verify_chain()


def test_silent_peer_triggers_failure_report_and_restart(scenario_factory, simulate):
    lose = {"at": 0.0, "kind": "lose_message", "match": {"kind": "ShareTransfer", "sender": "S3", "receiver": "S1"}}
    deployment = simulate(scenario_factory([1.0, 2.0, 3.0, 4.0], faults=[lose]))
    reports = [e.message() for _, e in deployment.network.transcript.of_kind("Abort")
               if e.sender == "S1" and e.receiver == "gateway"]
    assert reports and reports[0].payload == {"reason": "peer_timeout", "missing": ["S3"]}

    result = deployment.results()[0]
    assert result.outcome == "completed"
    assert result.restarts == 1
    assert result.value == 1.0 + 2.0 + 4.0


def mid_session(scenario):
    """A deployment paused after the Announce reached the sources, before Exchange."""
    deployment = Deployment(scenario, settings=scenario.settings(Settings())).build("sim")
    deployment.warm_up()
    deployment.advance(2.025)
    [session_id] = deployment.gateway.sessions
    return deployment, session_id


def test_unreduced_share_is_dropped(scenario_factory):
    deployment, session_id = mid_session(scenario_factory([1.0, 2.0, 4.5]))
    bad = ProtocolMessage(kind=MessageKind.SHARE_TRANSFER, session_id=session_id, sender="S2",
                          payload={"share": str(2 ** 61 + 5)})
    deployment.sim.send("S2", "S1", encode_message(bad))
    [record] = deployment.run()
    assert record.outcome == "completed"
    assert record.value == 7.5 and record.restarts == 0
    assert len(deployment.sources["S1"].sessions) == 0


@pytest.mark.parametrize("kind", [MessageKind.ABORT, MessageKind.RESULT])
def test_session_frames_from_a_peer_are_ignored(scenario_factory, kind):
    deployment, session_id = mid_session(scenario_factory([1.0, 2.0, 4.5]))
    forged = ProtocolMessage(kind=kind, session_id=session_id, sender="S3", payload={"reason": "forged"})
    deployment.sim.send("S3", "S1", encode_message(forged))
    deployment.advance(0.015)
    assert session_id in deployment.sources["S1"].sessions

    [record] = deployment.run()
    assert record.outcome == "completed" and record.restarts == 0
    [s1_record] = deployment.logs["S1"].records()
    assert s1_record.result_delivered


def test_sessions_expire_when_the_gateway_vanishes(scenario_factory):
    crash = {"at": 5.025, "kind": "drop_node", "node": "gateway"}
    scenario = scenario_factory([1.0, 2.0, 4.5], faults=[crash])
    deployment = Deployment(scenario, settings=scenario.settings(Settings())).build("sim")
    deployment.warm_up()
    lifetime = deployment.sources["S1"].session_lifetime
    assert lifetime == 8.0

    deployment.advance(2.02 + lifetime - 0.1)
    assert all(len(node.sessions) == 1 for node in deployment.sources.values())
    deployment.advance(0.2)
    assert all(not node.sessions for node in deployment.sources.values())

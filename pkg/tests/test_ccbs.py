"""Cross-chain requests end to end through the simulated committee."""

import pytest

from bcmon.chain import EventKind
from bcmon.committee import PrepareMsg
from bcmon.crypto.client import client_sign
from bcmon.harness import Scenario, build, run
from bcmon.relay import PROXY

CHAINS = [{"id": "A", "block_ms": 200}, {"id": "B", "block_ms": 300}, {"id": "C", "block_ms": 250}]


def scenario(to, count=1, **over):
    sc = {"name": "xchain", "seed": 1, "chains": CHAINS, "clients": {"count": count},
          "committee": {"epoch_ms": 1000, "stuck_epochs": 6},
          "workload": {"script": [{"op": "xchain", "src": "A", "to": to, "amount": 2}]}}
    for k, v in over.items():
        if isinstance(v, dict) and k in sc:
            sc[k] = {**sc[k], **v}
        else:
            sc[k] = v
    return sc


def proxy_pending(res, chain="A"):
    return res.world.chains[chain].contracts[PROXY].pending_ids()


def test_single_destination_happy_path():
    res = run(scenario([["B", "bob"]]))
    assert res.ok, res.report["violations"]
    assert res.report["xchain"]["Completed"] == 1
    assert res.world.chains["B"].balance_of("bob") == 2
    assert proxy_pending(res) == []
    assert res.report["counts"]["xchain"]["ok"] == 1


def test_two_destinations_both_accept_before_callback():
    res = run(scenario([["B", "bob"], ["C", "carol"]], count=2))
    assert res.ok and res.report["xchain"]["Completed"] == 2
    assert res.world.chains["B"].balance_of("bob") == 4
    assert res.world.chains["C"].balance_of("carol") == 4
    assert res.report["timings"]["ccbs_process_ms"]["n"] == 2

    def event_times(chain, kind):
        c = res.world.chains[chain]
        stamp = {b.height: b.timestamp for b in c.blocks}
        return {ev.payload["req_id"]: stamp[ev.block_height]
                for ev in c.event_log if ev.contract_id == PROXY and ev.kind == kind}

    accepts = [event_times(c, EventKind.ACCEPT) for c in ("B", "C")]
    callbacks = event_times("A", EventKind.CALLBACK)
    assert len(callbacks) == 2
    for req_id, t in callbacks.items():
        assert all(t > acc[req_id] for acc in accepts)


def test_leader_crash_redrives_once():
    res = run(scenario([["B", "bob"]], count=3, faults=[{"node": 0, "crash_at_ms": 300}]))
    assert res.ok, res.report["violations"]
    assert res.report["xchain"]["Completed"] == 3
    # exactly-once destination credit despite the failover
    assert res.world.chains["B"].balance_of("bob") == 6


def test_bad_signers_excluded():
    res = run(scenario([["B", "bob"]], faults=[{"node": 3, "byzantine": "bad_sig"}]))
    assert res.ok and res.report["xchain"]["Completed"] == 1


def test_destination_failure_ends_stuck_pending():
    res = run(scenario([["B", "bob"]], proxy_reserve=0))
    assert res.ok
    assert res.report["xchain"]["StuckPending"] == 1
    assert res.world.chains["B"].balance_of("bob") == 0
    assert len(proxy_pending(res)) == 1
    assert res.report["counts"]["xchain"]["stuck"] == 1


def test_too_many_silent_relays_never_touch_destination():
    res = run(scenario([["B", "bob"]], faults=[{"node": 1, "byzantine": "silent"},
                                                {"node": 2, "byzantine": "silent"}]))
    assert not res.report["violations"]
    assert res.world.chains["B"].balance_of("bob") == 0
    assert res.report["xchain"]["Completed"] == 0


def test_three_hundred_concurrent_requests_isolated():
    sc = scenario([["B", "bob"]], count=300, clients={"count": 300, "start_spread_ms": 2000})
    res = run(sc)
    assert res.ok, res.report["violations"][:3]
    assert res.report["xchain"]["Completed"] == 300
    assert res.world.chains["B"].balance_of("bob") == 600


@pytest.fixture
def world():
    w = build(Scenario.from_dict(scenario([["B", "bob"]])))
    yield w
    w.sched.close()


def test_forged_leader_signature_gets_no_response(world):
    r1 = world.relays[1]
    forged = PrepareMsg("xreq:nope", b"payload", 0, 0, client_sign(world.relays[2].signer, b"whatever"))
    world.sched.post(r1.pid, forged, at=1)
    world.sched.run(until=5)
    assert r1.ccbs.suspicion == 1
    assert not r1.ccbs.parked


def test_prepare_from_wrong_epoch_leader_dropped(world):
    r1 = world.relays[1]
    payload = b"p"
    msg = PrepareMsg("xreq:r", payload, 2, 0, client_sign(world.relays[2].signer,
                                                           PrepareMsg.signing_bytes("xreq:r", 0, payload)))
    world.sched.post(r1.pid, msg, at=1)
    world.sched.run(until=5)
    assert r1.ccbs.suspicion == 1


def test_valid_prepare_for_unseen_request_is_parked(world):
    r1 = world.relays[1]
    leader = world.relays[0]
    payload = b"p"
    msg = PrepareMsg("xreq:r", payload, 0, 0, client_sign(leader.signer,
                                                           PrepareMsg.signing_bytes("xreq:r", 0, payload)))
    world.sched.post(r1.pid, msg, at=1)
    world.sched.run(until=5)
    assert r1.ccbs.suspicion == 0 and "xreq:r" in r1.ccbs.parked

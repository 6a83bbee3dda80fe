"""Compute tasks: local execution, result attestation and the full task flow."""

import pytest
from hypothesis import given, settings, strategies as st

from bcmon.attest import aggregate_results
from bcmon.chain import Transfer
from bcmon.codec import u8, u64
from bcmon.committee import Committee
from bcmon.cpbs import (
    SourceData,
    TaskStatus,
    account_activity,
    corrupt_payload,
    decode_payload,
    execute_task,
    render_result,
)
from bcmon.crypto.bls import relay_sign, verify_aggregate_same_message
from bcmon.harness import run
from bcmon.records import TAG_TASK_RESULT, ComputeTask, attest_message

ME = "me"
SCRIPTED = (
    Transfer(2, "x", ME, 10),
    Transfer(3, "y", ME, 10),
    Transfer(3, "x", ME, 10),
    Transfer(4, ME, "y", 5),
    Transfer(9, "z", ME, 99),  # outside the window
)


def task(kind=1, window=(1, 5), sources=("A",)):
    return ComputeTask("t", kind, ME, window, sources)


def fields(payload):
    status, values = decode_payload(payload, 1)
    return status, tuple(values)


def test_scripted_activity():
    out = execute_task(task(), {"A": SourceData(10, SCRIPTED)})
    assert fields(out) == (TaskStatus.OK, (4, 30, 5, 2))
    assert render_result(out, 1) == "4,30,5,2"


def test_empty_window():
    assert fields(execute_task(task(window=(5, 8)), {"A": SourceData(10, SCRIPTED)})) == (TaskStatus.OK, (0, 0, 0, 0))


def test_two_sources_concatenate_in_declared_order():
    a = SourceData(10, SCRIPTED)
    b = SourceData(10, (Transfer(1, ME, "q", 7),))
    out = execute_task(task(sources=("B", "A")), {"A": a, "B": b})
    assert out == u8(0) + b"".join(u64(v) for v in (1, 0, 7, 1, 4, 30, 5, 2))


def test_balance_at_height():
    data = SourceData(10, SCRIPTED, genesis=((ME, 100),))
    out = execute_task(task(kind=2, window=(1, 3)), {"A": data})
    assert out == u8(0) + u64(130)


@pytest.mark.parametrize("t,sources,status", [
    (task(window=(1, 11)), {"A": SourceData(10, ())}, TaskStatus.WINDOW_BEYOND_HEIGHT),
    (task(kind=99), {"A": SourceData(10, ())}, TaskStatus.UNKNOWN_KIND),
    (task(sources=("A", "B")), {"A": SourceData(10, ())}, TaskStatus.MISSING_SOURCE),
])
def test_error_codes(t, sources, status):
    out = execute_task(t, sources)
    assert out == u8(status)
    assert render_result(out, t.kind) == f"error,{int(status)}"


def test_corrupt_payload_differs():
    good = execute_task(task(), {"A": SourceData(10, SCRIPTED)})
    assert corrupt_payload(good) != good
    assert corrupt_payload(u8(1)) != u8(1)


@given(st.lists(st.tuples(st.integers(1, 8), st.sampled_from([ME, "a", "b"]),
                          st.sampled_from([ME, "a", "b"]), st.integers(0, 50)), max_size=30),
       st.integers(1, 8), st.integers(0, 4))
@settings(max_examples=100)
def test_activity_matches_naive_scan(rows, lo, span):
    transfers = [Transfer(*r) for r in rows]
    hi = lo + span
    touched = [t for t in transfers if lo <= t.height <= hi and ME in (t.sender, t.receiver)]
    peers = {t.receiver if t.sender == ME else t.sender for t in touched} - {ME}
    want = (len(touched), sum(t.amount for t in touched if t.receiver == ME),
            sum(t.amount for t in touched if t.sender == ME), len(peers))
    assert account_activity(transfers, ME, lo, hi) == want


@pytest.fixture(scope="module")
def committee8(toy):
    return Committee.generate(8, toy, seed=8)


def _results(com, payloads):
    return [(i, p, relay_sign(com.keys[i], attest_message(TAG_TASK_RESULT, p))) for i, p in enumerate(payloads)]


def test_eight_honest_proof_from_first_quorum(committee8):
    good = execute_task(task(), {"A": SourceData(10, SCRIPTED)})
    proof, payload = aggregate_results(_results(committee8, [good] * 8), committee8.registry,
                                       committee8.quorum, TAG_TASK_RESULT)
    assert committee8.quorum == 6
    assert payload == good and proof.signers == list(range(6))
    assert verify_aggregate_same_message(proof, committee8.registry, attest_message(TAG_TASK_RESULT, good), 6)


def test_two_corrupt_proof_from_agreeing_six(committee8):
    good = execute_task(task(), {"A": SourceData(10, SCRIPTED)})
    bad = corrupt_payload(good)
    proof, payload = aggregate_results(_results(committee8, [bad, good, good, bad, good, good, good, good]),
                                       committee8.registry, committee8.quorum, TAG_TASK_RESULT)
    assert payload == good and proof.signers == [1, 2, 4, 5, 6, 7]


def test_even_split_no_quorum(committee8):
    good = execute_task(task(), {"A": SourceData(10, SCRIPTED)})
    bad = corrupt_payload(good)
    assert aggregate_results(_results(committee8, [good, bad] * 4), committee8.registry,
                             committee8.quorum, TAG_TASK_RESULT) is None


def _task_scenario(**over):
    sc = {
        "name": "task", "seed": 3,
        "chains": [{"id": "A", "block_ms": 200, "balances": {"x": 100, "y": 100}},
                   {"id": "B", "block_ms": 300}],
        "clients": {"count": 1},
        "ledger": {"transfers": [
            {"chain": "A", "block": 2, "from": "x", "to": "acct", "amount": 10},
            {"chain": "A", "block": 3, "from": "y", "to": "acct", "amount": 10},
            {"chain": "A", "block": 3, "from": "x", "to": "acct", "amount": 10},
            {"chain": "A", "block": 4, "from": "acct", "to": "y", "amount": 5},
        ]},
        "workload": {"script": [{"op": "task", "kind": 1, "target": "acct", "window": [1, 5],
                                 "sources": ["A"]}]},
    }
    sc.update(over)
    return sc


def test_task_flow_end_to_end():
    res = run(_task_scenario())
    assert res.ok, res.report["violations"]
    assert res.report["tasks"] == {"submitted": 1, "completed": 1}
    acks = [r for r in res.world.sched.trace if r["kind"] == "ack" and r["op"] == "task"]
    assert acks and acks[0]["text"] == "4,30,5,2"


def test_task_flow_with_corrupt_relay():
    res = run(_task_scenario(faults=[{"node": 2, "byzantine": "corrupt_task"}]))
    assert res.ok, res.report["violations"]
    assert res.report["tasks"]["completed"] == 1


def test_unknown_kind_rejected_end_to_end():
    sc = _task_scenario()
    sc["workload"]["script"][0]["kind"] = 99
    res = run(sc)
    assert res.ok
    assert res.report["tasks"]["submitted"] == 0
    assert res.report["counts"]["task"]["rejected"] == 1

"""Channel, proxy and compute contracts driven directly through block production."""

import random

import pytest
from hypothesis import given, settings, strategies as st

from bcmon.chain import Chain, ChainTransaction, EventKind
from bcmon.contracts import ChannelContract, CompContract, ProxyContract
from bcmon.crypto import client_keygen, client_sign
from bcmon.records import (
    TAG_CLOSE,
    TAG_REQUEST,
    TAG_RESULT,
    TAG_TASK_RESULT,
    CrossChainRequest,
    DestResult,
    OffchainTx,
    SignedPacket,
    close_digest_payload,
    encode_result,
    encode_task_body,
    encode_xchain_body,
    task_result_bytes,
    update_digest_payload,
)
from bcmon.transport import PacketContent, PacketKind
from conftest import attest_hex

RELAY = "ofbs"
ALICE, BOB = client_keygen("alice"), client_keygen("bob")


def signed(kp, kind, dest="", amount=0, nonce=0, data=b""):
    content = PacketContent(kind, dest, amount, nonce, data)
    return SignedPacket(kp.pk, content, client_sign(kp, content.to_bytes()))


def pay(kp, to, amount, nonce):
    return OffchainTx(signed(kp, PacketKind.OFF_CHAIN_PAY, to.address, amount, nonce))


class Harness:
    def __init__(self, committee, threshold=1, balances=None):
        self.com = committee
        self.chain = Chain("A", balances or {ALICE.address: 100, BOB.address: 50, "contract:proxy": 1000})
        self.chain.deploy_contract("channel", ChannelContract(), registry=committee.registry,
                                   quorum=committee.quorum, threshold=threshold)
        self.chain.deploy_contract("proxy", ProxyContract(), registry=committee.registry, quorum=committee.quorum)
        self.chain.deploy_contract("comp", CompContract(), registry=committee.registry, quorum=committee.quorum)
        self.n = 0

    def call(self, contract, method, **args):
        self.n += 1
        self.chain.submit_tx(ChainTransaction("relay:0", contract, method, args, nonce=self.n))
        block = self.chain.produce_block()
        return block.receipts[-1]

    def open(self, kp, amount, gen=1):
        pkt = signed(kp, PacketKind.OPEN_CHANNEL, amount=amount, nonce=gen)
        return self.call("channel", "open_channel", relay=RELAY, packet=pkt.to_bytes().hex())

    def update(self, txs, seq, signers=None, payload=None):
        payload = payload or update_digest_payload("A", "channel", RELAY, seq, txs)
        return self.call("channel", "update_channel", relay=RELAY, batch=[t.to_bytes().hex() for t in txs],
                         batch_seq=seq, proof=attest_hex(self.com, b"bcmon/update-channel/v1", payload, signers))

    def close(self, kp, residual, final, gen=1, tamper=False):
        pkt = signed(kp, PacketKind.CLOSE_CHANNEL, nonce=gen)
        payload = close_digest_payload("A", "channel", RELAY, pkt, residual, final)
        if tamper:
            payload = payload[:-1] + bytes([payload[-1] ^ 1])
        return self.call("channel", "close_channel", relay=RELAY, packet=pkt.to_bytes().hex(),
                         residual=[t.to_bytes().hex() for t in residual], final=final,
                         proof=attest_hex(self.com, TAG_CLOSE, payload))

    def view(self, kp):
        rec = self.chain.contracts["channel"].channel(kp.address)
        return None if rec is None else ChannelContract.view(rec)


def test_registry_readback(committee4):
    h = Harness(committee4)
    stored = h.chain.query_state("proxy", "apub")
    assert stored == [committee4.group.g1_to_bytes(k.bpk).hex() for k in committee4.keys]
    assert h.chain.query_state("channel", "quorum") == committee4.quorum == 3


def test_open_escrows(committee4):
    h = Harness(committee4)
    assert h.open(ALICE, 100).ok
    assert h.chain.balance_of(ALICE.address) == 0
    assert h.chain.balance_of("contract:channel") == 100
    assert h.open(BOB, 10).ok
    assert h.view(BOB) == {BOB.address: 10}


def test_open_over_balance_fails_without_change(committee4):
    h = Harness(committee4)
    root = h.chain.state_root()
    r = h.open(ALICE, 101)
    assert not r.ok and "insufficient" in r.error
    assert h.chain.state_root() == root


def test_update_threshold_one(committee4):
    h = Harness(committee4)
    h.open(ALICE, 100)
    r = h.update([pay(ALICE, BOB, 10, 1)], 1)
    assert r.ok
    assert h.view(ALICE) == {ALICE.address: 90, BOB.address: 10}
    ev = [e for e in h.chain.event_log if e.kind == EventKind.UPDATE_CHANNEL]
    assert len(ev) == 1 and ev[0].payload["balances"] == {ALICE.address: 90, BOB.address: 10}


def test_replayed_nonce_rejected(committee4):
    h = Harness(committee4)
    h.open(ALICE, 100)
    tx = pay(ALICE, BOB, 10, 1)
    assert h.update([tx], 1).ok
    root = h.chain.state_root()
    r = h.update([tx], 2)
    assert not r.ok and "bad nonce" in r.error
    assert h.chain.state_root() == root


def test_update_threshold_three_nets_once(committee4):
    h = Harness(committee4, threshold=3)
    h.open(ALICE, 100)
    txs = [pay(ALICE, BOB, a, i + 1) for i, a in enumerate([5, 7, 11])]
    for seq, tx in enumerate(txs, 1):
        assert h.update([tx], seq).ok
        events = [e for e in h.chain.event_log if e.kind == EventKind.UPDATE_CHANNEL]
        assert len(events) == (1 if seq == 3 else 0)
    rec = h.chain.contracts["channel"].channel(ALICE.address)
    assert rec["txs"] == [] and rec["balances"] == {ALICE.address: 77, BOB.address: 23}


@pytest.mark.parametrize("signers,ok", [([0, 1, 2], True), ([1, 2, 3], True), ([0, 1], False)])
def test_update_needs_quorum(committee4, signers, ok):
    h = Harness(committee4)
    h.open(ALICE, 100)
    assert h.update([pay(ALICE, BOB, 1, 1)], 1, signers=signers).ok is ok


def test_update_over_escrow_and_gap(committee4):
    h = Harness(committee4)
    h.open(ALICE, 100)
    assert not h.update([pay(ALICE, BOB, 101, 1)], 1).ok
    assert not h.update([pay(ALICE, BOB, 1, 2)], 1).ok
    assert not h.update([pay(ALICE, BOB, 1, 1)], 2).ok  # batch gap


def test_close_refunds(committee4):
    h = Harness(committee4)
    h.open(ALICE, 100)
    r = h.close(ALICE, [pay(ALICE, BOB, 10, 1)], {ALICE.address: 90, BOB.address: 10})
    assert r.ok, r.error
    assert h.chain.balance_of(ALICE.address) == 90
    assert h.chain.balance_of(BOB.address) == 60
    assert not h.close(ALICE, [], {ALICE.address: 90, BOB.address: 10}).ok


def test_close_forged_digest_fails(committee4):
    h = Harness(committee4)
    h.open(ALICE, 100)
    assert not h.close(ALICE, [], {ALICE.address: 100}, tamper=True).ok
    assert not h.close(ALICE, [], {ALICE.address: 99, BOB.address: 1}).ok
    assert h.view(ALICE) == {ALICE.address: 100}


@given(st.lists(st.integers(0, 40), min_size=1, max_size=12), st.integers(1, 3), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_escrow_matches_sequential_replay(amounts, threshold, per_batch):
    from bcmon.committee import Committee
    from bcmon.crypto import get_group

    com = Committee.generate(4, get_group("toy"), seed=5)
    h = Harness(com, threshold=threshold)
    h.open(ALICE, 100)
    replay = {ALICE.address: 100}
    accepted, nonce, seq = [], 0, 0
    for a in amounts:
        if replay[ALICE.address] >= a:
            nonce += 1
            accepted.append(pay(ALICE, BOB, a, nonce))
            replay[ALICE.address] -= a
            replay[BOB.address] = replay.get(BOB.address, 0) + a
    for i in range(0, len(accepted), per_batch):
        seq += 1
        assert h.update(accepted[i:i + per_batch], seq).ok
    assert h.view(ALICE) == {k: v for k, v in replay.items() if v}
    assert h.chain.balance_of("contract:channel") == 100
    total = sum(h.chain.balances.values())
    assert total == 1150


# --- proxy -------------------------------------------------------------------------

def xpacket(kp, to, amount=3, src="A"):
    return signed(kp, PacketKind.CROSS_CHAIN, amount=amount, data=encode_xchain_body(src, to))


def test_cross_query_events_gapless(committee4):
    h = Harness(committee4, balances={ALICE.address: 1000})
    for i in range(50):
        assert h.call("proxy", "cross_query", packet=xpacket(ALICE, [("A", "x")], 1).to_bytes().hex(),
                      uuid=f"u{i}").ok
    reqs = [e for e in h.chain.event_log if e.kind == EventKind.REQUEST]
    assert len(reqs) == 50 and [e.event_seq for e in reqs] == list(range(50))
    assert len(h.chain.contracts["proxy"].pending_ids()) == 50


def test_cross_query_requires_destination(committee4):
    h = Harness(committee4)
    assert not h.call("proxy", "cross_query", packet=xpacket(ALICE, []).to_bytes().hex(), uuid="u").ok


def test_two_phase_on_one_chain(committee4):
    h = Harness(committee4)
    r = h.call("proxy", "cross_query", packet=xpacket(ALICE, [("A", "dest")]).to_bytes().hex(), uuid="u1")
    raw = bytes.fromhex(h.chain.query_state("proxy", f"req:{r.result['req_id']}")["request"])
    req = CrossChainRequest.from_bytes(raw)
    # below quorum, then a proper proof, then a replay
    assert not h.call("proxy", "cross_accept", request=raw.hex(),
                      proof=attest_hex(committee4, TAG_REQUEST, raw, [0, 1])).ok
    assert h.chain.balance_of("dest") == 0
    acc = h.call("proxy", "cross_accept", request=raw.hex(), proof=attest_hex(committee4, TAG_REQUEST, raw))
    assert acc.ok and h.chain.balance_of("dest") == 3
    assert not h.call("proxy", "cross_accept", request=raw.hex(),
                      proof=attest_hex(committee4, TAG_REQUEST, raw, [1, 2, 3])).ok
    result = encode_result(req.req_id, [DestResult("A", acc.result["height"])])
    bad = h.call("proxy", "cross_callback", result=result.hex(),
                 proof=attest_hex(committee4, TAG_REQUEST, result))
    assert not bad.ok and h.chain.contracts["proxy"].pending_ids() == [req.req_id]
    ok = h.call("proxy", "cross_callback", result=result.hex(), proof=attest_hex(committee4, TAG_RESULT, result))
    assert ok.ok and h.chain.contracts["proxy"].pending_ids() == []


def test_callback_before_query_fails(committee4):
    h = Harness(committee4)
    result = encode_result("nope", [DestResult("A", 1)])
    assert not h.call("proxy", "cross_callback", result=result.hex(),
                      proof=attest_hex(committee4, TAG_RESULT, result)).ok


def test_proof_fuzzing_rejected(committee4):
    h = Harness(committee4)
    r = h.call("proxy", "cross_query", packet=xpacket(ALICE, [("A", "d")]).to_bytes().hex(), uuid="u1")
    raw = bytes.fromhex(h.chain.query_state("proxy", f"req:{r.result['req_id']}")["request"])
    good = bytes.fromhex(attest_hex(committee4, TAG_REQUEST, raw))
    rng = random.Random(3)
    for _ in range(40):
        mutated = bytearray(good)
        mutated[rng.randrange(len(mutated))] ^= 1 << rng.randrange(8)
        assert not h.call("proxy", "cross_accept", request=raw.hex(), proof=bytes(mutated).hex()).ok
    tampered_req = bytearray(raw)
    tampered_req[-1] ^= 1
    assert not h.call("proxy", "cross_accept", request=bytes(tampered_req).hex(), proof=good.hex()).ok
    assert h.chain.balance_of("d") == 0


# --- compute -----------------------------------------------------------------------

def test_task_lifecycle(committee4):
    h = Harness(committee4)
    body = encode_task_body(1, "acct", (1, 2), ["A"])
    r = h.call("comp", "submit_task", packet=signed(ALICE, PacketKind.COMPUTE_TASK, data=body).to_bytes().hex(),
               uuid="t1")
    assert r.ok
    task_id = r.result["task_id"]
    assert h.chain.query_state("comp", f"task:{task_id}")["status"] == "Pending"
    r2 = h.call("comp", "submit_task", packet=signed(ALICE, PacketKind.COMPUTE_TASK, data=body).to_bytes().hex(),
                uuid="t2")
    assert r2.ok and r2.result["task_id"] != task_id
    payload = bytes(1) + bytes(32)
    res = task_result_bytes(task_id, payload)
    assert not h.call("comp", "task_callback", result=res.hex(),
                      proof=attest_hex(committee4, TAG_RESULT, res)).ok
    assert h.call("comp", "task_callback", result=res.hex(), proof=attest_hex(committee4, TAG_TASK_RESULT, res)).ok
    rec = h.chain.query_state("comp", f"task:{task_id}")
    assert rec["status"] == "Completed" and rec["result"] == payload.hex()


def test_unknown_task_kind_rejected(committee4):
    h = Harness(committee4)
    body = encode_task_body(99, "acct", (1, 2), ["A"])
    r = h.call("comp", "submit_task", packet=signed(ALICE, PacketKind.COMPUTE_TASK, data=body).to_bytes().hex(),
               uuid="t1")
    assert not r.ok and "kind" in r.error

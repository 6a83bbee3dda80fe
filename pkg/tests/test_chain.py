"""Scheduler and in-process chain."""

import pytest
from hypothesis import given, settings, strategies as st

from bcmon.chain import (
    ABSENT,
    Chain,
    ChainError,
    ChainNode,
    ChainTransaction,
    Contract,
    ContractError,
    EventKind,
    ReadTransfers,
    Subscribe,
    SubmitTx,
)
from bcmon.sim import Context, Process, Scheduler


class KV(Contract):
    METHODS = ("put", "copy", "fail", "pay")

    def put(self, key, value):
        self.storage.set(key, value)
        self.emit(EventKind.REQUEST, {"key": key})

    def copy(self, src, dst):
        self.storage.set(dst, self.storage.get(src))

    def fail(self, key):
        self.storage.set(key, "partial")
        self.transfer(self.caller, "sink", 1)
        raise ContractError("boom")

    def pay(self, to, amount):
        self.transfer(self.caller, to, amount)


def _tx(method, nonce=0, submitter="alice", **args):
    return ChainTransaction(submitter, "kv", method, args, nonce=nonce)


@pytest.fixture
def chain():
    c = Chain("A", {"alice": 10})
    c.deploy_contract("kv", KV())
    return c


# --- chain ---------------------------------------------------------------------

def test_empty_block_advances_height(chain):
    b = chain.produce_block(5)
    assert b.height == 1 and not b.txs and chain.height == 1


def test_redeploy_same_name_fails(chain):
    with pytest.raises(ChainError):
        chain.deploy_contract("kv", KV())


def test_in_block_ordering_reads_prior_write(chain):
    chain.submit_tx(_tx("put", key="a", value=7))
    chain.submit_tx(_tx("copy", nonce=1, src="a", dst="b"))
    chain.produce_block()
    assert chain.query_state("kv", "b") == 7


def test_failing_tx_rolls_back_only_itself(chain):
    chain.submit_tx(_tx("put", key="x", value=1))
    chain.submit_tx(_tx("fail", nonce=1, key="y"))
    chain.submit_tx(_tx("put", nonce=2, key="z", value=3))
    block = chain.produce_block()
    assert [r.ok for r in block.receipts] == [True, False, True]
    assert block.receipts[1].error == "boom"
    assert chain.query_state("kv", "y", None) is None
    assert chain.balance_of("alice") == 10 and chain.balance_of("sink") == 0
    assert chain.query_state("kv", "z") == 3


def test_read_mid_mempool_sees_old_value(chain):
    chain.submit_tx(_tx("put", key="a", value=1))
    chain.produce_block()
    chain.submit_tx(_tx("put", nonce=1, key="a", value=2))
    assert chain.query_state("kv", "a") == 1
    chain.produce_block()
    assert chain.query_state("kv", "a") == 2
    assert chain.query_state("kv", "never", ABSENT) is ABSENT


def test_state_outside_blocks_rejected(chain):
    with pytest.raises(ChainError):
        chain.contracts["kv"].storage.set("k", 1)


def test_subscriptions_exactly_once(chain):
    s1, s2 = chain.subscribe("kv", EventKind.REQUEST), chain.subscribe("kv")
    for i in range(3):
        chain.submit_tx(_tx("put", nonce=i, key=f"k{i}", value=i))
    chain.produce_block()
    got = s1.poll()
    assert [e.payload["key"] for e in got] == ["k0", "k1", "k2"]
    assert len(s2.poll()) == 3
    assert s1.poll() == [] and s2.poll() == []


def test_transfers_recorded_per_block(chain):
    chain.submit_tx(_tx("pay", to="bob", amount=4))
    chain.produce_block()
    chain.submit_tx(_tx("pay", nonce=1, to="carol", amount=1))
    chain.produce_block()
    assert [(t.height, t.receiver, t.amount) for t in chain.transfers_between(1, 2)] == [(1, "bob", 4), (2, "carol", 1)]
    assert chain.transfers_between(2, 2)[0].receiver == "carol"


def test_insufficient_balance_fails(chain):
    chain.submit_tx(_tx("pay", to="bob", amount=11))
    assert not chain.produce_block().receipts[0].ok
    assert chain.balance_of("alice") == 10


@given(st.lists(st.tuples(st.sampled_from(["put", "pay"]), st.integers(0, 5)), max_size=25))
@settings(max_examples=60, deadline=None)
def test_determinism_and_event_exactness(ops):
    roots, counts = [], []
    for _ in range(2):
        c = Chain("A", {"alice": 10})
        c.deploy_contract("kv", KV())
        for i, (m, v) in enumerate(ops):
            args = {"key": f"k{v}", "value": v} if m == "put" else {"to": "bob", "amount": v}
            c.submit_tx(_tx(m, nonce=i, **args))
            if i % 4 == 3:
                c.produce_block()
        c.produce_block()
        roots.append(c.state_root())
        ok_puts = sum(1 for b in c.blocks for r in b.receipts if r.ok and r.method == "put")
        counts.append((len(c.event_log), ok_puts))
        assert sum(c.balances.values()) == 10
    assert roots[0] == roots[1]
    assert counts[0][0] == counts[0][1]


# --- scheduler -----------------------------------------------------------------

class Echo(Process):
    def __init__(self, pid, peer=None, cost=0.0):
        super().__init__(pid)
        self.peer = peer
        self.cost = cost
        self.got = []

    def on_message(self, ctx: Context, msg):
        self.got.append((ctx.now, msg))
        ctx.log("got", msg=msg)
        ctx.work(self.cost)
        if self.peer and msg < 5:
            ctx.send(self.peer, msg + 1, 10)


def _ping(parallel):
    s = Scheduler(seed=1, parallel=parallel)
    a, b = s.add(Echo("a", "b", 0.5)), s.add(Echo("b", "a", 0.5))
    s.post("a", 0)
    s.post("b", 100)
    s.run()
    s.close()
    return s, a, b


def test_scheduler_order_and_busy_carry():
    s, a, b = _ping(False)
    # half-ms costs carry over: b's second handler is charged a whole ms
    assert [t for t, _ in a.got] == [0, 21, 42]
    assert [m for _, m in b.got] == [100, 1, 3, 5]


def test_parallel_mode_same_trace():
    s1, *_ = _ping(False)
    s2, *_ = _ping(True)
    assert s1.trace == s2.trace and s1.now == s2.now


def test_crash_and_recover():
    s = Scheduler()
    a = s.add(Echo("a"))
    s.crash("a", 5)
    s.post("a", 1, at=7)
    s.recover("a", 9)
    s.post("a", 2, at=10)
    s.run()
    assert [m for _, m in a.got] == [2]
    assert [r["kind"] for r in s.trace] == ["crash", "recover", "got"]


def test_run_until_and_stop():
    s = Scheduler()
    a = s.add(Echo("a"))
    for t in (1, 5, 9):
        s.post("a", 9, at=t)
    s.run(until=6)
    assert len(a.got) == 2 and s.now == 6
    s.run(stop=lambda: True)
    assert len(a.got) == 2
    with pytest.raises(ValueError):
        s.post("a", 1, at=2)


def test_chain_node_drives_blocks_and_pushes():
    s = Scheduler()
    chain = Chain("A", {"alice": 10})
    chain.deploy_contract("kv", KV())
    s.add(ChainNode(chain, 100, rpc_ms=3))
    sink = s.add(Echo("sink"))
    s.post("chain:A", Subscribe("sink", "kv"))
    s.post("chain:A", SubmitTx(_tx("put", key="k", value=1)), at=50)
    s.post("chain:A", ReadTransfers("sink", "r", 0, 9), at=150)
    s.run(until=250)
    kinds = [type(m).__name__ for _, m in sink.got]
    assert kinds == ["ChainReceipt", "ChainEvent", "TransfersReply"]
    assert sink.got[0][0] == 103
    reply = sink.got[2][1]
    assert reply.height == 1 and reply.transfers == ()

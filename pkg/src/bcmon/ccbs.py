"""Two-phase cross-chain attestation run by the relay committee.

Phase one attests the request bytes emitted by the source proxy and ends with
``cross_accept`` on every destination. Phase two attests the per-destination
results read from the Accept events and ends with ``cross_callback`` on the
source. Both phases use the same round: the epoch leader broadcasts a signed
prepare, each relay re-derives the bytes from its own subscription and
signs them only if they match, and every relay aggregates the first quorum.

Epochs are counted from the moment a relay saw the request and advance with
virtual time, so all live relays agree on who leads without talking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from bcmon.bft import elect_leader
from bcmon.chain import EventKind, TxReceipt
from bcmon.committee import AckCode, PrepareMsg
from bcmon.crypto.client import client_sign, client_verify
from bcmon.records import TAG_REQUEST, TAG_RESULT, CrossChainRequest, DestResult, encode_result
from bcmon.sim import Context

PHASES = ("Listening", "Prepared", "Aggregated", "AcceptSubmitted", "CallbackSubmitted", "Done")


@dataclass
class Tracked:
    """Per-request progress as seen by one relay."""

    key: str
    seen_at: int
    epoch: int = 0
    phase: str = "Listening"
    status: str = "Pending"  # Pending | Completed | StuckPending

    def advance(self, phase: str) -> None:
        if PHASES.index(phase) > PHASES.index(self.phase):
            self.phase = phase


class EpochAgent:
    """Leader rotation, prepare signing/verification and deadline handling."""

    heads: tuple[str, ...] = ()

    def __init__(self, node: Any):
        self.node = node
        self.active: dict[str, Tracked] = {}
        self.parked: dict[str, list[PrepareMsg]] = {}
        self.suspicion = 0

    def leader(self, epoch: int) -> int:
        return elect_leader(range(self.node.committee.n), epoch)

    def leads(self, st: Tracked) -> bool:
        return self.leader(st.epoch) == self.node.idx

    def send_prepare(self, ctx: Context, st: Tracked, topic: str, payload: bytes) -> None:
        sig = client_sign(self.node.signer, PrepareMsg.signing_bytes(topic, st.epoch, payload))
        self.node.broadcast(ctx, PrepareMsg(topic, payload, self.node.idx, st.epoch, sig))

    def on_prepare(self, ctx: Context, msg: PrepareMsg) -> None:
        n = self.node.committee.n
        if not 0 <= msg.leader < n or msg.leader != self.leader(msg.epoch):
            self.suspicion += 1
            return
        ctx.work(self.node.costs.client_verify_ms)
        pk = self.node.committee.signers[msg.leader].pk
        if not client_verify(pk, PrepareMsg.signing_bytes(msg.topic, msg.epoch, msg.payload), msg.sig):
            self.suspicion += 1
            ctx.log("bad_leader_sig", topic=msg.topic, leader=msg.leader)
            return
        self.respond(ctx, msg)

    def park(self, msg: PrepareMsg) -> None:
        self.parked.setdefault(msg.topic, []).append(msg)

    def unpark(self, ctx: Context, topic: str) -> None:
        for msg in self.parked.pop(topic, []):
            self.respond(ctx, msg)

    def on_tick(self, ctx: Context) -> None:
        epoch_ms = self.node.cfg.epoch_ms
        for key in list(self.active):
            st = self.active[key]
            epoch = (ctx.now - st.seen_at) // epoch_ms
            if epoch <= st.epoch:
                continue
            st.epoch = epoch
            if epoch >= self.node.cfg.stuck_epochs:
                st.status = "StuckPending"
                del self.active[key]
                ctx.log(f"{self.prefix}_stuck", key=key, phase=st.phase)
                self.on_stuck(ctx, st)
            elif self.leads(st):
                ctx.log(f"{self.prefix}_redrive", key=key, epoch=epoch, phase=st.phase)
                self.redrive(ctx, st)

    prefix = "agent"

    def respond(self, ctx: Context, msg: PrepareMsg) -> None:
        raise NotImplementedError

    def redrive(self, ctx: Context, st: Tracked) -> None:
        raise NotImplementedError

    def on_stuck(self, ctx: Context, st: Tracked) -> None:
        raise NotImplementedError


@dataclass
class XRequest(Tracked):
    raw: bytes = b""
    request: CrossChainRequest | None = None
    accepts: dict[str, int] = field(default_factory=dict)
    result: bytes | None = None


class CcbsAgent(EpochAgent):
    prefix = "ccbs"

    def __init__(self, node: Any):
        super().__init__(node)
        self.reqs: dict[str, XRequest] = {}
        self.early_accepts: dict[str, dict[str, int]] = {}

    def _payload(self, st: XRequest, head: str) -> bytes | None:
        return st.raw if head == "xreq" else st.result

    # chain events -----------------------------------------------------------

    def on_event(self, ctx: Context, ev: Any) -> None:
        p = ev.payload
        if ev.kind == EventKind.REQUEST:
            req_id = p["req_id"]
            if req_id in self.reqs:
                return
            raw = bytes.fromhex(p["request"])
            st = XRequest(req_id, ctx.now, raw=raw, request=CrossChainRequest.from_bytes(raw))
            st.accepts.update(self.early_accepts.pop(req_id, {}))
            self.reqs[req_id] = st
            self.active[req_id] = st
            if self.leads(st):
                ctx.log("ccbs_request", key=req_id, dests=len(st.request.dest_chains))
                self.send_prepare(ctx, st, f"xreq:{req_id}", raw)
            self.unpark(ctx, f"xreq:{req_id}")
            self._maybe_result(ctx, st)
        elif ev.kind == EventKind.ACCEPT:
            req_id = p["req_id"]
            st = self.reqs.get(req_id)
            if st is None:
                self.early_accepts.setdefault(req_id, {}).setdefault(p["chain"], p["height"])
                return
            st.accepts.setdefault(p["chain"], p["height"])
            self._maybe_result(ctx, st)
        elif ev.kind == EventKind.CALLBACK:
            st = self.reqs.get(p["req_id"])
            if st is None or st.phase == "Done":
                return
            st.advance("Done")
            st.status = "Completed"
            self.active.pop(st.key, None)
            if self.leads(st):
                ctx.log("ccbs_done", key=st.key)
            self.node.finish(ctx, st.request.uuid, AckCode.OK,
                             f"completed,dests={len(st.request.dest_chains)}")

    def _maybe_result(self, ctx: Context, st: XRequest) -> None:
        if st.result is not None or not set(st.request.dest_chains) <= set(st.accepts):
            return
        st.result = encode_result(st.key, [DestResult(c, st.accepts[c]) for c in st.request.dest_chains])
        if self.leads(st):
            ctx.log("ccbs_accepted", key=st.key)
            self.send_prepare(ctx, st, f"xres:{st.key}", st.result)
        self.unpark(ctx, f"xres:{st.key}")

    # prepare / aggregate ----------------------------------------------------

    def respond(self, ctx: Context, msg: PrepareMsg) -> None:
        head, req_id = msg.topic.split(":", 1)
        st = self.reqs.get(req_id)
        mine = None if st is None else self._payload(st, head)
        if mine is None:
            self.park(msg)  # not seen on our own subscription yet
            return
        if msg.payload != mine:
            ctx.log("ccbs_mismatch", key=req_id, leader=msg.leader)
            return
        if head == "xreq":
            st.advance("Prepared")
        self.node.sign_topic(ctx, msg.topic, TAG_REQUEST if head == "xreq" else TAG_RESULT, mine)

    def on_proof(self, ctx: Context, topic: str) -> None:
        head, req_id = topic.split(":", 1)
        st = self.reqs.get(req_id)
        if st is None:
            return
        if head == "xreq":
            st.advance("Aggregated")
            if self.leads(st):
                ctx.log("ccbs_aggregated", key=req_id)
                self._submit_accepts(ctx, st)
        elif self.leads(st):
            ctx.log("ccbs_result_aggregated", key=req_id)
            self._submit_callback(ctx, st)

    def _submit_accepts(self, ctx: Context, st: XRequest) -> None:
        proof = self.node.proof_hex(f"xreq:{st.key}")
        for chain in st.request.dest_chains:
            if chain not in st.accepts:
                self.node.submit_tx(ctx, chain, "proxy", "cross_accept",
                                    {"request": st.raw.hex(), "proof": proof},
                                    f"accept:{st.key}:{chain}:{st.epoch}")
        st.advance("AcceptSubmitted")

    def _submit_callback(self, ctx: Context, st: XRequest) -> None:
        proof = self.node.proof_hex(f"xres:{st.key}")
        self.node.submit_tx(ctx, st.request.src_chain, "proxy", "cross_callback",
                            {"result": st.result.hex(), "proof": proof}, f"callback:{st.key}:{st.epoch}")
        st.advance("CallbackSubmitted")

    def on_receipt(self, ctx: Context, r: TxReceipt) -> None:
        if r.submitter == self.node.pid and not r.ok:
            ctx.log("ccbs_rejected", tag=r.tag, error=r.error)

    # failover ---------------------------------------------------------------

    def redrive(self, ctx: Context, st: XRequest) -> None:
        head = "xreq" if st.result is None else "xres"
        topic = f"{head}:{st.key}"
        if self.node.collector.proof(topic) is None:
            self.send_prepare(ctx, st, topic, self._payload(st, head))
        elif head == "xreq":
            self._submit_accepts(ctx, st)
        else:
            self._submit_callback(ctx, st)

    def on_stuck(self, ctx: Context, st: XRequest) -> None:
        missing = [c for c in st.request.dest_chains if c not in st.accepts]
        self.node.finish(ctx, st.request.uuid, AckCode.STUCK, "stuck,missing=" + "|".join(missing))

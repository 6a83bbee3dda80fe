"""The relay process: SMS gateway, replicated channel state and chain driver.

Every relay runs the same deterministic state machine over the PBFT log.
Three kinds of items are ordered:

* ``sms``   a client packet received by some gateway relay
* ``flush`` the leader's decision to cut a batch from the queue
* ``fact``  the first receipt seen for one of the relay's own chain calls

Facts let outcomes that depend on the chain (an open that failed for lack of
funds, a batch that landed) enter the replicated state at the same log
position on every node. A relay only votes for a fact it has observed itself.

Chain calls ("ops") are submitted by the current PBFT leader once their
attestation and ordering dependencies are met; a new leader resubmits
whatever is still unresolved.
"""

from __future__ import annotations

from typing import Any

from bcmon.attest import AttestMsg, SigCollector
from bcmon.bft import BFT_MESSAGES, BftRequest, PbftReplica
from bcmon.ccbs import CcbsAgent
from bcmon.chain import (
    ChainEvent,
    ChainReceipt,
    ChainTransaction,
    EventKind,
    SubmitTx,
    Subscribe,
    TransfersReply,
)
from bcmon.codec import Reader
from bcmon.committee import (
    AckBody,
    AckCode,
    ClientInfo,
    Committee,
    PrepareMsg,
    RelayConfig,
    SmsDeliver,
    SmsReply,
    Tick,
)
from bcmon.cpbs import CpbsAgent
from bcmon.crypto.bls import encode_proof, relay_sign
from bcmon.ofbs import ChannelView, FlushWorker, validate_offline_tx
from bcmon.records import (
    TAG_CLOSE,
    TAG_UPDATE,
    OffchainTx,
    SignedPacket,
    attest_message,
    close_digest_payload,
    request_from_packet,
    task_from_packet,
    update_digest_payload,
)
from bcmon import transport
from bcmon.sim import Context, Process
from bcmon.transport import PacketKind, SmsPacket

CHANNEL = "channel"
PROXY = "proxy"
COMP = "comp"

BYZANTINE_MODES = ("silent", "bad_sig", "corrupt_task")


class RelayNode(Process):
    def __init__(self, idx: int, committee: Committee, cfg: RelayConfig,
                 clients: dict[str, ClientInfo], byzantine: str | None = None):
        super().__init__(committee.pid(idx))
        if byzantine is not None and byzantine not in BYZANTINE_MODES:
            raise ValueError(f"unknown byzantine mode {byzantine!r}")
        self.idx = idx
        self.committee = committee
        self.cfg = cfg
        self.costs = cfg.costs
        self.clients = clients
        self.byzantine = byzantine
        self.kp = committee.keys[idx]
        self.signer = committee.signers[idx]
        self.replica = PbftReplica(idx, committee.pids, committee.f, deliver=self._execute,
                                   ready=self._ready, vc_timeout_ms=cfg.vc_timeout_ms,
                                   delay=self._delay, on_view=self._on_view)
        self.collector = SigCollector(committee.registry, committee.quorum)
        self.my_attest: dict[str, AttestMsg] = {}

        # gateway
        self.gateway: dict[str, tuple[str, int]] = {}
        self.forwarded: set[str] = set()
        self.outcomes: dict[str, AckBody] = {}

        # replicated channel state
        self.channels: dict[str, ChannelView] = {}
        self.gens: dict[str, int] = {}
        self.opening: set[str] = set()
        self.worker = FlushWorker(cfg.buffer, cfg.timeout_ms, 0, cfg.max_hold_ms)
        self.batch_seq = 0
        self.inflight: dict[int, list[OffchainTx]] = {}
        self.ops: dict[str, dict] = {}
        self.task_uuid: dict[str, str] = {}
        self.alerts: list[dict] = []

        # local chain observations
        self.first_receipt: dict[str, Any] = {}
        self.facts: dict[str, dict] = {}
        self.landed: set[int] = set()
        self.landed_upto = 0

        # leader-side bookkeeping
        self.open_ops: list[str] = []
        self.submitted: set[str] = set()
        self.ready_since: dict[str, int] = {}
        self.flush_pending: str | None = None
        self.flush_count = 0
        self.tx_nonce = 0

        self.ccbs = CcbsAgent(self)
        self.cpbs = CpbsAgent(self)

    # plumbing ---------------------------------------------------------------

    def _delay(self, ctx: Context, dst: int) -> int:
        return 0 if dst == self.idx else self.cfg.link_ms

    def broadcast(self, ctx: Context, msg: Any) -> None:
        for j, pid in enumerate(self.committee.pids):
            ctx.send(pid, msg, self._delay(ctx, j))

    @property
    def is_leader(self) -> bool:
        return self.replica.is_leader

    def chain_pid(self, chain: str) -> str:
        return f"chain:{chain}"

    def submit_tx(self, ctx: Context, chain: str, contract: str, method: str, args: dict,
                  tag: str) -> None:
        self.tx_nonce += 1
        tx = ChainTransaction(self.pid, contract, method, args, self.tx_nonce, tag)
        ctx.send(self.chain_pid(chain), SubmitTx(tx), self.cfg.rpc_ms)
        ctx.log("submit", tag=tag, chain=chain, method=method)

    def sign_topic(self, ctx: Context, topic: str, tag: bytes, payload: bytes) -> None:
        """Sign ``payload`` under ``tag`` once and broadcast it; later calls re-broadcast."""
        msg = self.my_attest.get(topic)
        if msg is None:
            ctx.work(self.costs.bls_sign_ms)
            message = attest_message(tag, payload)
            if self.byzantine == "bad_sig":
                message = attest_message(tag, payload + b"\x00")
            msg = AttestMsg(topic, tag, payload, self.idx, relay_sign(self.kp, message))
            self.my_attest[topic] = msg
        self.broadcast(ctx, msg)

    def proof_hex(self, topic: str) -> str | None:
        got = self.collector.proof(topic)
        if got is None:
            return None
        return encode_proof(got[0], self.committee.group).hex()

    def finish(self, ctx: Context, uuid: str, code: AckCode, text: str = "") -> None:
        if uuid in self.outcomes:
            return
        self.outcomes[uuid] = AckBody(uuid, code, text)
        if uuid in self.gateway:
            self._send_ack(ctx, uuid)

    def _send_ack(self, ctx: Context, uuid: str) -> None:
        pid, attempt = self.gateway[uuid]
        self.downlink(ctx, pid, self.outcomes[uuid].to_bytes(), uuid, attempt)

    def downlink(self, ctx: Context, pid: str, data: bytes, key: str, attempt: int = 0) -> None:
        t0 = ctx.ready_at
        sched = transport.send(data, key, self.cfg.profile, t0, seed=self.cfg.seed,
                               attempt=attempt, direction="down")
        if sched.delivered:
            ctx.send(pid, SmsReply(data), sched.delivered_at - t0)

    # lifecycle --------------------------------------------------------------

    def on_start(self, ctx: Context) -> None:
        subs = {(self.cfg.channel_chain, CHANNEL), (self.cfg.comp_chain, COMP)}
        subs |= {(c, PROXY) for c in self.cfg.chains}
        for chain, contract in sorted(subs):
            ctx.send(self.chain_pid(chain), Subscribe(self.pid, contract))
        ctx.timer(self.cfg.tick_ms, Tick())

    def on_recover(self, ctx: Context) -> None:
        ctx.timer(self.cfg.tick_ms, Tick())
        self.replica.rearm(ctx)

    def on_message(self, ctx: Context, msg: Any) -> None:
        if isinstance(msg, Tick):
            ctx.timer(self.cfg.tick_ms, Tick())
            if self.byzantine != "silent":
                self._on_tick(ctx)
            return
        if self.byzantine == "silent":
            return
        ctx.work(self.costs.msg_ms)
        if isinstance(msg, SmsDeliver):
            self._on_sms(ctx, msg)
        elif isinstance(msg, BFT_MESSAGES):
            self.replica.handle(ctx, msg)
        elif isinstance(msg, ChainReceipt):
            self._on_receipt(ctx, msg.receipt)
        elif isinstance(msg, ChainEvent):
            self._on_event(ctx, msg.event)
        elif isinstance(msg, AttestMsg):
            self._on_attest(ctx, msg)
        elif isinstance(msg, PrepareMsg):
            agent = self.ccbs if msg.topic.startswith("x") else self.cpbs
            agent.on_prepare(ctx, msg)
        elif isinstance(msg, TransfersReply):
            self.cpbs.on_reply(ctx, msg)

    # gateway ----------------------------------------------------------------

    def _on_sms(self, ctx: Context, msg: SmsDeliver) -> None:
        try:
            packet = SmsPacket.from_bytes(msg.data)
        except ValueError:
            # unparseable body: answer if at least the uuid can be read
            try:
                uuid = Reader(msg.data).lp_str()
            except ValueError:
                return
            self.gateway[uuid] = (msg.reply_to, msg.attempt)
            self.finish(ctx, uuid, AckCode.REJECTED, "unknown kind")
            return
        uuid = packet.uuid
        self.gateway[uuid] = (msg.reply_to, msg.attempt)
        if uuid in self.outcomes:
            self._send_ack(ctx, uuid)
            return
        if uuid in self.forwarded:
            return
        self.forwarded.add(uuid)
        self.replica.submit(ctx, uuid, {"t": "sms", "uuid": uuid, "sms": msg.data.hex()})

    # ordered execution ------------------------------------------------------

    def _ready(self, item: Any) -> bool:
        if item.get("t") == "fact":
            return self.facts.get(item["key"]) == item
        return True

    def _execute(self, ctx: Context, seq: int, key: str, item: dict) -> None:
        kind = item["t"]
        if self.is_leader:
            ctx.log("ofbs_exec", seq=seq, key=key, item=kind)
        if kind == "sms":
            self._exec_sms(ctx, item)
        elif kind == "flush":
            self._exec_flush(ctx, item)
        elif kind == "fact":
            self._exec_fact(ctx, item)

    def _add_op(self, ctx: Context, tag: str, **op: Any) -> None:
        self.ops[tag] = op
        if tag not in self.first_receipt:
            self.open_ops.append(tag)
            self._pump(ctx)

    def _exec_sms(self, ctx: Context, item: dict) -> None:
        uuid = item["uuid"]
        packet = SmsPacket.from_bytes(bytes.fromhex(item["sms"]))
        info = self.clients.get(packet.sender_address)
        if info is None:
            self.finish(ctx, uuid, AckCode.REJECTED, "unknown client")
            return
        sp = SignedPacket(info.pk, packet.content, packet.signature)
        client = sp.sender
        kind = packet.content.kind
        ctx.work(self.costs.client_verify_ms)

        if kind == PacketKind.OFF_CHAIN_PAY:
            view = self.channels.get(client)
            bad = validate_offline_tx(view, sp)
            if bad is not None:
                self.finish(ctx, uuid, AckCode.REJECTED, bad.value)
                return
            tx = OffchainTx(sp)
            view.apply(tx)
            self.worker.enqueue(ctx.now, tx)
            ctx.work(self.costs.db_ms)
            self.finish(ctx, uuid, AckCode.OK, f"nonce={view.nonce},balance={view.balance(client)}")
            return

        if not sp.verify():
            self.finish(ctx, uuid, AckCode.REJECTED, "bad signature")
            return

        if kind == PacketKind.OPEN_CHANNEL:
            if client in self.channels or client in self.opening:
                self.finish(ctx, uuid, AckCode.REJECTED, "channel already open")
            elif packet.content.nonce != self.gens.get(client, 0) + 1:
                self.finish(ctx, uuid, AckCode.REJECTED, "bad nonce")
            else:
                self.opening.add(client)
                self._add_op(ctx, f"open:{uuid}", kind="open", uuid=uuid, client=client,
                             chain=self.cfg.channel_chain, contract=CHANNEL, method="open_channel",
                             args={"relay": self.committee.relay_id, "packet": sp.to_bytes().hex()})

        elif kind == PacketKind.CLOSE_CHANNEL:
            view = self.channels.get(client)
            if view is None or view.status != "open":
                self.finish(ctx, uuid, AckCode.REJECTED, "no open channel")
            elif packet.content.nonce != self.gens.get(client, 0):
                self.finish(ctx, uuid, AckCode.REJECTED, "bad nonce")
            else:
                view.status = "closing"
                residual = self.worker.remove_payer(client)
                final = dict(view.balances)
                tag = f"close:{uuid}"
                self._add_op(ctx, tag, kind="close", uuid=uuid, client=client, after=self.batch_seq,
                             topic=tag, chain=self.cfg.channel_chain, contract=CHANNEL,
                             method="close_channel",
                             args={"relay": self.committee.relay_id, "packet": sp.to_bytes().hex(),
                                   "residual": [t.to_bytes().hex() for t in residual],
                                   "final": final})
                payload = close_digest_payload(self.cfg.channel_chain, CHANNEL, self.committee.relay_id,
                                               sp, residual, final)
                self.sign_topic(ctx, tag, TAG_CLOSE, payload)

        elif kind == PacketKind.CROSS_CHAIN:
            try:
                req = request_from_packet(sp, uuid)
            except ValueError:
                self.finish(ctx, uuid, AckCode.REJECTED, "malformed request")
                return
            known = set(self.cfg.chains)
            if req.src_chain not in known or not req.to or any(c not in known for c, _ in req.to):
                self.finish(ctx, uuid, AckCode.REJECTED, "unknown chain")
                return
            self._add_op(ctx, f"xquery:{uuid}", kind="xquery", uuid=uuid, chain=req.src_chain,
                         contract=PROXY, method="cross_query",
                         args={"packet": sp.to_bytes().hex(), "uuid": uuid})

        elif kind == PacketKind.COMPUTE_TASK:
            try:
                task = task_from_packet(sp, uuid)
            except ValueError:
                self.finish(ctx, uuid, AckCode.REJECTED, "malformed task")
                return
            if any(s not in self.cfg.chains for s in task.sources):
                self.finish(ctx, uuid, AckCode.REJECTED, "unknown chain")
                return
            self.task_uuid[task.task_id] = uuid
            self._add_op(ctx, f"task:{uuid}", kind="task", uuid=uuid, chain=self.cfg.comp_chain,
                         contract=COMP, method="submit_task",
                         args={"packet": sp.to_bytes().hex(), "uuid": uuid})

    def _exec_flush(self, ctx: Context, item: dict) -> None:
        if self.flush_pending == item["id"]:
            self.flush_pending = None
        n = min(item["n"], len(self.worker.queue))
        if n == 0:
            return
        batch = self.worker.take(ctx.now, n)
        self.batch_seq += 1
        seq = self.batch_seq
        self.inflight[seq] = batch
        tag = f"batch:{seq}"
        if self.is_leader:
            ctx.log("flush_exec", id=item["id"], seq=seq, size=len(batch))
        self._add_op(ctx, tag, kind="batch", seq=seq, topic=tag, chain=self.cfg.channel_chain,
                     contract=CHANNEL, method="update_channel",
                     args={"relay": self.committee.relay_id, "batch": [t.to_bytes().hex() for t in batch],
                           "batch_seq": seq})
        payload = update_digest_payload(self.cfg.channel_chain, CHANNEL, self.committee.relay_id, seq, batch)
        self.sign_topic(ctx, tag, TAG_UPDATE, payload)

    def _exec_fact(self, ctx: Context, item: dict) -> None:
        tag = item["tag"]
        op = self.ops.get(tag)
        if op is None:
            return
        ok, error = item["ok"], item["error"]
        kind = op["kind"]
        if kind == "open":
            client = op["client"]
            self.opening.discard(client)
            if ok:
                amount = item["result"]["balance"]
                self.channels[client] = ChannelView(client, {client: amount})
                self.gens[client] = self.gens.get(client, 0) + 1
                self.finish(ctx, op["uuid"], AckCode.OK, f"nonce=0,balance={amount}")
            else:
                self.finish(ctx, op["uuid"], AckCode.REJECTED, error)
        elif kind == "close":
            client = op["client"]
            if ok:
                self.channels.pop(client, None)
                refund = item["result"]["refunds"].get(client, 0)
                self.finish(ctx, op["uuid"], AckCode.OK, f"refund={refund}")
            else:
                self.alerts.append({"tag": tag, "error": error})
                self.finish(ctx, op["uuid"], AckCode.REJECTED, error)
        elif kind == "batch":
            if ok:
                self.inflight.pop(op["seq"], None)
            else:
                # retained in ``inflight``; signals that relay and contract views diverged
                self.alerts.append({"tag": tag, "error": error})

    # chain driving ----------------------------------------------------------

    def _op_ready(self, tag: str, op: dict) -> bool:
        kind = op["kind"]
        if kind == "batch":
            prev = op["seq"] - 1
            if prev > self.landed_upto and f"batch:{prev}" not in self.submitted:
                return False
        elif kind == "close" and self.landed_upto < op["after"]:
            return False
        topic = op.get("topic")
        return topic is None or self.collector.proof(topic) is not None

    def _pump(self, ctx: Context) -> None:
        if not self.is_leader or self.byzantine == "silent":
            return
        for tag in self.open_ops:
            if tag in self.submitted:
                continue
            op = self.ops[tag]
            if not self._op_ready(tag, op):
                continue
            args = dict(op["args"])
            if op.get("topic"):
                args["proof"] = self.proof_hex(op["topic"])
            self.submitted.add(tag)
            self.submit_tx(ctx, op["chain"], op["contract"], op["method"], args, tag)

    def _on_receipt(self, ctx: Context, r: Any) -> None:
        tag = r.tag
        if not tag:
            return
        head = tag.split(":", 1)[0]
        if head in ("accept", "callback"):
            self.ccbs.on_receipt(ctx, r)
            return
        if head == "tcallback":
            self.cpbs.on_receipt(ctx, r)
            return
        if tag in self.first_receipt or head not in ("open", "close", "batch", "xquery", "task"):
            return
        self.first_receipt[tag] = r
        if tag in self.open_ops:
            self.open_ops.remove(tag)
        self.ready_since.pop(tag, None)
        if head in ("open", "close", "batch"):
            if head == "batch":
                self.landed.add(int(tag.split(":")[1]))
                while self.landed_upto + 1 in self.landed:
                    self.landed_upto += 1
            fact = {"t": "fact", "key": f"fact:{tag}", "tag": tag, "ok": r.ok, "error": r.error,
                    "result": r.result if r.ok else None}
            self.facts[fact["key"]] = fact
            self.replica.handle(ctx, BftRequest(fact["key"], fact))
            self.replica.retry_parked(ctx)
        elif not r.ok:
            uuid = tag.split(":", 1)[1]
            self.finish(ctx, uuid, AckCode.REJECTED, r.error)
        self._pump(ctx)

    def _on_event(self, ctx: Context, ev: Any) -> None:
        if ev.contract_id == CHANNEL:
            if ev.kind == EventKind.UPDATE_CHANNEL:
                if self.is_leader:
                    ctx.log("update_event", batch=ev.payload["batch_seq"], client=ev.payload["client"])
                    self._notify(ctx, ev.payload)
        elif ev.contract_id == PROXY:
            self.ccbs.on_event(ctx, ev)
        elif ev.contract_id == COMP:
            self.cpbs.on_event(ctx, ev)

    def _notify(self, ctx: Context, payload: dict) -> None:
        info = self.clients.get(payload["client"])
        if info is None:
            return
        client = payload["client"]
        key = f"notify:{client}:{payload['batch_seq']}"
        text = f"batch={payload['batch_seq']},nonce={payload['nonce']},balance={payload['balances'].get(client, 0)}"
        self.downlink(ctx, info.pid, AckBody(key, AckCode.NOTIFY, text).to_bytes(), key)

    # attestations -----------------------------------------------------------

    def _on_attest(self, ctx: Context, msg: AttestMsg) -> None:
        if self.collector.proof(msg.topic) is not None:
            return
        ctx.work(self.costs.bls_verify_ms)
        if not self.collector.add(msg):
            return
        head = msg.topic.split(":", 1)[0]
        if head in ("batch", "close"):
            self._pump(ctx)
        elif head in ("xreq", "xres"):
            self.ccbs.on_proof(ctx, msg.topic)
        elif head == "task":
            self.cpbs.on_proof(ctx, msg.topic)

    # timing -----------------------------------------------------------------

    def _on_view(self, ctx: Context, view: int) -> None:
        self.submitted.clear()
        self.ready_since.clear()
        self.flush_pending = None
        self._pump(ctx)

    def _on_tick(self, ctx: Context) -> None:
        self.ccbs.on_tick(ctx)
        self.cpbs.on_tick(ctx)
        if self.is_leader:
            self._maybe_flush(ctx)
            self._pump(ctx)
        # any relay may accuse a leader that sits on ready work
        stalled = False
        for tag in self.open_ops:
            if not self._op_ready(tag, self.ops[tag]):
                self.ready_since.pop(tag, None)
                continue
            since = self.ready_since.setdefault(tag, ctx.now)
            if ctx.now - since > self.cfg.op_timeout_ms:
                stalled = True
        if stalled and not self.replica.in_vc:
            ctx.log("op_timeout", view=self.replica.view)
            self.ready_since.clear()
            self.replica.suspect_leader(ctx)

    def _maybe_flush(self, ctx: Context) -> None:
        if self.flush_pending is not None or not self.worker.due(ctx.now):
            return
        fid = f"flush:{self.idx}:{self.flush_count}"
        self.flush_count += 1
        self.flush_pending = fid
        ctx.log("flush_start", id=fid, qlen=len(self.worker.queue))
        self.replica.handle(ctx, BftRequest(fid, {"t": "flush", "id": fid, "n": len(self.worker.queue)}))

    # introspection ----------------------------------------------------------

    def channel_balances(self) -> dict[str, dict[str, int]]:
        return {c: dict(v.balances) for c, v in sorted(self.channels.items())}

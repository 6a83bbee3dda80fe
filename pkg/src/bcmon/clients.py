"""Offline clients: run a script of operations over the SMS link, one at a time.

Each operation gets a fresh uuid. Attempt ``k`` of an operation goes to relay
``(gateway + k) mod n``; an operation with no reply after ``max_attempts``
timeouts is reported undeliverable and the rest of the script is abandoned,
since the client no longer knows its own nonce.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from bcmon import transport
from bcmon.committee import AckBody, AckCode, SmsDeliver, SmsReply, mobile_of
from bcmon.crypto.client import ClientKeyPair
from bcmon.records import encode_task_body, encode_xchain_body
from bcmon.sim import Context, Process
from bcmon.transport import NetworkProfile, PacketContent, PacketKind, SmsPacket, make_packet

OP_KINDS = ("open", "pay", "close", "xchain", "task", "wait")


@dataclass(frozen=True)
class _AckTimeout:
    uuid: str
    attempt: int


@dataclass(frozen=True)
class _Next:
    pass


def expand_script(script: list[dict]) -> list[dict]:
    """Unroll ``count`` on pay / xchain / task entries into single operations."""
    out = []
    for entry in script:
        op = entry.get("op")
        if op not in OP_KINDS:
            raise ValueError(f"unknown client op {op!r}")
        reps = int(entry.get("count", 1)) if op in ("pay", "xchain", "task") else 1
        out.extend([entry] * reps)
    return out


class ClientProcess(Process):
    def __init__(self, idx: int, kp: ClientKeyPair, relays: list[str], profile: NetworkProfile, *,
                 script: list[dict], payees: list[str], seed: int = 0, gateway: int | None = None,
                 ack_timeout_ms: dict[str, int] | None = None, max_attempts: int = 4,
                 start_ms: int = 0, gap_ms: int = 0):
        super().__init__(f"client:{idx}")
        self.idx = idx
        self.kp = kp
        self.address = kp.address
        self.relays = list(relays)
        self.profile = profile
        self.seed = seed
        self.gateway = idx % len(relays) if gateway is None else gateway
        self.timeouts = {"default": 5000, **(ack_timeout_ms or {})}
        self.max_attempts = max_attempts
        self.start_ms = start_ms
        self.gap_ms = gap_ms
        self.ops = expand_script(script)
        self.payees = [p for p in payees if p != self.address] or [self.address]

        self.pos = 0
        self.counter = 0
        self.generation = 0
        self.nonce = 0
        self.balance = 0
        self.sent_pays: list[PacketContent] = []
        self.current: dict | None = None
        self.done = False
        self.aborted = False
        self.acks: dict[str, AckBody] = {}
        self.notifications: list[AckBody] = []

    def on_start(self, ctx: Context) -> None:
        ctx.timer(self.start_ms, _Next())

    def on_message(self, ctx: Context, msg: Any) -> None:
        if isinstance(msg, _Next):
            self._next(ctx)
        elif isinstance(msg, _AckTimeout):
            self._on_timeout(ctx, msg)
        elif isinstance(msg, SmsReply):
            self._on_reply(ctx, msg)

    # script -----------------------------------------------------------------

    def _next(self, ctx: Context) -> None:
        if self.current is not None or self.done:
            return
        while self.pos < len(self.ops):
            spec = self.ops[self.pos]
            self.pos += 1
            if spec["op"] == "wait":
                # ``until_ms`` lines up a phase across clients regardless of earlier delays
                delay = int(spec["until_ms"]) - ctx.now if "until_ms" in spec else int(spec.get("ms", 0))
                ctx.timer(max(0, delay), _Next())
                return
            built = self._build(ctx, spec)
            if built is not None:
                self._start(ctx, spec["op"], *built)
                return
        self.done = True
        ctx.log("client_done", aborted=False)

    def _build(self, ctx: Context, spec: dict) -> tuple[PacketContent, dict] | None:
        op = spec["op"]
        rng = ctx.rng
        meta: dict = {}
        if op == "open":
            return PacketContent(PacketKind.OPEN_CHANNEL, amount=int(spec["amount"]),
                                 nonce=self.generation + 1), meta
        if op == "close":
            return PacketContent(PacketKind.CLOSE_CHANNEL, nonce=self.generation), meta
        if op == "pay":
            if self.sent_pays and rng.random() < float(spec.get("replay_p", 0)):
                meta["replay"] = True
                return rng.choice(self.sent_pays), meta
            if rng.random() < float(spec.get("overdraft_p", 0)):
                amount = self.balance + rng.randint(1, 10)
                meta["overdraft"] = True
            else:
                amount = rng.randint(1, int(spec.get("max_amount", 5)))
            payee = rng.choice(self.payees)
            content = PacketContent(PacketKind.OFF_CHAIN_PAY, payee, amount, self.nonce + 1)
            if rng.random() < float(spec.get("tamper_p", 0)):
                meta["tamper"] = True
            return content, meta
        if op == "xchain":
            to = [tuple(d) for d in spec["to"]]
            body = encode_xchain_body(spec["src"], to, bytes.fromhex(spec.get("data", "")))
            return PacketContent(PacketKind.CROSS_CHAIN, amount=int(spec.get("amount", 1)), data=body), meta
        if op == "task":
            body = encode_task_body(int(spec["kind"]), spec.get("target", self.address),
                                    tuple(spec["window"]), list(spec["sources"]))
            return PacketContent(PacketKind.COMPUTE_TASK, data=body), meta
        raise ValueError(op)

    def _start(self, ctx: Context, op: str, content: PacketContent, meta: dict) -> None:
        self.counter += 1
        uuid = f"c{self.idx}-{self.counter}"
        packet = make_packet(self.kp, uuid, mobile_of(self.idx), content, ctx.now)
        if meta.get("tamper"):
            sig = bytes([packet.signature[0] ^ 1]) + packet.signature[1:]
            packet = SmsPacket(packet.uuid, packet.mobile, packet.content, packet.sender_address, sig,
                               packet.timestamp)
        self.current = {"uuid": uuid, "op": op, "data": packet.to_bytes(), "attempt": -1,
                        "content": content, "sent_at": ctx.now}
        fields = {"uuid": uuid, "op": op, **meta}
        if op == "pay":
            fields.update(payee=content.dest_address, amount=content.amount, nonce=content.nonce)
        elif op == "open":
            fields.update(amount=content.amount)
        ctx.log("send", **fields)
        self._transmit(ctx)

    def _transmit(self, ctx: Context) -> None:
        cur = self.current
        cur["attempt"] += 1
        attempt = cur["attempt"]
        relay = self.relays[(self.gateway + attempt) % len(self.relays)]
        sched = transport.send(cur["data"], cur["uuid"], self.profile, ctx.now, seed=self.seed,
                               attempt=attempt, direction="up")
        if sched.delivered:
            ctx.send(relay, SmsDeliver(cur["data"], attempt, self.pid), sched.delivered_at - ctx.now)
        timeout = self.timeouts.get(cur["op"], self.timeouts["default"])
        ctx.timer(timeout, _AckTimeout(cur["uuid"], attempt))

    def _on_timeout(self, ctx: Context, msg: _AckTimeout) -> None:
        cur = self.current
        if cur is None or cur["uuid"] != msg.uuid or cur["attempt"] != msg.attempt:
            return
        if cur["attempt"] + 1 >= self.max_attempts:
            ctx.log("undeliverable", uuid=cur["uuid"], op=cur["op"], attempts=cur["attempt"] + 1)
            self.current = None
            self.aborted = True
            self.done = True
            ctx.log("client_done", aborted=True)
            return
        self._transmit(ctx)

    def _on_reply(self, ctx: Context, msg: SmsReply) -> None:
        try:
            body = AckBody.from_bytes(msg.data)
        except ValueError:
            return
        if body.code == AckCode.NOTIFY:
            self.notifications.append(body)
            ctx.log("notify", key=body.uuid, text=body.text)
            return
        cur = self.current
        if cur is None or body.uuid != cur["uuid"]:
            return
        self.acks[body.uuid] = body
        self.current = None
        ctx.log("ack", uuid=body.uuid, op=cur["op"], code=int(body.code), text=body.text,
                attempts=cur["attempt"] + 1, sent_at=cur["sent_at"])
        fields = body.fields()
        if body.code == AckCode.OK:
            if cur["op"] == "open":
                self.generation += 1
                self.nonce = 0
                self.balance = int(fields.get("balance", 0))
            elif cur["op"] == "pay":
                self.nonce = int(fields["nonce"])
                self.balance = int(fields["balance"])
                self.sent_pays.append(cur["content"])
            elif cur["op"] == "close":
                self.balance = 0
        ctx.timer(self.gap_ms, _Next())

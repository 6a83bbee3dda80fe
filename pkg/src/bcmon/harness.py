"""Scenario files, world construction, runs, metrics and end-of-run audits.

A scenario is a YAML mapping (see ``demos/`` and ``DEFAULTS``). ``run``
builds every process, drives the scheduler until all clients are finished
and the committee is idle (or the horizon passes), then derives timing
metrics from the trace and checks the safety invariants. Liveness problems
(stuck requests, undeliverable clients) are reported but are not violations.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import yaml

from bcmon.bft import max_faults, item_digest
from bcmon.chain import Chain, ChainNode, ChainTransaction, EventKind
from bcmon.clients import OP_KINDS, ClientProcess
from bcmon.codec import canonical_json
from bcmon.committee import AckCode, ClientInfo, Committee, Costs, RelayConfig
from bcmon.contracts import ChannelContract, CompContract, ProxyContract, WalletContract
from bcmon.cpbs import TRANSFER_BYTES, TaskStatus, decode_payload
from bcmon.crypto.bls import decode_proof
from bcmon.crypto.client import client_keygen, client_verify
from bcmon.crypto.groups import get_group
from bcmon.records import (
    TAG_REQUEST,
    TAG_RESULT,
    TASK_ACCOUNT_ACTIVITY,
    TASK_BALANCE_AT_HEIGHT,
    ComputeTask,
    CrossChainRequest,
    OffchainTx,
    attest_message,
    decode_result,
)
from bcmon.relay import BYZANTINE_MODES, CHANNEL, COMP, PROXY, RelayNode
from bcmon.sim import Scheduler
from bcmon.transport import PacketKind, SmsPacket, load_profile

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    """The scenario file is malformed or inconsistent."""


DEFAULTS: dict[str, Any] = {
    "name": "scenario",
    "seed": 0,
    "group": "toy",
    "network": "DEFAULT",
    "horizon_ms": 600_000,
    "parallel": False,
    "wall_clock": False,
    "proxy_reserve": 1_000_000,
    "chains": [{"id": "A", "block_ms": 1000, "balances": {}}],
    "committee": {"n": 4, "f": None, "buffer": 5, "timeout_ms": 1000, "threshold": 1,
                  "max_hold_ms": None, "tick_ms": 50, "link_ms": 2, "rpc_ms": 5,
                  "vc_timeout_ms": 1500, "op_timeout_ms": 6000, "epoch_ms": 5000,
                  "stuck_epochs": 10, "channel_chain": None, "comp_chain": None},
    "clients": {"count": 4, "balance": 1000, "chain": None, "max_attempts": 4,
                "ack_timeout_ms": {}, "start_spread_ms": 0, "gap_ms": 0,
                "gateway": None},
    "workload": {"script": [{"op": "open", "amount": 100}, {"op": "pay", "count": 5},
                            {"op": "close"}],
                 "transactions": None},
    "ledger": {"transfers": [], "payload_bytes": 0, "filler_chain": None, "filler_blocks": 10},
    "faults": [],
    "costs": {},
}

AXIS_ALIASES = {
    "nodes": "committee.n",
    "clients": "clients.count",
    "transactions": "workload.transactions",
    "payload_size": "ledger.payload_bytes",
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ScenarioError(f"unknown scenario key {where}{k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict) and k != "balances":
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Scenario:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        if not isinstance(data, dict):
            raise ScenarioError("scenario must be a mapping")
        sc = cls(_merge(DEFAULTS, data))
        sc.validate()
        return sc

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
        return cls.from_dict(data or {})

    # accessors ---------------------------------------------------------------

    def __getitem__(self, key: str) -> Any:
        return self.raw[key]

    @property
    def chain_ids(self) -> list[str]:
        return [c["id"] for c in self.raw["chains"]]

    @property
    def n(self) -> int:
        return int(self.raw["committee"]["n"])

    @property
    def f(self) -> int:
        f = self.raw["committee"]["f"]
        return max_faults(self.n) if f is None else int(f)

    def home(self, key: str) -> str:
        value = self.raw["committee"].get(key) if key != "client" else self.raw["clients"]["chain"]
        return value or self.chain_ids[0]

    def scripts(self) -> list[list[dict]]:
        """Per-client scripts, with ``workload.transactions`` spread over clients."""
        count = int(self.raw["clients"]["count"])
        script = self.raw["workload"]["script"]
        total = self.raw["workload"]["transactions"]
        out = []
        for i in range(count):
            if total is None:
                out.append(copy.deepcopy(script))
                continue
            share = int(total) // count + (1 if i < int(total) % count else 0)
            out.append([{**e, "count": share} if "count" in e or e.get("op") == "pay" else dict(e)
                        for e in script])
        return out

    def validate(self) -> None:
        r = self.raw
        try:
            load_profile(r["network"])
            get_group(r["group"])
            Costs(**r["costs"])
        except (ValueError, TypeError, KeyError) as exc:
            raise ScenarioError(str(exc)) from None
        ids = self.chain_ids
        if not ids or len(set(ids)) != len(ids):
            raise ScenarioError("chain ids must be non-empty and unique")
        for c in r["chains"]:
            if set(c) - {"id", "block_ms", "balances"}:
                raise ScenarioError(f"unknown chain keys {sorted(set(c) - {'id', 'block_ms', 'balances'})}")
            if int(c.get("block_ms", 1000)) <= 0:
                raise ScenarioError("block_ms must be positive")
        n, f = self.n, self.f
        if n < 1 or f < 0 or n < 3 * f + 1:
            raise ScenarioError(f"committee needs n >= 3f+1 (n={n}, f={f})")
        com = r["committee"]
        if int(com["buffer"]) < 0 or int(com["timeout_ms"]) < 0 or int(com["threshold"]) < 1:
            raise ScenarioError("buffer/timeout must be >= 0 and threshold >= 1")
        for key in ("channel_chain", "comp_chain"):
            if self.home(key) not in ids:
                raise ScenarioError(f"{key} {self.home(key)!r} is not a declared chain")
        if self.home("client") not in ids:
            raise ScenarioError("clients.chain is not a declared chain")
        if int(r["clients"]["count"]) < 0 or int(r["clients"]["max_attempts"]) < 1:
            raise ScenarioError("clients.count >= 0 and max_attempts >= 1 required")
        gw = r["clients"]["gateway"]
        if gw is not None and not (isinstance(gw, int) and 0 <= gw < n):
            raise ScenarioError(f"clients.gateway must be a relay index below {n}")
        for entry in r["workload"]["script"]:
            op = entry.get("op")
            if op not in OP_KINDS:
                raise ScenarioError(f"unknown workload op {op!r}")
            if op == "xchain":
                named = [entry.get("src")] + [d[0] for d in entry.get("to", [])]
                if not entry.get("to") or any(c not in ids for c in named):
                    raise ScenarioError("xchain op references an unknown chain")
            if op == "task":
                if any(s not in ids for s in entry.get("sources", [])) or not entry.get("sources"):
                    raise ScenarioError("task op references an unknown chain")
                lo, hi = entry.get("window", (0, -1))
                if lo > hi:
                    raise ScenarioError("task window must be non-empty")
        for t in r["ledger"]["transfers"]:
            if t.get("chain", ids[0]) not in ids:
                raise ScenarioError("ledger transfer on an unknown chain")
        for fault in r["faults"]:
            node = fault.get("node")
            if not isinstance(node, int) or not 0 <= node < n:
                raise ScenarioError(f"fault references unknown node {node!r}")
            if set(fault) - {"node", "crash_at_ms", "recover_at_ms", "byzantine"}:
                raise ScenarioError(f"unknown fault keys in {fault}")
            if fault.get("byzantine") not in (None, *BYZANTINE_MODES):
                raise ScenarioError(f"unknown byzantine mode {fault['byzantine']!r}")

    def with_value(self, path: str, value: Any) -> "Scenario":
        raw = copy.deepcopy(self.raw)
        keys = AXIS_ALIASES.get(path, path).split(".")
        node = raw
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ScenarioError(f"unknown axis path {path!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ScenarioError(f"unknown axis path {path!r}")
        node[keys[-1]] = value
        return Scenario.from_dict(raw)


# --- world -------------------------------------------------------------------

@dataclass
class World:
    scenario: Scenario
    sched: Scheduler
    committee: Committee
    chains: dict[str, Chain]
    relays: list[RelayNode]
    clients: list[ClientProcess]
    client_infos: dict[str, ClientInfo]
    genesis_totals: dict[str, int]
    faulty: set[int] = field(default_factory=set)

    @property
    def correct_relays(self) -> list[RelayNode]:
        return [r for r in self.relays if r.idx not in self.faulty]


def _script_ledger(sc: Scenario, chains: dict[str, Chain]) -> None:
    """Write scripted and filler transfers into leading blocks before the run starts."""
    led = sc["ledger"]
    by_chain: dict[str, dict[int, list[tuple[str, str, int]]]] = {}
    for t in led["transfers"]:
        chain = t.get("chain", sc.chain_ids[0])
        by_chain.setdefault(chain, {}).setdefault(int(t.get("block", 1)), []).append(
            (t["from"], t["to"], int(t["amount"])))
    filler = int(led["payload_bytes"]) // TRANSFER_BYTES
    if filler:
        chain = led["filler_chain"] or sc.home("comp_chain")
        blocks = max(1, int(led["filler_blocks"]))
        for i in range(filler):
            by_chain.setdefault(chain, {}).setdefault(1 + i % blocks, []).append(
                (f"filler:{i % 7}", f"filler:{(i + 1) % 7}", 1))
    for chain_id, blocks in sorted(by_chain.items()):
        chain = chains[chain_id]
        for height in range(1, max(blocks) + 1):
            for k, (src, dst, amount) in enumerate(blocks.get(height, [])):
                chain.submit_tx(ChainTransaction(src, "wallet", "send", {"receiver": dst, "amount": amount},
                                                 nonce=k, tag="ledger"))
            block = chain.produce_block(0)
            bad = [r.error for r in block.receipts if not r.ok]
            if bad:
                raise ScenarioError(f"scripted ledger transfer failed on {chain_id}: {bad[0]}")


def build(sc: Scenario, *, parallel: bool | None = None) -> World:
    seed = int(sc["seed"])
    group = get_group(sc["group"])
    committee = Committee.generate(sc.n, group, seed, sc.f)
    profile = load_profile(sc["network"])
    cl = sc["clients"]
    n_clients = int(cl["count"])
    keys = [client_keygen(f"client|{seed}|{i}") for i in range(n_clients)]

    genesis: dict[str, dict[str, int]] = {c["id"]: dict(c.get("balances") or {}) for c in sc["chains"]}
    for kp in keys:
        g = genesis[sc.home("client")]
        g[kp.address] = g.get(kp.address, 0) + int(cl["balance"])
    for cid in genesis:
        genesis[cid]["contract:proxy"] = genesis[cid].get("contract:proxy", 0) + int(sc["proxy_reserve"])
    filler = int(sc["ledger"]["payload_bytes"]) // TRANSFER_BYTES
    if filler:
        fc = sc["ledger"]["filler_chain"] or sc.home("comp_chain")
        for i in range(7):
            genesis[fc][f"filler:{i}"] = genesis[fc].get(f"filler:{i}", 0) + filler
    chains = {cid: Chain(cid, bal) for cid, bal in genesis.items()}
    com = sc["committee"]
    for cid, chain in chains.items():
        chain.deploy_contract(PROXY, ProxyContract(), registry=committee.registry, quorum=committee.quorum)
        chain.deploy_contract("wallet", WalletContract())
    chains[sc.home("channel_chain")].deploy_contract(CHANNEL, ChannelContract(), registry=committee.registry,
                                                     quorum=committee.quorum,
                                                     threshold=int(com["threshold"]))
    chains[sc.home("comp_chain")].deploy_contract(COMP, CompContract(), registry=committee.registry,
                                                  quorum=committee.quorum)
    _script_ledger(sc, chains)
    genesis_totals = {cid: sum(c.balances.values()) for cid, c in chains.items()}

    cfg = RelayConfig(buffer=int(com["buffer"]), timeout_ms=int(com["timeout_ms"]),
                      max_hold_ms=com["max_hold_ms"], tick_ms=int(com["tick_ms"]),
                      link_ms=int(com["link_ms"]), rpc_ms=int(com["rpc_ms"]),
                      vc_timeout_ms=int(com["vc_timeout_ms"]), op_timeout_ms=int(com["op_timeout_ms"]),
                      epoch_ms=int(com["epoch_ms"]), stuck_epochs=int(com["stuck_epochs"]),
                      profile=profile, costs=Costs(**sc["costs"]), channel_chain=sc.home("channel_chain"),
                      comp_chain=sc.home("comp_chain"), chains=tuple(sc.chain_ids), seed=seed)
    sched = Scheduler(seed, parallel=bool(sc["parallel"]) if parallel is None else parallel)
    for c in sc["chains"]:
        sched.add(ChainNode(chains[c["id"]], int(c.get("block_ms", 1000)), cfg.rpc_ms))

    infos = {kp.address: ClientInfo(kp.address, kp.pk, f"client:{i}") for i, kp in enumerate(keys)}
    byz = {f["node"]: f["byzantine"] for f in sc["faults"] if f.get("byzantine")}
    relays = [RelayNode(i, committee, cfg, infos, byz.get(i)) for i in range(sc.n)]
    for r in relays:
        sched.add(r)

    slow = cfg.epoch_ms * (cfg.stuck_epochs + 2) // max(1, int(cl["max_attempts"]) - 1)
    timeouts = {"xchain": slow, "task": slow, **(cl["ack_timeout_ms"] or {})}
    addresses = [kp.address for kp in keys]
    clients = []
    scripts = sc.scripts()
    spread = int(cl["start_spread_ms"])
    for i, kp in enumerate(keys):
        start = (i * spread) // max(1, n_clients) if spread else 0
        proc = ClientProcess(i, kp, committee.pids, profile, script=scripts[i], payees=addresses,
                             seed=seed, gateway=cl["gateway"], ack_timeout_ms=timeouts, max_attempts=int(cl["max_attempts"]),
                             start_ms=start, gap_ms=int(cl["gap_ms"]))
        clients.append(sched.add(proc))

    faulty = set(byz)
    for fault in sc["faults"]:
        if "crash_at_ms" in fault:
            faulty.add(fault["node"])
            sched.crash(committee.pid(fault["node"]), int(fault["crash_at_ms"]))
            if fault.get("recover_at_ms") is not None:
                sched.recover(committee.pid(fault["node"]), int(fault["recover_at_ms"]))
    return World(sc, sched, committee, chains, relays, clients, infos, genesis_totals, faulty)


def _idle(world: World) -> bool:
    if not all(c.done for c in world.clients):
        return False
    for r in world.correct_relays:
        if r.crashed:
            continue
        if r.open_ops or r.inflight or r.replica.pending or r.ccbs.active or r.cpbs.active:
            return False
    return True


# --- metrics -----------------------------------------------------------------

def _stats(values: Iterable[float]) -> dict:
    vals = sorted(values)
    if not vals:
        return {"n": 0, "mean": None, "p50": None, "max": None}
    return {"n": len(vals), "mean": round(statistics.fmean(vals), 3),
            "p50": round(statistics.median(vals), 3), "max": vals[-1]}


def metrics(world: World) -> dict:
    trace = world.sched.trace
    by_op: dict[str, list[float]] = {}
    counts: dict[str, dict[str, int]] = {}
    first: dict[tuple[str, str], int] = {}
    flush_start: dict[str, int] = {}
    flush_seq: dict[int, str] = {}
    update_seen: dict[int, int] = {}
    views = 0
    for rec in trace:
        kind = rec["kind"]
        if kind == "ack":
            c = counts.setdefault(rec["op"], {"ok": 0, "rejected": 0, "stuck": 0, "undeliverable": 0})
            code = AckCode(rec["code"])
            c["ok" if code == AckCode.OK else "stuck" if code == AckCode.STUCK else "rejected"] += 1
            if code == AckCode.OK:
                by_op.setdefault(rec["op"], []).append(rec["t"] - rec["sent_at"])
        elif kind == "undeliverable":
            counts.setdefault(rec["op"], {"ok": 0, "rejected": 0, "stuck": 0, "undeliverable": 0})
            counts[rec["op"]]["undeliverable"] += 1
        elif kind == "flush_start":
            flush_start.setdefault(rec["id"], rec["t"])
        elif kind == "flush_exec":
            flush_seq.setdefault(rec["seq"], rec["id"])
        elif kind == "update_event":
            update_seen.setdefault(rec["batch"], rec["t"])
        elif kind == "bft_new_view":
            views += 1
        elif kind.startswith(("ccbs_", "cpbs_")) and "key" in rec:
            first.setdefault((kind, rec["key"]), rec["t"])
    update = [update_seen[s] - flush_start[flush_seq[s]] for s in update_seen
              if s in flush_seq and flush_seq[s] in flush_start]

    def span(a: str, b: str) -> list[int]:
        return [first[(b, k)] - t for (kind, k), t in first.items() if kind == a and (b, k) in first]

    timings = {
        "offchain_service_ms": _stats(by_op.get("pay", [])),
        "open_total_ms": _stats(by_op.get("open", [])),
        "update_total_ms": _stats(update),
        "close_total_ms": _stats(by_op.get("close", [])),
        "xchain_total_ms": _stats(by_op.get("xchain", [])),
        "task_total_ms": _stats(by_op.get("task", [])),
        "ccbs_consensus_ms": _stats(span("ccbs_request", "ccbs_aggregated")),
        "ccbs_validation_ms": _stats(span("ccbs_aggregated", "ccbs_accepted")),
        "ccbs_process_ms": _stats(span("ccbs_request", "ccbs_done")),
        "cpbs_process_ms": _stats(span("cpbs_request", "cpbs_done")),
    }
    leader_view = max((r.replica.view for r in world.correct_relays), default=0)
    return {"timings": timings, "counts": dict(sorted(counts.items())),
            "bft": {"max_view": leader_view, "new_views": views},
            "state_roots": {cid: c.state_root() for cid, c in sorted(world.chains.items())}}


# --- audits ------------------------------------------------------------------

def audit_conservation(world: World) -> list[str]:
    out = []
    for cid, chain in world.chains.items():
        total = sum(chain.balances.values())
        if total != world.genesis_totals[cid]:
            out.append(f"native supply on {cid} changed: {world.genesis_totals[cid]} -> {total}")
        if any(v < 0 for v in chain.balances.values()):
            out.append(f"negative balance on {cid}")
    return out


def _reference_log(world: World) -> list[tuple[int, str, Any]]:
    live = [r for r in world.correct_relays] or world.relays
    return max((r.replica.log for r in live), key=len)


def ledger_replay(world: World) -> dict:
    """Replay the ordered client packets with plain dict arithmetic.

    Independent of the relay's channel views and of the contract: only the
    open and close outcomes are taken from the chain (via ordered facts),
    since whether the client could fund an escrow is a chain question.
    """
    infos = world.client_infos
    channels: dict[str, dict[str, int]] = {}
    nonces: dict[str, int] = {}
    gens: dict[str, int] = {}
    closing: dict[str, str] = {}
    pending_open: dict[str, tuple[str, int]] = {}
    refunds: list[tuple[str, dict[str, int]]] = []
    accepted: set[str] = set()
    for _, _, item in _reference_log(world):
        if item["t"] == "fact":
            head, uuid = item["tag"].split(":", 1)
            if head == "open" and uuid in pending_open:
                client, amount = pending_open.pop(uuid)
                if item["ok"]:
                    channels[client] = {client: amount}
                    nonces[client] = 0
                    gens[client] = gens.get(client, 0) + 1
            elif head == "close" and item["ok"]:
                client = next((c for c, u in closing.items() if u == uuid), None)
                if client is not None:
                    del closing[client]
                    refunds.append((client, {k: v for k, v in channels.pop(client).items() if v}))
            continue
        if item["t"] != "sms":
            continue
        pkt = SmsPacket.from_bytes(bytes.fromhex(item["sms"]))
        info = infos.get(pkt.sender_address)
        if info is None or not client_verify(info.pk, pkt.content.to_bytes(), pkt.signature):
            continue
        client, c = info.address, pkt.content
        if c.kind == PacketKind.OPEN_CHANNEL:
            busy = client in channels or any(v[0] == client for v in pending_open.values())
            if not busy and c.nonce == gens.get(client, 0) + 1:
                pending_open[pkt.uuid] = (client, c.amount)
        elif c.kind == PacketKind.OFF_CHAIN_PAY:
            ch = channels.get(client)
            if ch is None or client in closing:
                continue
            if c.nonce != nonces[client] + 1 or ch.get(client, 0) < c.amount:
                continue
            ch[client] -= c.amount
            ch[c.dest_address] = ch.get(c.dest_address, 0) + c.amount
            nonces[client] = c.nonce
            accepted.add(pkt.uuid)
        elif c.kind == PacketKind.CLOSE_CHANNEL:
            if client in channels and client not in closing and c.nonce == gens.get(client, 0):
                closing[client] = pkt.uuid
    open_channels = {k: {a: b for a, b in v.items() if b} for k, v in channels.items()}
    return {"open": open_channels, "refunds": refunds, "accepted_pays": accepted,
            "escrow": sum(sum(v.values()) for v in open_channels.values())}


def audit_channels(world: World) -> tuple[list[str], dict]:
    out: list[str] = []
    sc = world.scenario
    chain = world.chains[sc.home("channel_chain")]
    contract = chain.contracts[CHANNEL]
    oracle = ledger_replay(world)
    escrow = chain.balance_of(contract.address)
    if escrow != oracle["escrow"]:
        out.append(f"channel escrow {escrow} != replay oracle {oracle['escrow']}")
    settled = {}
    for key in contract.storage.keys():
        if key.startswith("ch:"):
            rec = contract.storage.get(key)
            settled[rec["client"]] = ChannelContract.view(rec)
    # channel views on chain lag by whatever is still queued at the relays
    queued: dict[str, list[OffchainTx]] = {}
    ref = world.correct_relays[0] if world.correct_relays else world.relays[0]
    for _, tx in ref.worker.queue:
        queued.setdefault(tx.payer, []).append(tx)
    for batch in ref.inflight.values():
        for tx in batch:
            queued.setdefault(tx.payer, []).append(tx)
    for client, bal in oracle["open"].items():
        view = dict(settled.get(client, {}))
        for tx in queued.get(client, []):
            view[tx.payer] = view.get(tx.payer, 0) - tx.amount
            view[tx.payee] = view.get(tx.payee, 0) + tx.amount
        view = {k: v for k, v in view.items() if v}
        if view != bal:
            out.append(f"channel of {client}: chain+queue {view} != replay oracle {bal}")
        for r in world.correct_relays:
            if r.crashed:
                continue
            mine = r.channels.get(client)
            if mine is None or {k: v for k, v in mine.balances.items() if v} != bal:
                out.append(f"relay {r.idx} view of {client} diverges from replay oracle")
    if set(settled) != set(oracle["open"]):
        out.append(f"open channels on chain {sorted(settled)} != replay oracle {sorted(oracle['open'])}")
    closes = [ev for ev in chain.event_log if ev.kind == EventKind.CLOSE_CHANNEL]
    got = [(ev.payload["client"], ev.payload["refunds"]) for ev in closes]
    if sorted(got, key=repr) != sorted(oracle["refunds"], key=repr):
        out.append(f"close refunds {got} != replay oracle {oracle['refunds']}")

    # replays: per client and generation the applied nonces must be 1, 2, 3, ...
    applied: dict[str, list[int]] = {}
    for block in chain.blocks:
        for tx, rc in zip(block.txs, block.receipts):
            if not rc.ok or tx.contract_id != CHANNEL:
                continue
            if tx.method == "open_channel":
                client = rc.result["client"]
                applied[client] = []
            hexes = tx.args.get("batch", []) if tx.method == "update_channel" else \
                tx.args.get("residual", []) if tx.method == "close_channel" else []
            for h in hexes:
                t = OffchainTx.from_bytes(bytes.fromhex(h))
                seq = applied.setdefault(t.payer, [])
                if t.nonce != len(seq) + 1:
                    out.append(f"nonce {t.nonce} applied out of order for {t.payer}")
                seq.append(t.nonce)
    replays_ok = 0
    by_uuid = {}
    for rec in world.sched.trace:
        if rec["kind"] == "send" and rec.get("replay"):
            by_uuid[rec["uuid"]] = rec
        elif rec["kind"] == "ack" and rec["uuid"] in by_uuid and rec["code"] == AckCode.OK:
            replays_ok += 1
    replays_ok += sum(1 for u in by_uuid if u in oracle["accepted_pays"])
    if replays_ok:
        out.append(f"{replays_ok} replayed payments were accepted")
    for rec in world.sched.trace:
        if rec["kind"] == "ack" and rec["op"] == "pay" and rec["code"] == AckCode.OK \
                and rec["uuid"] not in oracle["accepted_pays"]:
            out.append(f"payment {rec['uuid']} acked but rejected by replay oracle")
    return out, {"replays_sent": len(by_uuid), "replays_accepted": replays_ok,
                 "pays_accepted": len(oracle["accepted_pays"])}


def audit_bft(world: World) -> list[str]:
    out = []
    logs = [[(s, k, item_digest(k, it)) for s, k, it in r.replica.log] for r in world.correct_relays]
    for a, b in itertools.combinations(range(len(logs)), 2):
        m = min(len(logs[a]), len(logs[b]))
        if logs[a][:m] != logs[b][:m]:
            out.append("correct relays executed different logs")
            break
    for r in world.correct_relays:
        if r.replica.conflicts:
            out.append(f"relay {r.idx} saw conflicting commits at {r.replica.conflicts[:3]}")
        for alert in r.alerts:
            out.append(f"relay {r.idx} alert: {alert['tag']}: {alert['error']}")
    return out


def proof_verifies(world: World, proof_hex: str, tag: bytes, payload: bytes) -> bool:
    """Independent re-check: popcount and the per-signer pairing product."""
    group = world.committee.group
    reg = world.committee.registry
    try:
        proof = decode_proof(bytes.fromhex(proof_hex), group)
    except ValueError:
        return False
    signers = [i for i, bit in enumerate(proof.mask) if bit]
    if len(proof.mask) != reg.n or len(signers) < world.committee.quorum:
        return False
    h = group.hash_to_g2(attest_message(tag, payload))
    lhs = group.pair(group.g1, proof.subsig)
    rhs = group.gt_one()
    for i in signers:
        rhs = group.gt_mul(rhs, group.pair(reg.apub[i], h))
    return lhs == rhs


def audit_xchain(world: World) -> tuple[list[str], dict]:
    out: list[str] = []
    requests: dict[str, CrossChainRequest] = {}
    accepts: dict[tuple[str, str], int] = {}
    callbacks: dict[str, int] = {}
    for cid, chain in sorted(world.chains.items()):
        for ev in chain.event_log:
            if ev.contract_id != PROXY:
                continue
            if ev.kind == EventKind.REQUEST:
                requests[ev.payload["req_id"]] = CrossChainRequest.from_bytes(bytes.fromhex(ev.payload["request"]))
            elif ev.kind == EventKind.ACCEPT:
                accepts[(ev.payload["req_id"], cid)] = accepts.get((ev.payload["req_id"], cid), 0) + 1
            elif ev.kind == EventKind.CALLBACK:
                callbacks[ev.payload["req_id"]] = callbacks.get(ev.payload["req_id"], 0) + 1
        for block in chain.blocks:
            for tx, rc in zip(block.txs, block.receipts):
                if not rc.ok or tx.contract_id != PROXY:
                    continue
                if tx.method == "cross_accept":
                    if not proof_verifies(world, tx.args["proof"], TAG_REQUEST, bytes.fromhex(tx.args["request"])):
                        out.append(f"destination effect on {cid} without a verifying proof")
                elif tx.method == "cross_callback":
                    if not proof_verifies(world, tx.args["proof"], TAG_RESULT, bytes.fromhex(tx.args["result"])):
                        out.append(f"source completion on {cid} without a verifying proof")
    for (req_id, cid), k in accepts.items():
        if k > 1:
            out.append(f"request {req_id} accepted {k} times on {cid}")
        if req_id not in requests:
            out.append(f"accept for unknown request {req_id}")
    stuck_keys = {rec["key"] for rec in world.sched.trace if rec["kind"] == "ccbs_stuck"}
    status = {"Completed": 0, "Rejected": 0, "StuckPending": 0, "Unterminated": 0}
    for req_id, req in requests.items():
        if callbacks.get(req_id, 0) > 1:
            out.append(f"request {req_id} completed {callbacks[req_id]} times")
        if callbacks.get(req_id):
            status["Completed"] += 1
            missing = [c for c in req.dest_chains if not accepts.get((req_id, c))]
            if missing:
                out.append(f"request {req_id} completed without accepts on {missing}")
            src = world.chains[req.src_chain]
            raw = src.query_state(PROXY, f"done:{req_id}")
            rid, dests = decode_result(bytes.fromhex(raw))
            if rid != req_id or [d.chain_id for d in dests] != req.dest_chains:
                out.append(f"request {req_id} completed with a result for other destinations")
        elif req_id in stuck_keys:
            status["StuckPending"] += 1
        else:
            status["Unterminated"] += 1
    sent = [r for r in world.sched.trace if r["kind"] == "send" and r["op"] == "xchain"]
    acks = {r["uuid"]: r for r in world.sched.trace if r["kind"] == "ack" and r["op"] == "xchain"}
    status["Rejected"] = sum(1 for s in sent if s["uuid"] in acks and acks[s["uuid"]]["code"] == AckCode.REJECTED)
    if status["Unterminated"] and _all_quiet(world):
        out.append(f"{status['Unterminated']} cross-chain requests never reached a terminal status")
    return out, status


def _all_quiet(world: World) -> bool:
    return world.sched.now >= int(world.scenario["horizon_ms"]) or _idle(world)


def height_at(chain: Chain, t: int) -> int:
    """Height of ``chain`` as of virtual time ``t``."""
    return max(b.height for b in chain.blocks if b.timestamp <= t)


def scan_oracle(world: World, task: ComputeTask) -> bytes:
    """Brute-force recomputation of a task straight from block contents."""
    from bcmon.codec import u8, u64

    lo, hi = task.window
    parts = []
    for src in task.sources:
        chain = world.chains[src]
        acct = task.target_account
        if task.kind == TASK_ACCOUNT_ACTIVITY:
            cnt = tin = tout = 0
            peers = set()
            for block in chain.blocks:
                if not lo <= block.height <= hi:
                    continue
                for t in block.transfers:
                    hit = False
                    if t.receiver == acct:
                        tin += t.amount
                        hit = True
                        if t.sender != acct:
                            peers.add(t.sender)
                    if t.sender == acct:
                        tout += t.amount
                        hit = True
                        if t.receiver != acct:
                            peers.add(t.receiver)
                    cnt += hit
            parts.append(u64(cnt) + u64(tin) + u64(tout) + u64(len(peers)))
        elif task.kind == TASK_BALANCE_AT_HEIGHT:
            bal = chain.genesis_balances.get(acct, 0)
            for block in chain.blocks:
                if block.height <= hi:
                    for t in block.transfers:
                        bal += (t.amount if t.receiver == acct else 0) - (t.amount if t.sender == acct else 0)
            parts.append(u64(bal))
    return u8(0) + b"".join(parts)


def audit_tasks(world: World) -> tuple[list[str], dict]:
    out: list[str] = []
    chain = world.chains[world.scenario.home("comp_chain")]
    tasks: dict[str, tuple[ComputeTask, int]] = {}
    done = 0
    for ev in chain.event_log:
        if ev.contract_id != COMP:
            continue
        if ev.kind == EventKind.REQUEST:
            tasks[ev.payload["task_id"]] = (ComputeTask.from_bytes(bytes.fromhex(ev.payload["task"])),
                                            chain.blocks[ev.block_height].timestamp)
        elif ev.kind == EventKind.CALLBACK:
            done += 1
            task, req_time = tasks[ev.payload["task_id"]]
            payload = bytes.fromhex(ev.payload["payload"])
            status, _ = decode_payload(payload, task.kind)
            if status == TaskStatus.OK:
                if payload != scan_oracle(world, task):
                    out.append(f"task {task.task_id} attested result differs from scan oracle")
            elif status == TaskStatus.WINDOW_BEYOND_HEIGHT:
                # wrong only if every source already held the window before the request
                if all(height_at(world.chains[src], req_time) >= task.window[1] for src in task.sources):
                    out.append(f"task {task.task_id} reported window beyond height wrongly")
            else:
                out.append(f"task {task.task_id} completed with status {status.name}")
    for block in chain.blocks:
        for tx, rc in zip(block.txs, block.receipts):
            if rc.ok and tx.method == "task_callback":
                if not proof_verifies(world, tx.args["proof"], b"bcmon/task-result/v1",
                                      bytes.fromhex(tx.args["result"])):
                    out.append("task completed without a verifying proof")
    return out, {"submitted": len(tasks), "completed": done}


# --- runs --------------------------------------------------------------------

@dataclass
class RunResult:
    report: dict
    world: World

    @property
    def ok(self) -> bool:
        return not self.report["violations"]

    def trace_lines(self) -> list[str]:
        lines = [canonical_json(rec) for rec in self.world.sched.trace]
        for cid in sorted(self.world.chains):
            lines.extend(self.world.chains[cid].dump_lines())
        return lines

    def report_json(self) -> str:
        return canonical_json(self.report)

    def summary(self) -> str:
        rep = self.report
        rows = [f"scenario {rep['name']}  seed={rep['seed']}  n={rep['n']} f={rep['f']}  "
                f"clients={rep['clients']}  end={rep['end_ms']}ms",
                f"{'metric':<22}{'n':>6}{'mean':>12}{'p50':>12}{'max':>10}"]
        for k, s in rep["timings"].items():
            if s["n"]:
                rows.append(f"{k:<22}{s['n']:>6}{s['mean']:>12.1f}{s['p50']:>12.1f}{s['max']:>10}")
        for op, c in rep["counts"].items():
            rows.append(f"{op:<10} ok={c['ok']} rejected={c['rejected']} stuck={c['stuck']} "
                        f"undeliverable={c['undeliverable']}")
        rows.append(f"xchain {rep['xchain']}  tasks {rep['tasks']}")
        rows.append(f"liveness {'ok' if rep['liveness']['live'] else 'FAILED'} {rep['liveness']}")
        rows.append("violations: " + ("none" if not rep["violations"] else "; ".join(rep["violations"])))
        return "\n".join(rows)


def run(sc: Scenario | dict | str | Path, *, parallel: bool | None = None,
        wall_clock: bool | None = None) -> RunResult:
    if not isinstance(sc, Scenario):
        sc = Scenario.from_dict(sc) if isinstance(sc, dict) else Scenario.from_file(sc)
    started = time.perf_counter()
    world = build(sc, parallel=parallel)
    try:
        world.sched.run(until=int(sc["horizon_ms"]), stop=lambda: _idle(world))
    finally:
        world.sched.close()
    rep = {"name": sc["name"], "seed": sc["seed"], "n": sc.n, "f": sc.f,
           "clients": int(sc["clients"]["count"]), "end_ms": world.sched.now,
           "events": world.sched.events_processed}
    rep.update(metrics(world))
    violations = audit_conservation(world) + audit_bft(world)
    ch_v, ch_info = audit_channels(world)
    x_v, x_info = audit_xchain(world)
    t_v, t_info = audit_tasks(world)
    violations += ch_v + x_v + t_v
    rep["channels"] = ch_info
    rep["xchain"] = x_info
    rep["tasks"] = t_info
    rep["liveness"] = {
        "clients_done": sum(c.done and not c.aborted for c in world.clients),
        "clients_aborted": sum(c.aborted for c in world.clients),
        "idle": _idle(world),
        "max_view": rep["bft"]["max_view"],
        "view_budget_exceeded": rep["bft"]["max_view"] >= sc.n * (1 + len(sc["faults"])),
    }
    lv = rep["liveness"]
    lv["live"] = lv["idle"] and not lv["clients_aborted"] and not lv["view_budget_exceeded"]
    rep["violations"] = violations
    use_wall = sc["wall_clock"] if wall_clock is None else wall_clock
    if use_wall:
        rep["wall_s"] = round(time.perf_counter() - started, 3)
    log.info("run %s finished at %d ms with %d violations", sc["name"], world.sched.now, len(violations))
    return RunResult(rep, world)


def check_determinism(sc: Scenario | dict) -> tuple[bool, str]:
    """Run sequentially and in parallel mode; compare reports and traces byte for byte."""
    a = run(sc, parallel=False, wall_clock=False)
    b = run(sc, parallel=True, wall_clock=False)
    if a.report_json() != b.report_json():
        return False, "reports differ"
    if a.trace_lines() != b.trace_lines():
        return False, "traces differ"
    return True, "identical"


# --- sweeps ------------------------------------------------------------------

def parse_axis(text: str) -> tuple[str, list[Any]]:
    """``name=lo:hi:step`` (inclusive) or ``name=v1,v2,...``."""
    if "=" not in text:
        raise ScenarioError(f"axis must look like name=values, got {text!r}")
    name, spec = text.split("=", 1)
    name = name.strip()
    try:
        if ":" in spec:
            parts = [int(p) for p in spec.split(":")]
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1
            if step <= 0:
                raise ScenarioError("axis step must be positive")
            values: list[Any] = list(range(lo, hi + 1, step))
        else:
            values = [yaml.safe_load(v) for v in spec.split(",") if v.strip()]
    except ValueError as exc:
        raise ScenarioError(f"bad axis {text!r}: {exc}") from None
    if not values:
        raise ScenarioError(f"axis {name!r} is empty")
    return name, values


SWEEP_COLUMNS = ("offchain_service_ms", "open_total_ms", "update_total_ms", "close_total_ms",
                 "ccbs_consensus_ms", "ccbs_validation_ms", "ccbs_process_ms", "cpbs_process_ms")


class SweepAborted(RuntimeError):
    def __init__(self, rows: list[dict], point: dict, violations: list[str]):
        super().__init__(f"grid point {point} failed: {violations[:3]}")
        self.rows = rows
        self.point = point


def sweep(template: Scenario | dict | str | Path, axes: list[tuple[str, list[Any]]], *,
          out_path: str | Path | None = None, parallel: bool | None = None) -> list[dict]:
    if not isinstance(template, Scenario):
        template = Scenario.from_dict(template) if isinstance(template, dict) else Scenario.from_file(template)
    rows: list[dict] = []
    names = [a for a, _ in axes]
    grid = itertools.product(*[v for _, v in axes]) if axes else [()]
    out = open(out_path, "w") if out_path else None
    try:
        for values in grid:
            sc = template
            for name, v in zip(names, values):
                sc = sc.with_value(name, v)
            res = run(sc, parallel=parallel)
            point = dict(zip(names, values))
            row = {**point, **{k: res.report["timings"][k]["mean"] for k in SWEEP_COLUMNS},
                   "violations": len(res.report["violations"])}
            rows.append(row)
            if out:
                out.write(canonical_json(row) + "\n")
                out.flush()
            if not res.ok:
                raise SweepAborted(rows, point, res.report["violations"])
    finally:
        if out:
            out.close()
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    width = {c: max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.rjust(width[c]) for c in cols)]
    lines += ["  ".join(_fmt(r[c]).rjust(width[c]) for c in cols) for r in rows]
    return "\n".join(lines)


def _fmt(v: Any) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str)

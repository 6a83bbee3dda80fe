"""Off-chain analysis of on-chain data, attested by the committee."""
from pathlib import Path

from bcmon.harness import run

res = run(Path(__file__).parent / "scenarios" / "task.yaml")

# replies as the phone sees them
for rec in res.world.sched.trace:
    if rec["kind"] == "ack" and rec["op"] == "task":
        print(f"t={rec['t']:>5} ms  reply: {rec['text']}")

# kind 1 -> tx_count, total_in, total_out, counterparties
# kind 2 -> balance after the window's last block
print("tasks:", res.report["tasks"])
print("process time (ms):", res.report["timings"]["cpbs_process_ms"])
print("relay 3 lies about every result; quorum still formed without it")
print("violations:", res.report["violations"] or "none")

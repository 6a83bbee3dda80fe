"""Two-phase cross-chain requests, with the first leader crashing mid-run."""
from collections import Counter
from pathlib import Path

from bcmon.chain import EventKind
from bcmon.harness import run

res = run(Path(__file__).parent / "scenarios" / "xchain.yaml")
rep = res.report
print("statuses:", rep["xchain"])
print("bft views reached:", rep["bft"]["max_view"])

t = rep["timings"]
for k in ("ccbs_consensus_ms", "ccbs_validation_ms", "ccbs_process_ms"):
    print(f"{k:20s} mean {t[k]['mean']:.0f} ms  max {t[k]['max']} ms")

# every destination credited exactly once per request
for cid in ("B", "C"):
    chain = res.world.chains[cid]
    accepts = Counter(e.payload["req_id"] for e in chain.event_log if e.kind == EventKind.ACCEPT)
    print(cid, "merchant balance", chain.balance_of("merchant"), "max accepts per request", max(accepts.values()))

print("violations:", rep["violations"] or "none")

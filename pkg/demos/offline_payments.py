"""Offline payments: channels opened, used and settled over SMS."""
from pathlib import Path

from bcmon.harness import Scenario, ledger_replay, run

HERE = Path(__file__).parent
sc = Scenario.from_file(HERE / "scenarios" / "payments.yaml")
print(f"{sc['clients']['count']} clients, {sc.n} relays, network {sc['network']}")

res = run(sc)
print(res.summary())

# the chain after everyone closed
w = res.world
chain = w.chains["A"]
print("\nescrow left in the channel contract:", chain.balance_of("contract:channel"))
print("native supply before/after:", w.genesis_totals["A"], sum(chain.balances.values()))

# replay the ordered packets with plain dicts and compare refunds
oracle = ledger_replay(w)
for client, split in oracle["refunds"][:3]:
    print(f"{client[:10]}: keeps {split.get(client, 0)}, pays out to {len(split) - (client in split)} others")
print("replays sent / accepted:", res.report["channels"]["replays_sent"], res.report["channels"]["replays_accepted"])

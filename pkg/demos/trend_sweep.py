"""Service time across committee size and client count (a small slice of the grid)."""
from pathlib import Path

from bcmon.harness import format_table, sweep

template = Path(__file__).parent / "scenarios" / "trend.yaml"
rows = sweep(template, [("clients", [10, 40]), ("nodes", [4, 6, 9])])

cols = ("clients", "nodes", "offchain_service_ms", "open_total_ms", "update_total_ms")
print(format_table([{k: r[k] for k in cols} for r in rows]))

# same sweep from the shell:
#   bcmon sweep demos/scenarios/trend.yaml --axis nodes=4:9:1 --axis clients=10:80:10

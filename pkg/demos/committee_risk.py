"""How likely is a sampled committee to hold too many malicious relays?"""
from bcmon.faultprob import FaultModel, fault_probability, fault_probability_exact

print(fault_probability_exact(FaultModel(7, 2, 5), 2))  # 10/21

# population of 100 relays, a third malicious, committee needs > f bad to break
print(f"{'T':>4} {'f':>3} {'P[X > f]':>12}")
for t in (4, 7, 10, 13, 16, 19, 31, 49):
    f = (t - 1) // 3
    p = fault_probability((100, 33, t), f + 1)
    print(f"{t:>4} {f:>3} {p:>12.6f}")

# fewer malicious nodes in the population
for bad in (10, 20, 30):
    print(bad, "bad of 100, T=31:", round(fault_probability((100, bad, 31), 11), 6))

# Simulator walkthrough: inject each fault class into a one-node cluster
# and show what every recovery action earns.

import itertools

from selfheal.cluster_sim import LATENCY, REMEDY, FaultClass, RecoveryAction, SimConfig, Simulation

cfg = SimConfig(nodes=1, ticks=100, fault_rate=0.0)

print("remedy table")
for fault in FaultClass:
    print(f"  {fault.name:<16} -> {REMEDY[fault].name:<20} ({LATENCY[REMEDY[fault]]} ticks)")

print()
print("reward per (fault, action)")
for fault, action in itertools.product(FaultClass, RecoveryAction):
    sim = Simulation(cfg, seed=0)
    sim.inject_fault(0, fault)
    r = sim.step(action, 0).reward
    print(f"  {fault.name:<16} {action.name:<20} {r:+d}")

# a fault left alone escalates to Failed
sim = Simulation(SimConfig(nodes=1, ticks=60, fault_rate=0.0), seed=0)
sim.inject_fault(0, FaultClass.MemoryLeak)
while not sim.finished:
    sim.step()
print()
print("untreated MemoryLeak after 60 ticks:", sim.nodes[0].status.name)

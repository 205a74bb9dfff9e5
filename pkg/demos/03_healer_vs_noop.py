# Q-learning healer against the do-nothing baseline, with perfect fault
# observation so only the policy matters.

import numpy as np

from selfheal.cluster_sim import SimConfig, Simulation
from selfheal.healer import OracleObserver, QTable, noop_policy, run_episodes, single_fault_states, train_q
from selfheal.trainer import TrainConfig, rl_sim_factory

tc = TrainConfig()
table = QTable(alpha=tc.rl_alpha, gamma=tc.rl_gamma, epsilon=tc.rl_eps_start)
train_q(table, rl_sim_factory(tc, 0), 300, tc.rl_eps_start, tc.rl_eps_end, observer=OracleObserver(), seed=0, lockstep=25)

policy = table.policy()
print("learned action per single-fault state")
for s in single_fault_states():
    print(f"  {s.dominant_class.name:<16} {policy[s].name}")

cfg = SimConfig(nodes=4, ticks=200, fault_rate=0.05)
seeds = range(100, 120)
healed = run_episodes([Simulation(cfg, s) for s in seeds], OracleObserver(), table, learn=False)
base = run_episodes([Simulation(cfg, s) for s in seeds], OracleObserver(), policy=noop_policy)

rec_h = np.mean([r.mean_recovery_ticks for r in healed])
rec_n = np.mean([r.mean_recovery_ticks for r in base])
print()
print(f"mean recovery: healer {rec_h:.1f} ticks, NoOp {rec_n:.1f} ticks")
print(f"mean stability: healer {np.mean([r.stability for r in healed]):.3f}, NoOp {np.mean([r.stability for r in base]):.3f}")

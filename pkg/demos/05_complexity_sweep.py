# Healer recovery time as the encoder width grows. Each setting runs the
# whole pipeline, so this takes several minutes.

import tempfile

from selfheal.harness import ExperimentConfig, complexity_sweep

cfg = ExperimentConfig(sim_ticks=600, train_epochs=8, rl_episodes=60, eval_seeds=6)
with tempfile.TemporaryDirectory() as tmp:
    result = complexity_sweep(cfg, tmp, hidden_values=(8, 16, 32))
for h, ticks in result.items():
    print(f"hidden {h:>3}: mean recovery {ticks:.1f} ticks")

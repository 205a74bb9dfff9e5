# Train the full model stack on a small generated dataset, then score the
# held-out windows and look at the fused anomaly scores.

import tempfile
from pathlib import Path

import numpy as np

from selfheal.harness import ExperimentConfig, detect_stage, eval_stage, gen_stage, heal_stage, train_stage

cfg = ExperimentConfig(sim_ticks=600, train_epochs=8, rl_episodes=40, eval_seeds=4)
out = Path(tempfile.mkdtemp(prefix="selfheal_demo_"))

gen_stage(cfg, out / "data")
curve = train_stage(cfg, out / "data", out / "model.fdsh")
print("total loss by epoch:", np.round([row["l_total"] for row in curve], 3))

detect_stage(out / "model.fdsh", out / "data", out / "scores.csv")
lines = (out / "scores.csv").read_text().splitlines()
print(len(lines) - 1, "scored windows; first rows:")
for line in lines[:6]:
    print("  " + line)

heal_stage(cfg, out / "model.fdsh", out / "episodes.csv")
report = eval_stage(out / "scores.csv", out / "data", out / "episodes.csv", out / "metrics.json", horizon=cfg.rl_horizon)
print(f"accuracy {report.accuracy:.3f}  mean recovery {report.mean_recovery_ticks:.1f} ticks")
print("artifacts in", out)

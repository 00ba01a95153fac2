#!/usr/bin/env python3
"""Why learn the ratio online: the grid baseline needs one full training
run per candidate ratio; the policy route needs two runs total (one that
learns the ratio while fine-tuning, one final run at the learned ratio).
This script runs both on the stock task and prints quality and cost side
by side. The wall-clock section re-executes both arms under a timer, so
expect roughly half a minute in total.

Run it:  python3 demos/grid_vs_policy.py
"""

import dataclasses

from policyprune.baselines import compare_efficiency, format_runtime_table, grid_search
from policyprune.configio import load_run_config
from policyprune.masking import estimate_scale
from policyprune.training import run_pipeline

cfg = load_run_config()
seed = cfg.seed

# fixed budgets for a fair step comparison: early stopping off in both arms
train = dataclasses.replace(cfg.training, early_stop_patience=None)

# --- quality: the learned ratio vs the exhaustive table ---------------------
art = run_pipeline(cfg.task, cfg.lora, train, cfg.controller, seed)
data = art.data
outcome = grid_search(
    data.backbone, art.merged_init, data.target_train, data.dev,
    estimate_scale(data.microdev.head(cfg.controller.microdev_n).x),
    train, seed, grid=cfg.grid, test=data.test,
)

print("per-ratio table (dev/test loss after prune-at-p + fine-tune):")
for pt in outcome.points:
    marker = "  <- grid best" if pt.p == outcome.best_p else ""
    print(f"  p={pt.p:.2f}  dev {pt.dev_loss:.5f}  test {pt.test_loss:.5f}{marker}")

best = outcome.best
print(f"\npolicy-learned ratio: p_star = {art.p_star:.3f} "
      f"(dev {art.final.dev_loss:.5f})")
print(f"grid best ratio:      p = {best.p:.2f} (dev {best.dev_loss:.5f})")
print(f"quality ratio (policy / grid best): "
      f"{art.final.dev_loss / best.dev_loss:.4f}")

# --- cost: steps by arithmetic, wall clock by measurement -------------------
comp = compare_efficiency(cfg.task, cfg.lora, train, cfg.controller, seed,
                          grid=cfg.grid, repeats=1)
print()
print(format_runtime_table(comp))
print(f"\nstep accounting: grid trains {comp.grid.run_count} runs, the policy "
      f"route {comp.grasp.run_count}; {comp.grid.total_steps} vs "
      f"{comp.grasp.total_steps} optimizer steps -> {comp.step_speedup:.1f}x")
print("wall clock is measured, not derived: probe evaluations ride on the "
      "first run, so the\nwall ratio sits below the step ratio.")

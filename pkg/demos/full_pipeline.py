#!/usr/bin/env python3
"""The whole pipeline end to end on the stock task, twice, to show
determinism: train two adapters, merge, learn the prune ratio online from
micro-dev probes, prune once at the learned ratio, fine-tune.

Run it:  python3 demos/full_pipeline.py
"""

from policyprune.configio import load_run_config
from policyprune.training import run_pipeline, total_steps

cfg = load_run_config()  # stock settings throughout
seed = cfg.seed

print(f"task: d_in={cfg.task.d_in}, d_out={cfg.task.d_out}, "
      f"{cfg.task.n_sites} sites, interference={cfg.task.interference}")
print(f"controller: p in [{cfg.controller.p_min}, {cfg.controller.p_max}], "
      f"start {cfg.controller.p_init}, one round every "
      f"{cfg.controller.round_every} steps, m={cfg.controller.microdev_n}")

art = run_pipeline(cfg.task, cfg.lora, cfg.training, cfg.controller, seed)

budget = total_steps(cfg.training, cfg.task.target_train_n)
print(f"\nphase 1: source adapter final loss {art.source_losses[-1]:.5f}, "
      f"target adapter final loss {art.target_losses[-1]:.5f}")
print(f"phase 2: {len(art.policy.records)} controller rounds over "
      f"{art.policy.steps_run} steps ({art.policy.commits} commits)")
print(f"         learned p_star = {art.p_star:.3f}")
print(f"phase 3: {art.final.steps_run}/{budget} steps"
      f"{' (early stop)' if art.final.stopped_early else ''}, "
      f"dev loss {art.final.dev_loss:.5f}, test loss {art.final.test_loss:.5f}")
print(f"         realized prune fraction {art.final.mask.overall_fraction():.4f}")

print("\ncommitted-ratio trace (every 20th round):")
for rec in art.policy.records[::20]:
    print(f"  round {rec.round:3d}  p_curr={rec.p_curr_after:.3f} "
          f" mu={rec.mu_after:.3f}  sigma={rec.sigma_after:.3f}")

# the whole run is a pure function of (configs, seed)
again = run_pipeline(cfg.task, cfg.lora, cfg.training, cfg.controller, seed)
other = run_pipeline(cfg.task, cfg.lora, cfg.training, cfg.controller, seed + 1)
print(f"\nsame seed reruns identically: "
      f"{again.p_star == art.p_star and again.final.dev_loss == art.final.dev_loss}")
print(f"different seed differs: p_star {other.p_star:.3f} vs {art.p_star:.3f}, "
      f"dev {other.final.dev_loss:.5f} vs {art.final.dev_loss:.5f}")

print("""
The same chain as shell commands, with every artifact on disk:
  policyprune train-adapters --out runs
  policyprune controller     --out runs
  policyprune finalize       --out runs
""")

"""Reduced-scale probe of the segmentation C-sweep trend directions.

Runs the desk experiment with fewer steps per C to sanity-check that
d_X grows and d_D falls as C moves from 0.01 toward 1 before committing
to the full run.
"""

import json
import sys
import time

from taskrec.config import parse_config
from taskrec.experiments import build_experiment
from taskrec.training import sweep_C, replace

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 600

cfg = parse_config(f"""
experiment = segmentation
scale = desk
steps = {STEPS}
num_phantoms = 100
seed = 0
log_every = 100
""")
bundle = build_experiment(cfg)
print(f"steps/C = {bundle.regime_config.steps}, batch = "
      f"{bundle.regime_config.batch_size}", flush=True)


def eval_parts(model):
    scores = bundle.evaluate(model)
    print("  eval:", scores, flush=True)
    return scores["l2_loss"], scores["cross_entropy"]


t0 = time.time()
rows = sweep_C(bundle.source, bundle.model_factory, bundle.regime_config,
               [0.01, 0.5, 0.9, 0.999], eval_parts_fn=eval_parts)
print(json.dumps(rows, indent=2))
print(f"total {time.time() - t0:.0f}s", flush=True)

"""Pilot run: one seed across the four variants at a reduced budget to gauge
the ablation ordering before committing to the full study."""

import json
import sys
import time
from pathlib import Path

from satbev.config import ExperimentConfig
from satbev.train import evaluate, load_split, train

OUT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/satbev-pilot")
STEPS = sys.argv[2] if len(sys.argv) > 2 else "300"
TRAIN_N = sys.argv[3] if len(sys.argv) > 3 else "120"
SEED = sys.argv[4] if len(sys.argv) > 4 else "0"

base = ExperimentConfig.default().with_overrides({
    "opt.steps": STEPS,
    "data.train": TRAIN_N,
    "data.eval": "40",
    "run.seed": SEED,
})

results = {}
for variant in ("bev_only", "no_refine", "gfr_star", "gfr_full"):
    cfg = base.with_overrides({"model.variant": variant})
    t0 = time.perf_counter()
    res = train(cfg, OUT)
    metrics = evaluate(res.params, cfg, load_split(cfg, OUT, "eval"))
    dt = time.perf_counter() - t0
    results[variant] = {
        "mAP": metrics["mAP"], "metrics": metrics,
        "final_loss": res.losses[-1], "minutes": dt / 60.0,
    }
    print(f"{variant}: mAP {metrics['mAP']:.4f} loss {res.losses[-1]:.4f} "
          f"({dt/60:.1f} min)", flush=True)

(OUT / "pilot.json").write_text(json.dumps(results, indent=2))
print(json.dumps({k: round(v["mAP"], 4) for k, v in results.items()}))

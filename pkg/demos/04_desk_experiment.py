# Train the tiny model on vessel phantoms and register held-out cross-style pairs.
# Run: python demos/04_desk_experiment.py [epochs] [run_dir]
# The full setting (20 epochs, 32 subjects) takes about half an hour on one CPU core;
# the default here is a quick 3-epoch pass on 8 subjects.
import logging
import sys
from dataclasses import replace

import numpy as np
import torch

from vesselkp import desk

torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO, format="%(message)s")

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
run_dir = sys.argv[2] if len(sys.argv) > 2 else "runs/demo_desk"
cfg = desk.DeskConfig()
if epochs < cfg.epochs:
    cfg = replace(cfg, n_subjects=8, labeled_subjects=4, held_out=6, epochs=epochs)
else:
    cfg = replace(cfg, epochs=epochs)

results, state = desk.run_desk(cfg, run_dir, ablations=False, deterministic=True)
main = results["main"]
print("repeatability at 3 px: %.3f -> %.3f" % (main["repeatability_start"], main["repeatability_end"]))
for row in results["registration"]:
    extra = row.get("error") or "%d matches, %d inliers" % (row["matches"], row["inliers"])
    print("%s  median corner error %7.2f px  (%s)" % (row["pair"], row["median_corner_error"], extra))
errs = np.array([r["median_corner_error"] for r in results["registration"]])
print("pairs under 3 px: %d / %d" % ((errs < 3).sum(), len(errs)))
print("artifacts in", run_dir)

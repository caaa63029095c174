"""Sparse reaction coefficient under a Laplace prior.

Compares the IRLS MAP coefficients with the sparse truth.

    python demos/sparse_reaction.py [out_dir]
"""
import json
import sys
from pathlib import Path

import numpy as np

from fracbayes.experiment import Experiment, load_config, run

root = Path(__file__).resolve().parent.parent
out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/laplace")
cfg = load_config(root / "configs" / "laplace_desk.yaml")
for stage in ("synth", "map"):
    run(cfg, stage, out)

truth = Experiment(cfg, out).truth()
v = np.asarray(json.loads((out / "map.json").read_text())["v"])
print(" j    truth      MAP")
for j in np.flatnonzero((truth != 0) | (np.abs(v) > 0.05)):
    print(f"{j + 1:2d}  {truth[j]:7.3f}  {v[j]:7.3f}")
print("largest |MAP| off the true support:", np.abs(v[truth == 0]).max().round(4))

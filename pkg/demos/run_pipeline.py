"""Run the standard stages for one config and print a short summary.

    python demos/run_pipeline.py configs/orders_desk.yaml out/orders
"""
import json
import sys
from pathlib import Path

import numpy as np

from fracbayes.diagnostics import weight_histogram
from fracbayes.experiment import load_config, run
from fracbayes.fields import bounded_transform

cfg_path, out = Path(sys.argv[1]), Path(sys.argv[2] if len(sys.argv) > 2 else "out")
cfg = load_config(cfg_path)
stages = ["synth", "map", "implicit", "lmap", "diagnose"]
if cfg["prior"]["family"] == "gaussian":
    stages.insert(4, "mcmc")
for stage in stages:
    run(cfg, stage, out)
    print(f"{stage:>9s} done")

info = json.loads((out / "map.json").read_text())
print(f"MAP misfit {info['misfit']:.4g} (n sigma^2 = {info['n_sigma2']:.4g}), {info['iterations']} iterations")
if "alpha" in info:
    print("MAP orders", np.round(info["alpha"], 4))
ens = np.loadtxt(out / "ensemble.csv", delimiter=",", skiprows=1, ndmin=2)
w, theta = ens[:, 1], ens[:, 4:]
print("ESS", round(1 / np.sum(w**2), 1), "of", w.size)
print("weight buckets", weight_histogram(w).tolist())
if "alpha" in info:
    a = bounded_transform(theta[:, :2])
    mean = w @ a
    print("posterior orders mean", np.round(mean, 4), "std", np.round(np.sqrt(w @ (a - mean) ** 2), 4))

"""How the tempering scale spreads implicit-sampling weights.

Uses the joint orders + permeability problem; prints the weight histogram and
ESS for a few scales, then the smallest scale that reaches a target ESS.

    python demos/weight_tempering.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from fracbayes.diagnostics import weight_histogram
from fracbayes.experiment import load_config, run
from fracbayes.sampling import ess, select_theta, tempered_weights

root = Path(__file__).resolve().parent.parent
out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/joint")
cfg = load_config(root / "configs" / "joint_desk.yaml")
for stage in ("synth", "map", "implicit"):
    run(cfg, stage, out)

ens = np.loadtxt(out / "ensemble.csv", delimiter=",", skiprows=1)
F, Fhat = ens[:, 2], ens[:, 3]
print("scale  ESS     max w     [0,1e-6) .. [1e-1,1]")
for scale in (1, 5, 10, 15):
    w = tempered_weights(Fhat, F, scale)
    print(f"{scale:5d}  {ess(w):6.1f}  {w.max():.2e}  {weight_histogram(w).tolist()}")

pick = select_theta(Fhat, F, target=0.7 * F.size)
print(f"smallest integer scale with ESS >= {0.7 * F.size:.0f}: {pick.theta} (reached: {pick.reached})")

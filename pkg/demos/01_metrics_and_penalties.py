"""
Scoring a prediction against ground truth, and what happens when a
structure is missed entirely.

Run: python3 demos/01_metrics_and_penalties.py
"""

import numpy as np

from labelcurate import metrics as M
from labelcurate.catalog import StructureCatalog, StructureDef
from labelcurate.phantoms import ball
from labelcurate.volgrid import LabelGrid

spacing = (1.5, 1.5, 1.5)
shape = (60, 60, 60)

# A spherical organ and a prediction that is shifted by two voxels and slightly too big.
gt = ball(shape, (30, 30, 30), 12)
pred = ball(shape, (32, 30, 30), 13)

s_gt, s_pred = M.surface_points(gt, spacing), M.surface_points(pred, spacing)
print("overlap and surface metrics")
print(f"  dice          {M.dice(gt, pred):.4f}")
print(f"  nsd @ 3 mm    {M.nsd(s_gt, s_pred, 3.0):.4f}")
print(f"  hd / hd95     {M.hd(s_gt, s_pred):.2f} / {M.hd95(s_gt, s_pred):.2f} mm")
print(f"  tpr           {M.tpr(gt, pred):.4f}")
print(f"  error volume  {M.error_volume(gt, pred):+.1f} %")

# One stray voxel far away moves HD but barely touches HD95.
stray = pred.copy()
stray[58, 58, 58] = True
s_stray = M.surface_points(stray, spacing)
print(f"\nwith one stray voxel: hd {M.hd(s_gt, s_stray):.2f} mm, hd95 {M.hd95(s_gt, s_stray):.2f} mm")

# Penalty policy: the reference is the typical volume of the structure in voxels.
reference = int(gt.sum())
catalog = StructureCatalog((StructureDef(1, "organ", 1, 1, float(reference)),))
empty = LabelGrid(np.zeros(shape, np.uint16), spacing)
print(f"\npenalty policy (reference {reference} voxels, grid diagonal {empty.diagonal_mm():.2f} mm)")
for frac in (0.05, 0.5, 0.95):
    lab = np.zeros(shape, np.uint16)
    lab.reshape(-1)[: int(frac * reference)] = 1
    truth = LabelGrid(lab, spacing)
    for name, p in (("empty prediction", empty), ("perfect prediction", truth)):
        r = M.evaluate_structure(truth, p, 1, catalog=catalog)
        extra = f" hd95={r.hd95:.2f}" if r.hd95 is not None else ""
        flags = f" flags={list(r.flags)}" if r.flags else ""
        print(f"  GT at {frac:>4.0%} of reference, {name:<18} -> {r.status}{extra}{flags}")

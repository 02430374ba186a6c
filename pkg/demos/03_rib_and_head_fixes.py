"""
Anatomical clean-up on toy volumes: a rib split across two labels, a
rib-head joint missing from the prediction, and a hallucinated head
structure on a scan whose brain is too small to trust.

Run: python3 demos/03_rib_and_head_fixes.py
"""

import numpy as np

from labelcurate import postfix as P
from labelcurate.phantoms import ball, opening_stable_blob
from labelcurate.volgrid import LabelGrid

# A single rib whose tail was predicted as the neighbouring rib.
ribs = np.zeros((40, 12, 12), np.uint16)
ribs[5:35, 6, 6] = 85
ribs[26:35, 6, 6] = 86
fixed = P.rib_relabel(LabelGrid(ribs))


def counts(a):
    values, n = np.unique(a[a > 0], return_counts=True)
    return {int(v): int(c) for v, c in zip(values, n)}


print("rib relabel:", counts(ribs), "->", counts(fixed.labels))

# The joint between the rib and the spine is visible only to a tubular-structure detector.
blob = opening_stable_blob(150)
bx, by, _ = blob.shape
shape = (bx + 10, by + 10, 12)
tubular = np.zeros(shape, bool)
tubular[2:2 + bx, 2:2 + by, 4:7] = blob
spine = np.zeros(shape, bool)
spine[:, :, :4] = True
rib = np.zeros(shape, np.uint16)
rib[bx + 4, 2:2 + by, 5] = 85
joined = P.rib_joint_retrieve(LabelGrid(rib), spine, tubular)
print(f"joint retrieval: rib voxels {int((rib > 0).sum())} -> {int((joined.labels > 0).sum())}")

# Head gating: a brain under 2000 voxels means head labels are not trusted.
for radius in (7, 8):
    brain = ball((40, 40, 40), (20, 20, 20), radius)
    print(f"brain radius {radius}: {int(brain.sum())} voxels, gate open: {P.head_gate(brain)}")

brain = ball((300, 30, 30), (15, 15, 15), 8)
labels = np.zeros((300, 30, 30), np.uint16)
labels[15, 15, 15] = 90
labels[165, 15, 15] = 90      # 150 voxels from the brain centroid
cropped = P.head_crop(LabelGrid(labels), brain, "brain")
print("head crop keeps", int((cropped.labels > 0).sum()), "of", int((labels > 0).sum()), "labeled voxels")

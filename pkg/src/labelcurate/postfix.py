"""
Anatomical clean-up of assembled label volumes.

- head gating and cropping against hallucinated head structures,
- rib relabeling by component majority vote,
- recovery of rib-head joints from an external tubular-structure mask,
- interpolation of labels annotated only on every k-th slice.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyCentroid, InsufficientSlices
from .volgrid import LabelGrid, check_same_geometry

__all__ = [
    "HeadGateParams", "RibJointParams", "brain_centroid", "cross_element", "head_crop", "head_gate",
    "interpolate_sparse_slices", "postprocess_labels", "rib_joint_retrieve", "rib_relabel",
]

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class HeadGateParams:
    brain_min_voxels: int = 2000
    brain_box: tuple[int, int, int] = (100, 100, 133)
    hn_box: tuple[int, int, int] = (100, 100, 200)

    def __post_init__(self):
        if self.brain_min_voxels <= 0 or min(self.brain_box) <= 0 or min(self.hn_box) <= 0:
            raise ValueError("head gating parameters must be positive")

    def box(self, name: str) -> tuple[int, int, int]:
        if name == "brain":
            return tuple(self.brain_box)
        if name in ("head_neck", "hn"):
            return tuple(self.hn_box)
        raise ValueError(f"unknown box {name!r}; expected 'brain' or 'head_neck'")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class RibJointParams:
    spine_dilation_radius: int = 3
    opening_radius: int = 1
    min_size: int = 100
    max_size: int = 1500
    assignment_radius: float = 15.0

    def __post_init__(self):
        if not 0 < self.min_size < self.max_size:
            raise ValueError("need 0 < min_size < max_size")
        if self.spine_dilation_radius < 0 or self.opening_radius < 0 or self.assignment_radius < 0:
            raise ValueError("radii must be non-negative")

    def to_dict(self):
        return asdict(self)


def _as_mask(m) -> np.ndarray:
    if isinstance(m, LabelGrid):
        return m.labels != 0
    return np.asarray(m, dtype=bool)


# ---------------------------------------------------------------------------
# head region
# ---------------------------------------------------------------------------

def head_gate(brain_mask, params: HeadGateParams | None = None) -> bool:
    """True when the predicted brain is large enough to trust head-structure labels."""
    params = params or HeadGateParams()
    return int(np.count_nonzero(_as_mask(brain_mask))) >= params.brain_min_voxels


def brain_centroid(brain_mask) -> tuple[int, int, int]:
    m = _as_mask(brain_mask)
    if not m.any():
        raise EmptyCentroid("brain mask is empty")
    c = np.argwhere(m).mean(axis=0)
    return tuple(int(v) for v in np.floor(c + 0.5))


def head_crop(labels: LabelGrid, brain_mask, box: str = "brain",
              params: HeadGateParams | None = None) -> LabelGrid:
    """Zero every label outside the box ``centroid ± half-size`` (inclusive, clamped to the grid)."""
    params = params or HeadGateParams()
    if isinstance(brain_mask, LabelGrid):
        check_same_geometry(labels, brain_mask)
    m = _as_mask(brain_mask)
    if m.shape != labels.dims:
        raise ValueError(f"brain mask shape {m.shape} differs from labels {labels.dims}")
    center = brain_centroid(m)
    half = params.box(box)
    keep = np.zeros(labels.dims, dtype=bool)
    sl = tuple(slice(max(0, c - h), min(n, c + h + 1)) for c, h, n in zip(center, half, labels.dims))
    keep[sl] = True
    out = np.where(keep, labels.labels, 0)
    return labels.with_data(out)


# ---------------------------------------------------------------------------
# ribs
# ---------------------------------------------------------------------------

def rib_relabel(ribs: LabelGrid) -> LabelGrid:
    """Give every 26-connected rib component its most frequent label (smaller id on ties)."""
    lab = ribs.labels
    comp, n = ndimage.label(lab != 0, structure=CONNECTIVITY_26)
    if n == 0:
        return ribs
    fg = comp > 0
    c, v = comp[fg], lab[fg].astype(np.int64)
    # count each (component, label) pair; pick the max count, smallest label on ties
    pairs, counts = np.unique(np.stack([c, v], axis=1), axis=0, return_counts=True)
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs = pairs[order]
    first = np.concatenate(([True], pairs[1:, 0] != pairs[:-1, 0]))
    modal = np.zeros(n + 1, dtype=np.uint16)
    modal[pairs[first, 0]] = pairs[first, 1]
    out = np.where(fg, modal[comp], 0)
    return ribs.with_data(out)


def cross_element(radius: int) -> np.ndarray:
    """3D cross (6-neighbourhood) structuring element iterated ``radius`` times."""
    base = ndimage.generate_binary_structure(3, 1)
    if radius <= 1:
        return base if radius == 1 else np.ones((1, 1, 1), dtype=bool)
    return ndimage.iterate_structure(base, radius)


def _ball_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    return ndimage.distance_transform_edt(~mask) <= radius


def rib_joint_retrieve(ribs: LabelGrid, spine_mask, tubular_mask,
                       params: RibJointParams | None = None) -> LabelGrid:
    """Attach tubular-detector components near the spine to their nearest rib."""
    params = params or RibJointParams()
    for m in (spine_mask, tubular_mask):
        if isinstance(m, LabelGrid):
            check_same_geometry(ribs, m)
    spine = _as_mask(spine_mask)
    tubular = _as_mask(tubular_mask)
    rib_lab = ribs.labels
    rib_fg = rib_lab != 0
    if not tubular.any() or not spine.any() or not rib_fg.any():
        return ribs

    cand = tubular & _ball_dilate(spine, params.spine_dilation_radius) & ~spine
    if params.opening_radius > 0:
        cand = ndimage.binary_opening(cand, structure=cross_element(params.opening_radius))
    cand &= ~rib_fg
    comp, n = ndimage.label(cand, structure=CONNECTIVITY_26)
    if n == 0:
        return ribs
    sizes = np.bincount(comp.ravel(), minlength=n + 1)

    dist, idx = ndimage.distance_transform_edt(~rib_fg, sampling=ribs.spacing, return_indices=True)
    out = rib_lab.copy()
    for k in range(1, n + 1):
        if not params.min_size <= sizes[k] <= params.max_size:
            continue
        vox = comp == k
        d = dist[vox]
        j = int(np.argmin(d))
        if d[j] > params.assignment_radius:
            continue
        src = tuple(ix[vox][j] for ix in idx)
        out[vox] = rib_lab[src]
    return ribs.with_data(out)


# ---------------------------------------------------------------------------
# sparse slices
# ---------------------------------------------------------------------------

def _sdf2d(mask: np.ndarray) -> np.ndarray:
    """Signed distance to the boundary, negative inside; an empty mask is far outside everywhere."""
    if not mask.any():
        return np.full(mask.shape, float(np.hypot(*mask.shape)) + 1.0)
    if mask.all():
        return np.full(mask.shape, -float(np.hypot(*mask.shape)) - 1.0)
    outside = ndimage.distance_transform_edt(~mask) - 0.5
    inside = ndimage.distance_transform_edt(mask) - 0.5
    return np.where(mask, -inside, outside)


def interpolate_sparse_slices(sparse: LabelGrid, axis: int = 2, annotated_slices=None) -> LabelGrid:
    """
    Fill unannotated slices by blending 2D signed distance fields of the two
    bounding annotated slices. Annotated slices are copied unchanged; slices
    outside the annotated range copy the nearest annotated one.
    """
    data = np.moveaxis(sparse.labels, axis, 0)
    if annotated_slices is None:
        annotated_slices = [i for i in range(data.shape[0]) if data[i].any()]
    ann = sorted(set(int(s) for s in annotated_slices))
    if len(ann) < 2:
        raise InsufficientSlices(f"need at least 2 annotated slices, got {len(ann)}")
    if ann[0] < 0 or ann[-1] >= data.shape[0]:
        raise ValueError("annotated slice index out of range")

    out = np.zeros_like(data)
    labels = sorted(int(v) for v in np.unique(data[ann]) if v != 0)
    sdf = {s: np.stack([_sdf2d(data[s] == l) for l in labels]) if labels else None for s in ann}

    for lo, hi in zip(ann[:-1], ann[1:]):
        for z in range(lo + 1, hi):
            if not labels:
                continue
            t = (z - lo) / (hi - lo)
            blend = (1 - t) * sdf[lo] + t * sdf[hi]
            best = np.argmin(blend, axis=0)
            fg = np.min(blend, axis=0) <= 0
            out[z] = np.where(fg, np.asarray(labels, dtype=out.dtype)[best], 0)
    for s in ann:
        out[s] = data[s]
    out[: ann[0]] = data[ann[0]]
    out[ann[-1] + 1:] = data[ann[-1]]
    return sparse.with_data(np.moveaxis(out, 0, axis))


# ---------------------------------------------------------------------------
# whole-volume pass
# ---------------------------------------------------------------------------

BRAIN_NAME = "brain"
BRAIN_GROUP = 7
HEAD_NECK_GROUP = 8
SPINE_BLOCKS = ("vertebrae_cervical", "vertebrae_thoracic", "vertebrae_lumbar")


def postprocess_labels(labels: LabelGrid, catalog, tubular_mask=None,
                       head_params: HeadGateParams | None = None,
                       rib_params: RibJointParams | None = None) -> tuple[LabelGrid, dict]:
    """
    Run the head and rib fixes on an assembled multi-structure volume.

    Returns the refined grid and a small log of what was applied. Recovered
    joint voxels are written only where the volume is background.
    """
    head_params = head_params or HeadGateParams()
    out = np.array(labels.labels)
    log = {}

    brain_ids = [catalog[BRAIN_NAME].id] if BRAIN_NAME in catalog else []
    brain = np.isin(out, brain_ids)
    head_groups = {BRAIN_GROUP: "brain", HEAD_NECK_GROUP: "head_neck"}
    gate = head_gate(brain, head_params)
    log["head_gate"] = gate
    for group, box in head_groups.items():
        ids = [s.id for s in catalog.group_members(group)]
        sel = np.isin(out, ids)
        if not sel.any():
            continue
        if not gate:
            out[sel] = 0
            log[f"removed_{box}"] = int(sel.sum())
            continue
        part = labels.with_data(np.where(sel, out, 0))
        cropped = head_crop(part, brain, box, head_params).labels
        dropped = sel & (cropped == 0)
        out[dropped] = 0
        log[f"cropped_{box}"] = int(dropped.sum())

    rib_ids = [s.id for s in catalog.block_members("ribs")]
    rib_sel = np.isin(out, rib_ids)
    if rib_sel.any():
        ribs = labels.with_data(np.where(rib_sel, out, 0))
        relabeled = rib_relabel(ribs)
        log["ribs_relabeled"] = int(np.count_nonzero(relabeled.labels != ribs.labels))
        out[rib_sel] = relabeled.labels[rib_sel]
        if tubular_mask is not None:
            spine_ids = [s.id for b in SPINE_BLOCKS for s in catalog.block_members(b)]
            spine = np.isin(out, spine_ids)
            joined = rib_joint_retrieve(relabeled, spine, tubular_mask, rib_params).labels
            added = (joined != 0) & (relabeled.labels == 0) & (out == 0)
            out[added] = joined[added]
            log["joint_voxels_added"] = int(added.sum())
    return labels.with_data(out), log

"""
Synthetic phantoms: a small on-disk corpus for running the whole pipeline,
plus geometric helpers used by tests and demos.

The corpus is analytic (ellipsoids, boxes, tubes in world millimetres), so
each case can be sampled on any grid geometry. Raw cases are deliberately
stored in different orientations and spacings so that standardization has
something to do.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .catalog import default_catalog
from .io import write_json, write_nifti
from .volgrid import LabelGrid, ScalarGrid, axis_directions

__all__ = ["make_corpus", "opening_stable_blob", "ball", "CANONICAL_SHAPE"]

CANONICAL_SHAPE = (48, 48, 56)
CANONICAL_SPACING = 1.5
EXTENT = np.array(CANONICAL_SHAPE) * CANONICAL_SPACING


# ---------------------------------------------------------------------------
# small shapes
# ---------------------------------------------------------------------------

def ball(shape, center, radius) -> np.ndarray:
    idx = np.indices(shape, dtype=float)
    d2 = sum((idx[i] - center[i]) ** 2 for i in range(3))
    return d2 <= radius**2


def _blob_size(a, b, m):
    # centres: an a-by-b rectangle plus m extra centres on a partial row; a cross per centre
    if m == 0:
        return 3 * a * b + 2 * a + 2 * b
    return 2 * (a * b + m) + a * b + 2 * a + 2 * b + m + 1 + (m == a)


def opening_stable_blob(size: int) -> np.ndarray:
    """
    A 26-connected union of 6-neighbour crosses with exactly ``size`` voxels.

    Because every voxel belongs to a cross lying inside the set, an opening
    with the cross element leaves it unchanged. The blob is 3 voxels thick
    along axis 2.
    """
    best = None
    for a in range(1, 60):
        for b in range(a, 200):
            for m in range(0, a + 1):
                if _blob_size(a, b, m) == size:
                    cand = (b - a, a, b, m)
                    if best is None or cand < best:
                        best = cand
    if best is None:
        raise ValueError(f"no blob of size {size}")
    _, a, b, m = best
    centres = np.zeros((a + 2, b + 3, 3), dtype=bool)
    centres[1:a + 1, 1:b + 1, 1] = True
    centres[1:m + 1, b + 1, 1] = True
    blob = ndimage.binary_dilation(centres, structure=ndimage.generate_binary_structure(3, 1))
    assert int(blob.sum()) == size
    sl = ndimage.find_objects(blob.astype(np.uint8))[0]
    return blob[sl]


# ---------------------------------------------------------------------------
# analytic anatomy (world mm on the canonical RAS box)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Shape:
    name: str
    kind: str
    center: tuple
    size: tuple
    hu: float

    def inside(self, pts: np.ndarray, shift) -> np.ndarray:
        c = np.asarray(self.center) + shift
        if self.kind == "ellipsoid":
            return np.sum(((pts - c) / np.asarray(self.size)) ** 2, axis=-1) <= 1.0
        if self.kind == "box":
            return np.all(np.abs(pts - c) <= np.asarray(self.size), axis=-1)
        if self.kind == "tube":
            # segment from center to size, radius 2.2 mm
            a, b = c, np.asarray(self.size) + shift
            ab = b - a
            t = np.clip(((pts - a) @ ab) / (ab @ ab), 0, 1)
            return np.sum((pts - (a + t[..., None] * ab)) ** 2, axis=-1) <= 2.2**2
        raise ValueError(self.kind)


# painted in this order; later shapes overwrite earlier ones
ANATOMY = (
    _Shape("liver", "ellipsoid", (26, 36, 30), (15, 12, 10), 60),
    _Shape("kidney_r", "ellipsoid", (22, 48, 22), (6, 5, 8), 30),
    _Shape("kidney_l", "ellipsoid", (50, 48, 22), (6, 5, 8), 30),
    _Shape("spleen", "ellipsoid", (54, 40, 34), (7, 6, 8), 45),
    _Shape("vertebrae_l1", "box", (36, 58, 22), (5, 5, 5.4), 400),
    _Shape("vertebrae_t12", "box", (36, 58, 34), (5, 5, 5.4), 400),
    _Shape("rib_11_l", "tube", (48, 60, 40), (64, 40, 40), 300),
    _Shape("rib_12_l", "tube", (48, 60, 49), (64, 42, 53), 300),
    _Shape("brain", "ellipsoid", (36, 36, 70), (15, 15, 11), 35),
    _Shape("white_matter", "ellipsoid", (36, 36, 70), (7, 7, 5), 28),
)
JOINT = _Shape("joint", "box", (44.0, 59, 36), (2.6, 6.5, 5.5), 0)
BODY = _Shape("body", "ellipsoid", (36, 42, 40), (34, 30, 48), -50)


def _world_points(dims, spacing, orientation, origin):
    idx = np.indices(dims, dtype=float).reshape(3, -1).T * np.asarray(spacing)
    return (idx @ axis_directions(orientation).T + np.asarray(origin)).reshape(*dims, 3)


def _raw_geometry(orientation, spacing):
    """Dims and origin so the raw grid covers the canonical world box."""
    dirs = axis_directions(orientation)
    spacing = np.asarray(spacing, dtype=float)
    # world axis covered by each voxel axis
    world_axis = np.argmax(np.abs(dirs), axis=0)
    dims = tuple(int(round(EXTENT[w] / s)) for w, s in zip(world_axis, spacing))
    origin = np.zeros(3)
    for v, w in enumerate(world_axis):
        if dirs[w, v] < 0:
            origin[w] = (dims[v] - 1) * spacing[v]
    return dims, tuple(origin)


def _paint(pts, shift, names, catalog, skip=()):
    out = np.zeros(pts.shape[:3], dtype=np.uint16)
    for s in ANATOMY:
        if s.name in names and s.name not in skip:
            out[s.inside(pts, shift)] = catalog[s.name].id
    return out


@dataclass(frozen=True)
class _CaseSpec:
    case_id: str
    orientation: str
    spacing: tuple
    split: str
    adapter: str = "identity"
    gt_skip: tuple = ()
    brain: bool = True
    pseudo_misses: tuple = ()


CASES = (
    _CaseSpec("case01", "RAS", (1.5, 1.5, 1.5), "train"),
    _CaseSpec("case02", "LPS", (1.5, 1.5, 3.0), "train", gt_skip=("rib_11_l", "rib_12_l"), brain=False),
    _CaseSpec("case03", "LAS", (1.0, 1.0, 1.5), "train", gt_skip=("spleen",)),
    _CaseSpec("case04", "PIR", (3.0, 1.5, 1.5), "train", adapter="kidneys", pseudo_misses=("spleen",)),
    _CaseSpec("case05", "RAS", (1.5, 1.5, 1.5), "test", adapter="sparse_slices"),
)


def _perturb(labels, catalog, flavor, rng, misses=()):
    """Flavor-specific imperfections on top of the true labels."""
    out = labels.copy()
    cross = ndimage.generate_binary_structure(3, 1)
    sid = lambda n: catalog[n].id
    if flavor == "GT":
        m = out == sid("spleen")
        out[m & ~ndimage.binary_erosion(m, cross)] = 0
    elif flavor == "Pseudo":
        m = ndimage.binary_dilation(out == sid("liver"), cross) & (out == 0)
        out[m] = sid("liver")
        # fragment a rib: the lateral third carries its neighbour's label
        rib = np.argwhere(out == sid("rib_11_l"))
        if len(rib):
            cut = np.quantile(rib[:, 0], 0.7)
            sel = rib[rib[:, 0] > cut]
            out[tuple(sel.T)] = sid("rib_12_l")
    elif flavor == "Shape":
        for n in ("kidney_r", "kidney_l"):
            m = out == sid(n)
            out[m] = 0
            out[np.roll(m, int(rng.integers(1, 3)), axis=1) & (out == 0)] = sid(n)
    for n in misses:
        out[out == sid(n)] = 0
    return out


SCORE_PATTERNS = {
    "liver": "pseudo_best", "spleen": "gt_best", "kidney_r": "hd95_shape", "kidney_l": "tie",
    "vertebrae_l1": "shape_best", "vertebrae_t12": "shape_best", "rib_11_l": "pseudo_best",
    "rib_12_l": "pseudo_best", "brain": "gt_best", "white_matter": "hd95_shape",
}


def _flavor_scores(catalog, names, rng) -> str:
    """Synthetic per-case validation scores with a mix of ranking situations."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["structure_id", "flavor", "split", "metric", "case_id", "value"])
    for name in names:
        sid = catalog[name].id
        pattern = SCORE_PATTERNS.get(name, "tie")
        base_d = np.clip(rng.normal(0.85, 0.02, 10), 0, 1)
        base_h = rng.lognormal(1.0, 0.2, 10)
        for flavor in ("GT", "Pseudo", "Shape"):
            d, h = base_d.copy(), base_h.copy()
            if pattern == "pseudo_best":
                d = d + {"GT": -0.2, "Pseudo": 0.05, "Shape": -0.1}[flavor]
            elif pattern == "gt_best":
                d = d + {"GT": 0.08, "Pseudo": -0.1, "Shape": -0.1}[flavor]
            elif pattern == "shape_best":
                d = d + {"GT": -0.1, "Pseudo": -0.05, "Shape": 0.1}[flavor]
            elif pattern == "hd95_shape":
                h = h * {"GT": 2.0, "Pseudo": 2.1, "Shape": 1.0}[flavor]
            if pattern != "tie":
                d = d + rng.normal(0, 0.005, 10)
            d = np.clip(np.round(d, 4), 0, 1)
            h = np.round(h, 3)
            for i in range(10):
                w.writerow([sid, flavor, "id", "dice", f"v{i:02d}", repr(float(d[i]))])
                w.writerow([sid, flavor, "id", "hd95", f"v{i:02d}", repr(float(h[i]))])
    return buf.getvalue()


def make_corpus(out_dir, n_cases: int = 5, seed: int = 0, predictions_equal_gt: bool = False) -> Path:
    """
    Write a synthetic corpus and return the manifest path.

    Layout: ``<out>/manifest.json``, ``<out>/catalog.csv``, ``<out>/scores.csv``
    and ``<out>/cases/<case>/{image,gt,GT,Pseudo,Shape,tubular}.nii.gz``.
    With ``predictions_equal_gt`` each case also gets a ``final`` prediction
    identical to its ground truth.
    """
    out = Path(out_dir)
    catalog_full = default_catalog()
    names = [s.name for s in ANATOMY]
    entries, volumes = [], {n: [] for n in names}

    for spec in CASES[:n_cases]:
        rng = np.random.default_rng([seed, int(spec.case_id[-2:])])
        shift = rng.uniform(-2.0, 2.0, 3)
        dims, origin = _raw_geometry(spec.orientation, spec.spacing)
        pts = _world_points(dims, spec.spacing, spec.orientation, origin)
        present = [n for n in names if spec.brain or n not in ("brain", "white_matter")]
        truth = _paint(pts, shift, present, catalog_full)
        if not spec.brain:
            # a small hallucinated brain-tissue blob that gating should remove
            s = _Shape("wm", "ellipsoid", (36, 36, 70), (3, 3, 3), 0)
            truth[s.inside(pts, shift)] = catalog_full["white_matter"].id
        for n in names:
            c = int(np.count_nonzero(truth == catalog_full[n].id))
            if c:
                volumes[n].append(c * float(np.prod(spec.spacing)) / CANONICAL_SPACING**3)

        image = np.full(dims, -1000.0, dtype=np.float32)
        image[BODY.inside(pts, shift)] = BODY.hu
        for s in ANATOMY:
            if s.name in present:
                image[truth == catalog_full[s.name].id] = s.hu
        image += rng.normal(0, 12, dims).astype(np.float32)

        gt = _paint(pts, shift, present, catalog_full, skip=spec.gt_skip)
        if spec.adapter == "sparse_slices":
            axial = np.argmax(np.abs(axis_directions(spec.orientation)[2]))
            keep = np.zeros(dims[axial], dtype=bool)
            keep[::4] = True
            shape = [1, 1, 1]
            shape[axial] = -1
            gt = gt * keep.reshape(shape)

        case_dir = out / "cases" / spec.case_id
        case_dir.mkdir(parents=True, exist_ok=True)
        geo = dict(spacing=spec.spacing, orientation=spec.orientation, origin=origin)
        rel = lambda n: f"cases/{spec.case_id}/{n}.nii.gz"
        write_nifti(ScalarGrid(image, **geo), case_dir / "image.nii.gz")
        write_nifti(LabelGrid(gt, **geo), case_dir / "gt.nii.gz")
        preds = {}
        for flavor in ("GT", "Pseudo", "Shape"):
            lab = _perturb(truth, catalog_full, flavor, rng, spec.pseudo_misses if flavor == "Pseudo" else ())
            write_nifti(LabelGrid(lab, **geo), case_dir / f"{flavor}.nii.gz")
            preds[flavor] = rel(flavor)
        if predictions_equal_gt:
            preds["final"] = rel("gt")
        write_nifti(LabelGrid(JOINT.inside(pts, shift).astype(np.uint16), **geo), case_dir / "tubular.nii.gz")
        entries.append({"case_id": spec.case_id, "image": rel("image"), "gt": rel("gt"),
                        "predictions": preds, "extras": {"tubular": rel("tubular")},
                        "adapter": spec.adapter, "split": spec.split, "flags": []})

    sub = catalog_full.subset(names)
    rows = io.StringIO()
    w = csv.writer(rows, lineterminator="\n")
    w.writerow(["id", "name", "group", "occurrence", "median_volume", "aliases", "side", "block"])
    for s in sub:
        v = volumes[s.name]
        med = float(np.median(v)) if v else 1.0
        w.writerow([s.id, s.name, s.group, max(len(v), 1), repr(round(med, 1)), ";".join(s.aliases),
                    s.side, s.block])
    (out / "catalog.csv").write_text(rows.getvalue(), encoding="utf-8")
    (out / "scores.csv").write_text(
        _flavor_scores(catalog_full, names, np.random.default_rng([seed, 99])), encoding="utf-8")
    manifest = out / "manifest.json"
    write_json({"version": 1, "entries": entries}, manifest)
    return manifest

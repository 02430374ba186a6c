"""
Overlap and surface-distance metrics for binary structure masks, the
false-negative penalty policy, and dataset-level evaluation with bootstrap
confidence intervals.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import GridMismatch, UndefinedDistance, UndefinedRatio
from .volgrid import LabelGrid, check_same_geometry

log = logging.getLogger(__name__)

__all__ = [
    "EVALUATED", "EXCLUDED", "PENALIZED",
    "MetricRecord", "PenaltyPolicy", "SurfaceSet",
    "aggregate_records", "bootstrap_ci", "dice", "directed_distances",
    "error_volume", "evaluate_dataset", "evaluate_masks", "evaluate_structure",
    "hd", "hd95", "nearest_rank", "nsd", "percentile_hausdorff",
    "surface_points", "tpr",
]

EVALUATED = "evaluated"
PENALIZED = "penalized"
EXCLUDED = "excluded"

METRIC_FIELDS = ("dice", "nsd", "hd", "hd95", "tpr", "error_volume")


@dataclass(frozen=True)
class MetricRecord:
    case_id: str
    structure_id: int
    status: str
    dice: float | None = None
    nsd: float | None = None
    hd: float | None = None
    hd95: float | None = None
    tpr: float | None = None
    error_volume: float | None = None
    structure: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.status not in (EVALUATED, PENALIZED, EXCLUDED):
            raise ValueError(f"unknown status {self.status!r}")
        values = [getattr(self, f) for f in METRIC_FIELDS]
        if self.status == EXCLUDED and any(v is not None for v in values):
            raise ValueError("excluded records carry no metric values")
        if self.status != EXCLUDED and any(v is None for v in values):
            raise ValueError(f"{self.status} records need every metric value")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        d = dict(d)
        d["flags"] = tuple(d.get("flags") or ())
        return cls(**d)


@dataclass(frozen=True)
class SurfaceSet:
    points: np.ndarray

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class PenaltyPolicy:
    """
    Missed-structure penalty and partial-visibility exclusion thresholds.

    Both fractions are relative to the catalog column named by
    ``reference_column`` (voxel counts on the 1.5 mm grid).
    """

    missed_fraction: float = 0.90
    exclude_fraction: float = 0.10
    nsd_tolerance_mm: float = 3.0
    reference_column: str = "median_volume"

    def __post_init__(self):
        if not 0 < self.exclude_fraction < self.missed_fraction <= 1:
            raise ValueError("need 0 < exclude_fraction < missed_fraction <= 1")


def _as_mask(m) -> np.ndarray:
    if isinstance(m, LabelGrid):
        m = m.data
    return np.asarray(m).astype(bool, copy=False)


def _pair(gt, pred):
    gt, pred = _as_mask(gt), _as_mask(pred)
    if gt.shape != pred.shape:
        raise GridMismatch(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    return gt, pred


def dice(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    denom = int(gt.sum()) + int(pred.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(gt & pred)) / denom


def tpr(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    n = int(gt.sum())
    if n == 0:
        raise UndefinedRatio("true positive rate needs a nonempty ground truth")
    return int(np.count_nonzero(gt & pred)) / n


def error_volume(gt, pred) -> float:
    """Signed volume error of the prediction, in percent of the ground-truth volume."""
    gt, pred = _pair(gt, pred)
    n = int(gt.sum())
    if n == 0:
        raise UndefinedRatio("error volume needs a nonempty ground truth")
    return 100.0 * (int(pred.sum()) - n) / n


_FACE = ndimage.generate_binary_structure(3, 1)


def surface_points(mask, spacing=(1.0, 1.0, 1.0)) -> SurfaceSet:
    """Centers (mm) of foreground voxels with at least one background face neighbour."""
    mask = _as_mask(mask)
    if not mask.any():
        return SurfaceSet(np.zeros((0, 3)))
    interior = ndimage.binary_erosion(mask, structure=_FACE, border_value=0)
    idx = np.argwhere(mask & ~interior)
    return SurfaceSet(idx * np.asarray(spacing, dtype=float))


def directed_distances(a: SurfaceSet, b: SurfaceSet) -> np.ndarray:
    """For each point of ``a``, the Euclidean distance to the closest point of ``b``."""
    if len(a) == 0 or len(b) == 0:
        raise UndefinedDistance("surface distance is undefined for an empty surface")
    d, _ = cKDTree(b.points).query(a.points, k=1)
    return np.asarray(d, dtype=float)


def nearest_rank(values, q: float) -> float:
    """The ``ceil(q * n)``-th smallest value (1-based nearest-rank percentile)."""
    v = np.sort(np.asarray(values, dtype=float))
    k = max(1, math.ceil(Fraction(repr(float(q))) * len(v)))
    return float(v[k - 1])


def percentile_hausdorff(a: SurfaceSet, b: SurfaceSet, q: float) -> float:
    """Symmetric ``q``-percentile Hausdorff distance: max of both directed percentiles."""
    return max(nearest_rank(directed_distances(a, b), q), nearest_rank(directed_distances(b, a), q))


def hd(gt_surface: SurfaceSet, pred_surface: SurfaceSet) -> float:
    return max(float(directed_distances(gt_surface, pred_surface).max()),
               float(directed_distances(pred_surface, gt_surface).max()))


def hd95(gt_surface: SurfaceSet, pred_surface: SurfaceSet) -> float:
    return percentile_hausdorff(gt_surface, pred_surface, 0.95)


def nsd(gt_surface: SurfaceSet, pred_surface: SurfaceSet, tau: float = 3.0) -> float:
    d_gp = directed_distances(gt_surface, pred_surface)
    d_pg = directed_distances(pred_surface, gt_surface)
    hits = int(np.count_nonzero(d_gp <= tau)) + int(np.count_nonzero(d_pg <= tau))
    return hits / (len(d_gp) + len(d_pg))


def evaluate_masks(gt, pred, spacing, diagonal: float, reference: float,
                   policy: PenaltyPolicy, case_id: str = "", structure_id: int = 0,
                   structure: str = "") -> MetricRecord:
    """Apply the exclusion / penalty policy to one structure and compute its metrics."""
    gt, pred = _pair(gt, pred)
    n_gt = int(gt.sum())
    n_pred = int(pred.sum())
    base = dict(case_id=case_id, structure_id=structure_id, structure=structure)

    if n_gt == 0 or n_gt < policy.exclude_fraction * reference:
        return MetricRecord(status=EXCLUDED, **base)
    if n_pred == 0:
        flags = () if n_gt > policy.missed_fraction * reference else ("partially_visible_miss",)
        return MetricRecord(status=PENALIZED, dice=0.0, nsd=0.0, hd=diagonal, hd95=diagonal,
                            tpr=0.0, error_volume=-100.0, flags=flags, **base)

    s_gt, s_pred = surface_points(gt, spacing), surface_points(pred, spacing)
    d_gp = directed_distances(s_gt, s_pred)
    d_pg = directed_distances(s_pred, s_gt)
    tau = policy.nsd_tolerance_mm
    return MetricRecord(
        status=EVALUATED,
        dice=dice(gt, pred),
        nsd=(int(np.count_nonzero(d_gp <= tau)) + int(np.count_nonzero(d_pg <= tau)))
        / (len(d_gp) + len(d_pg)),
        hd=max(float(d_gp.max()), float(d_pg.max())),
        hd95=max(nearest_rank(d_gp, 0.95), nearest_rank(d_pg, 0.95)),
        tpr=tpr(gt, pred),
        error_volume=error_volume(gt, pred),
        **base,
    )


def _reference_volume(structure_def, policy) -> float:
    return float(getattr(structure_def, policy.reference_column))


def evaluate_structure(gt: LabelGrid, pred: LabelGrid, structure_id, policy: PenaltyPolicy | None = None,
                       catalog=None, case_id: str = "") -> MetricRecord:
    """Evaluate one catalog structure of a (ground truth, prediction) label-map pair."""
    from .catalog import default_catalog

    policy = policy or PenaltyPolicy()
    catalog = catalog or default_catalog()
    sdef = catalog[structure_id]
    check_same_geometry(gt, pred)
    return evaluate_masks(gt.data == sdef.id, pred.data == sdef.id, gt.spacing,
                          gt.diagonal_mm(), _reference_volume(sdef, policy), policy,
                          case_id=case_id, structure_id=sdef.id, structure=sdef.name)


# ---------------------------------------------------------------------------
# dataset evaluation
# ---------------------------------------------------------------------------

def evaluate_case(entry, adapter, policy: PenaltyPolicy, catalog, prediction_key: str = "final",
                  base_dir=None) -> list[MetricRecord]:
    """Evaluate one manifest entry under a dataset adapter."""
    from .io import read_case_grid

    gt = read_case_grid(entry, "gt", base_dir)
    pred = read_case_grid(entry, prediction_key, base_dir)
    check_same_geometry(gt, pred)

    gt_labels = adapter.apply_lesion_merge(gt.data, catalog)
    pred_labels = np.asarray(pred.data)
    if adapter.sparse_slices:
        annotated = np.any(gt_labels != 0, axis=(0, 1))
        gt_labels = gt_labels * annotated[None, None, :]
        pred_labels = pred_labels * annotated[None, None, :]

    present = set(np.unique(gt_labels).tolist()) | set(np.unique(pred_labels).tolist())
    present.discard(0)
    records = []
    for target in adapter.targets(catalog, present):
        records.append(evaluate_masks(
            np.isin(gt_labels, target.label_ids), np.isin(pred_labels, target.label_ids),
            gt.spacing, gt.diagonal_mm(), target.reference_volume(policy.reference_column),
            policy, case_id=entry.case_id, structure_id=target.id, structure=target.name,
        ))
    return records


def _case_job(args):
    entry, adapter, policy, catalog, key, base_dir, isolate = args
    try:
        return evaluate_case(entry, adapter, policy, catalog, key, base_dir), None
    except Exception as exc:
        if not isolate:
            raise
        log.error("case %s failed: %s", entry.case_id, exc)
        return [], f"{type(exc).__name__}: {exc}"


def evaluate_dataset(manifest, adapter=None, policy: PenaltyPolicy | None = None, catalog=None,
                     prediction_key: str = "final", workers: int = 1, seed: int = 0,
                     n_resamples: int = 10_000, isolate: bool = False):
    """
    Evaluate every manifest entry that has a ground truth and the requested prediction.

    ``adapter`` overrides the per-entry adapter named in the manifest.

    Returns ``(records, aggregate)``. Records are sorted by (case_id,
    structure_id). ``aggregate`` holds per-structure mean / median / 95%
    bootstrap CI plus the lists of excluded and failed cases. With
    ``isolate=True`` a failing case is logged and reported instead of raised.
    """
    from .catalog import default_catalog
    policy = policy or PenaltyPolicy()
    catalog = catalog or default_catalog()
    if adapter is not None:
        adapter.validate(catalog)

    todo, skipped = [], []
    for entry in sorted(manifest.entries, key=lambda e: e.case_id):
        case_adapter = adapter or manifest.adapter(entry.adapter)
        if entry.flags & case_adapter.exclusion_flags:
            skipped.append(entry.case_id)
            continue
        if adapter is None:
            case_adapter.validate(catalog)
        todo.append((entry, case_adapter, policy, catalog, prediction_key, manifest.base_dir, isolate))

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_case_job, todo))
    else:
        results = [_case_job(t) for t in todo]

    records, failures = [], {}
    for (entry, *_), (recs, err) in zip(todo, results):
        records.extend(recs)
        if err is not None:
            failures[entry.case_id] = err
    records.sort(key=lambda r: (r.case_id, r.structure_id))
    aggregate = aggregate_records(records, seed=seed, n_resamples=n_resamples)
    aggregate["excluded_cases"] = skipped
    aggregate["failed_cases"] = failures
    return records, aggregate


def bootstrap_ci(values, rng, n_resamples: int = 10_000, level: float = 0.95,
                 chunk: int = 1000) -> tuple[float, float]:
    """Percentile bootstrap CI of the mean."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return (math.nan, math.nan)
    means = np.empty(n_resamples)
    for start in range(0, n_resamples, chunk):
        stop = min(start + chunk, n_resamples)
        idx = rng.integers(0, len(v), size=(stop - start, len(v)))
        means[start:stop] = v[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def aggregate_records(records, seed: int = 0, n_resamples: int = 10_000) -> dict:
    """Per-structure summary of evaluated and penalized records."""
    by_structure: dict[int, list[MetricRecord]] = {}
    for r in records:
        by_structure.setdefault(r.structure_id, []).append(r)

    table = {}
    for sid in sorted(by_structure):
        recs = sorted(by_structure[sid], key=lambda r: r.case_id)
        scored = [r for r in recs if r.status != EXCLUDED]
        row = {
            "structure_id": sid,
            "structure": recs[0].structure,
            "n": len(scored),
            "n_evaluated": sum(r.status == EVALUATED for r in recs),
            "n_penalized": sum(r.status == PENALIZED for r in recs),
            "n_excluded": sum(r.status == EXCLUDED for r in recs),
        }
        for i, metric in enumerate(METRIC_FIELDS):
            vals = np.array([getattr(r, metric) for r in scored], dtype=float)
            if len(vals) == 0:
                row[metric] = None
                continue
            rng = np.random.default_rng([seed, sid, i])
            lo, hi = bootstrap_ci(vals, rng, n_resamples)
            row[metric] = {"mean": float(vals.mean()), "median": float(np.median(vals)),
                           "ci95": [lo, hi]}
        table[str(sid)] = row
    return {"structures": table}

"""
Shape-based quality ranking of pseudo-labels.

A shape prior reconstructs each pseudo-label; the symmetric 90th-percentile
Hausdorff distance between a pseudo-label and its reconstruction scores how
implausible the pseudo-label is. The worst-scoring fraction is excluded from
downstream training data.

Any reconstruction source can be plugged in through :func:`qc_score`. The
built-in :class:`MeanShapePrior` is a centroid-aligned occupancy template.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import EmptyTrainingSet, ParseError, UndefinedDistance
from .metrics import percentile_hausdorff, surface_points

__all__ = [
    "MeanShapePrior", "QCEntry", "QCReport", "exclusion_count", "fit_mean_shape_prior",
    "qc_score", "rank_and_exclude", "reconstruct",
]

CANONICAL_DIMS = (64, 64, 64)
CANONICAL_SPACING = (1.5, 1.5, 1.5)


def _centroid(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask).mean(axis=0)


def _round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(int)


def _paste_shifted(mask: np.ndarray, shift, out_shape) -> np.ndarray:
    """Translate foreground voxels by an integer shift into a new grid, clipping at its border."""
    out = np.zeros(out_shape, dtype=bool)
    idx = np.argwhere(mask) + np.asarray(shift, dtype=int)
    keep = np.all((idx >= 0) & (idx < np.asarray(out_shape)), axis=1)
    idx = idx[keep]
    out[tuple(idx.T)] = True
    return out


@dataclass(frozen=True)
class MeanShapePrior:
    structure_id: int
    occupancy: np.ndarray
    sample_count: int
    spacing: tuple[float, float, float] = CANONICAL_SPACING

    @property
    def dims(self):
        return self.occupancy.shape

    def template(self, threshold: float = 0.5) -> np.ndarray:
        return self.occupancy >= threshold

    def save(self, path) -> None:
        np.savez_compressed(path, structure_id=self.structure_id, occupancy=self.occupancy,
                            sample_count=self.sample_count, spacing=np.asarray(self.spacing))

    @classmethod
    def load(cls, path) -> "MeanShapePrior":
        with np.load(path) as z:
            return cls(int(z["structure_id"]), z["occupancy"], int(z["sample_count"]),
                       tuple(float(s) for s in z["spacing"]))


def fit_mean_shape_prior(masks, structure_id: int = 0, dims=CANONICAL_DIMS) -> MeanShapePrior:
    """Average of training masks after moving each centroid to the canonical-grid center."""
    masks = [np.asarray(m, dtype=bool) for m in masks]
    masks = [m for m in masks if m.any()]
    if not masks:
        raise EmptyTrainingSet("the shape prior needs at least one nonempty mask")
    center = np.asarray(dims) // 2
    counts = np.zeros(dims, dtype=np.int64)
    for m in masks:
        shift = _round_half_up(center - _centroid(m))
        counts += _paste_shifted(m, shift, dims)
    return MeanShapePrior(structure_id, counts / len(masks), len(masks))


def reconstruct(prior: MeanShapePrior, pseudo) -> np.ndarray:
    """The thresholded template, translated so its centroid lands on the pseudo-label centroid."""
    pseudo = np.asarray(pseudo, dtype=bool)
    if not pseudo.any():
        return np.zeros(pseudo.shape, dtype=bool)
    template = prior.template()
    if not template.any():
        return np.zeros(pseudo.shape, dtype=bool)
    shift = _round_half_up(_centroid(pseudo) - _centroid(template))
    return _paste_shifted(template, shift, pseudo.shape)


def qc_score(pseudo, reconstruction, spacing=CANONICAL_SPACING, q: float = 0.90) -> float:
    """Symmetric 90th-percentile Hausdorff distance (mm); ``inf`` when either mask is empty."""
    try:
        return percentile_hausdorff(surface_points(pseudo, spacing),
                                    surface_points(reconstruction, spacing), q)
    except UndefinedDistance:
        return math.inf


def exclusion_count(n: int, fraction: float) -> int:
    return math.ceil(Fraction(repr(float(fraction))) * n)


@dataclass(frozen=True)
class QCEntry:
    case_id: str
    structure_id: int | None
    score: float
    rank: int
    excluded: bool


@dataclass(frozen=True)
class QCReport:
    entries: tuple[QCEntry, ...]
    exclusion_fraction: float
    mode: str = "image"

    def excluded_cases(self, structure_id=None) -> list[str]:
        return sorted(e.case_id for e in self.entries
                      if e.excluded and (structure_id is None or e.structure_id == structure_id))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "structure_id", "score_mm", "rank", "excluded"])
        for e in self.entries:
            w.writerow([e.case_id, "" if e.structure_id is None else e.structure_id,
                        repr(float(e.score)), e.rank, int(e.excluded)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path, exclusion_fraction: float = 0.10, mode: str = "image") -> "QCReport":
        entries = []
        text = Path(path).read_text("utf-8")
        for line, row in enumerate(csv.DictReader(io.StringIO(text)), start=2):
            try:
                sid = row["structure_id"]
                entries.append(QCEntry(row["case_id"], int(sid) if sid != "" else None,
                                       float(row["score_mm"]), int(row.get("rank") or 0),
                                       bool(int(row["excluded"]))))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{line}: {exc!r}") from None
        return cls(tuple(entries), exclusion_fraction, mode)


def _rank_group(items, fraction):
    """items: list of (case_id, structure_id, score). Ascending score, case_id breaks ties."""
    def key(it):
        s = it[2]
        return (math.inf if s != s else s, it[0])

    ordered = sorted(items, key=key)
    k = exclusion_count(len(ordered), fraction)
    n = len(ordered)
    return [QCEntry(c, sid, float(s), rank, rank > n - k)
            for rank, (c, sid, s) in enumerate(ordered, start=1)]


def rank_and_exclude(scores, fraction: float = 0.10, mode: str = "image") -> QCReport:
    """
    Rank pseudo-labels by QC distance and mark the worst ``ceil(fraction * n)`` as excluded.

    ``scores`` holds ``(case_id, structure_id, distance_mm)`` triples. In
    ``"image"`` mode the per-structure distances of each case are averaged
    first (any ``inf`` makes the case ``inf``) and whole cases are excluded;
    in ``"structure"`` mode each structure is ranked on its own. Rank 1 is
    the most plausible entry.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    scores = list(scores)
    if not scores:
        raise ValueError("no scores to rank")

    entries = []
    if mode == "image":
        per_case: dict[str, list[float]] = {}
        for case_id, _, s in scores:
            per_case.setdefault(case_id, []).append(float(s))
        items = [(c, None, math.inf if any(math.isinf(v) or v != v for v in vals) else float(np.mean(vals)))
                 for c, vals in per_case.items()]
        entries = _rank_group(items, fraction)
    elif mode == "structure":
        groups: dict[int, list] = {}
        for case_id, sid, s in scores:
            groups.setdefault(sid, []).append((case_id, sid, float(s)))
        for sid in sorted(groups):
            entries.extend(_rank_group(groups[sid], fraction))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return QCReport(tuple(entries), fraction, mode)

"""
Per-structure selection of the most reliable training flavor.

Each structure has Dice and HD95 samples for three flavors (GT-only,
all pseudo-labels, shape-filtered pseudo-labels). Dice decides first through
an omnibus test plus post-hoc pairs; if the top is still shared, HD95 is
compared among the tied flavors. Every test consulted lands in the trail.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stats
from .errors import DegenerateSample, ParseError, SampleTooSmall

__all__ = [
    "FLAVORS", "PREFERENCE", "FlavorSamples", "FlavorScoreSet", "RankingOutcome", "TrailRecord",
    "load_flavor_scores", "rank_flavors", "rankings_to_json", "read_rankings",
]

FLAVORS = ("GT", "Pseudo", "Shape")
# residual ties: descending label fidelity
PREFERENCE = ("GT", "Shape", "Pseudo")
ALPHA = 0.05
MIN_SAMPLES = 3

_FLAVOR_KEYS = {f.lower(): f for f in FLAVORS}


def canonical_flavor(name: str) -> str:
    try:
        return _FLAVOR_KEYS[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown flavor {name!r}; expected one of {', '.join(FLAVORS)}") from None


@dataclass(frozen=True)
class FlavorSamples:
    dice_id: tuple[float, ...] = ()
    dice_ood: tuple[float, ...] = ()
    hd95_id: tuple[float, ...] = ()
    hd95_ood: tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("dice_id", "dice_ood", "hd95_id", "hd95_ood"):
            vals = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, vals)
            if name.startswith("dice") and any(not 0.0 <= v <= 1.0 for v in vals):
                raise ValueError(f"{name}: Dice values must lie in [0, 1]")
            if name.startswith("hd95") and any(not v >= 0.0 for v in vals):
                raise ValueError(f"{name}: HD95 values must be >= 0")

    def get(self, metric: str, split: str) -> tuple[float, ...]:
        return getattr(self, f"{metric}_{split}")


@dataclass(frozen=True)
class FlavorScoreSet:
    structure_id: int
    flavors: dict = field(default_factory=dict)

    def __post_init__(self):
        flavors = {canonical_flavor(k): v for k, v in self.flavors.items()}
        for f in FLAVORS:
            flavors.setdefault(f, FlavorSamples())
        object.__setattr__(self, "flavors", flavors)

    def samples(self, flavor: str) -> FlavorSamples:
        return self.flavors[canonical_flavor(flavor)]


@dataclass(frozen=True)
class TrailRecord:
    test: str
    statistic: float | None
    p_value: float | None
    decision: str

    def to_dict(self):
        return {"test": self.test, "statistic": self.statistic, "p_value": self.p_value,
                "decision": self.decision}


@dataclass(frozen=True)
class RankingOutcome:
    structure_id: int
    order: tuple[str, ...]
    points: dict
    trail: tuple[TrailRecord, ...]
    used_secondary: bool
    means: dict = field(default_factory=dict)
    split: str = "id"

    @property
    def winner(self) -> str:
        return self.order[0]

    def to_dict(self):
        return {
            "structure_id": self.structure_id,
            "order": list(self.order),
            "points": {f: self.points[f] for f in FLAVORS},
            "means": {m: {f: v for f, v in sorted(d.items())} for m, d in sorted(self.means.items())},
            "split": self.split,
            "used_secondary": self.used_secondary,
            "trail": [t.to_dict() for t in self.trail],
        }

    @classmethod
    def from_dict(cls, d) -> "RankingOutcome":
        trail = tuple(TrailRecord(t["test"], t["statistic"], t["p_value"], t["decision"])
                      for t in d["trail"])
        return cls(int(d["structure_id"]), tuple(d["order"]), dict(d["points"]), trail,
                   bool(d["used_secondary"]), {m: dict(v) for m, v in d.get("means", {}).items()},
                   d.get("split", "id"))


# ---------------------------------------------------------------------------
# one metric stage
# ---------------------------------------------------------------------------

def _significance(samples: dict, metric: str, trail: list):
    """Gate, omnibus and post-hoc tests. Returns the list of significant PairwiseResults."""
    names = list(samples)
    groups = [np.asarray(samples[f]) for f in names]

    normal = True
    for f, g in zip(names, groups):
        try:
            r = stats.shapiro_wilk(g)
        except DegenerateSample:
            trail.append(TrailRecord(f"{metric}:shapiro_wilk[{f}]", None, None, "constant sample: non-normal"))
            normal = False
            continue
        ok = r.p_value > ALPHA
        normal &= ok
        trail.append(TrailRecord(f"{metric}:shapiro_wilk[{f}]", r.statistic, r.p_value,
                                 "normal" if ok else "non-normal"))
    lev = stats.levene(groups, names)
    equal_var = lev.p_value > ALPHA
    trail.append(TrailRecord(f"{metric}:levene", lev.statistic, lev.p_value,
                             "equal variances" if equal_var else "unequal variances"))

    if normal and equal_var:
        omnibus, posthoc = stats.one_way_anova(groups, names), stats.tukey_hsd
    elif normal:
        try:
            omnibus, posthoc = stats.welch_anova(groups, names), stats.dunn
        except DegenerateSample as exc:
            trail.append(TrailRecord(f"{metric}:route", None, None,
                                     f"welch_anova undefined ({exc}); using kruskal_wallis"))
            omnibus, posthoc = stats.kruskal_wallis(groups, names), stats.dunn
    else:
        omnibus, posthoc = stats.kruskal_wallis(groups, names), stats.dunn
    trail.append(TrailRecord(f"{metric}:{omnibus.name}", omnibus.statistic, omnibus.p_value,
                             f"omnibus {'significant' if omnibus.p_value < ALPHA else 'not significant'}"))

    ph = posthoc(groups, names)
    significant = []
    for pr in ph.pairwise:
        sig = pr.p_value < ALPHA
        trail.append(TrailRecord(f"{metric}:{ph.name}[{pr.a}-{pr.b}]", pr.statistic, pr.p_value,
                                 "significant" if sig else "not significant"))
        if sig:
            significant.append(pr)
    return significant


def _mean_rank_points(means: dict, higher_better: bool, scale: list[float]) -> dict:
    """Points by mean order; flavors with equal means share the average of their slots."""
    names = sorted(means, key=lambda f: -means[f] if higher_better else means[f])
    points, i = {}, 0
    while i < len(names):
        j = i
        while j + 1 < len(names) and means[names[j + 1]] == means[names[i]]:
            j += 1
        share = sum(scale[i:j + 1]) / (j + 1 - i)
        for f in names[i:j + 1]:
            points[f] = share
        i = j + 1
    return points


def _stage(samples: dict, metric: str, higher_better: bool, win_points: float,
           rank_scale: list[float], trail: list) -> dict:
    means = {f: float(np.mean(v)) for f, v in samples.items()}
    significant = _significance(samples, metric, trail)
    points = {f: 0.0 for f in samples}
    if significant:
        for pr in significant:
            a_larger = pr.statistic > 0
            winner = pr.a if a_larger == higher_better else pr.b
            points[winner] += win_points
        trail.append(TrailRecord(f"{metric}:points", None, None,
                                 f"+{win_points:g} per significant win: " + _fmt_points(points)))
    else:
        points = _mean_rank_points(means, higher_better, rank_scale)
        trail.append(TrailRecord(f"{metric}:points", None, None,
                                 "no significant pair; mean-rank points: " + _fmt_points(points)))
    return points


def _fmt_points(points: dict) -> str:
    return ", ".join(f"{f}={points[f]:g}" for f in FLAVORS if f in points)


def _pick_split(scores: FlavorScoreSet, metric: str, flavors) -> str:
    if all(scores.samples(f).get(metric, "ood") for f in flavors):
        return "ood"
    return "id"


def _dominant(samples: dict):
    """The flavor whose smallest sample exceeds every other flavor's largest, if any."""
    for f, v in samples.items():
        if all(min(v) > max(w) for g, w in samples.items() if g != f):
            return f
    return None


def rank_flavors(scores: FlavorScoreSet) -> RankingOutcome:
    """Order the three flavors for one structure, best first."""
    trail: list[TrailRecord] = []
    split = _pick_split(scores, "dice", FLAVORS)
    dice = {f: scores.samples(f).get("dice", split) for f in FLAVORS}
    for f in FLAVORS:
        if len(dice[f]) < MIN_SAMPLES:
            raise SampleTooSmall(f"structure {scores.structure_id}: flavor {f} has {len(dice[f])} "
                                 f"Dice value(s) in split '{split}', need {MIN_SAMPLES}")
    trail.append(TrailRecord("dice:split", None, None, f"using {split} samples"))
    means = {"dice": {f: float(np.mean(dice[f])) for f in FLAVORS}}

    points = _stage(dice, "dice", True, 1.0, [2.0, 1.0, 0.0], trail)

    # a flavor that beats every sample of the others must not lose the top spot
    dom = _dominant(dice)
    if dom is not None:
        best_other = max(p for f, p in points.items() if f != dom)
        if points[dom] <= best_other:
            points[dom] = best_other + 0.5
            trail.append(TrailRecord("dice:dominance", None, None,
                                     f"{dom} dominates all Dice samples; raised to {points[dom]:g}"))

    used_secondary = False
    top = max(points.values())
    tied = [f for f in FLAVORS if points[f] == top]
    if len(tied) >= 2:
        hsplit = _pick_split(scores, "hd95", tied)
        hd = {f: scores.samples(f).get("hd95", hsplit) for f in tied}
        short = [f for f in tied if len(hd[f]) < MIN_SAMPLES]
        if short:
            trail.append(TrailRecord("hd95:skipped", None, None,
                                     f"top tie among {', '.join(tied)}; too few HD95 values for {', '.join(short)}"))
        else:
            used_secondary = True
            trail.append(TrailRecord("hd95:split", None, None,
                                     f"top tie among {', '.join(tied)}; using {hsplit} samples"))
            means["hd95"] = {f: float(np.mean(hd[f])) for f in tied}
            extra = _stage(hd, "hd95", False, 0.5, [1.0, 0.5, 0.0], trail)
            for f, p in extra.items():
                points[f] += p

    order = tuple(sorted(FLAVORS, key=lambda f: (-points[f], PREFERENCE.index(f))))
    trail.append(TrailRecord("order", None, None, " > ".join(order)))
    return RankingOutcome(scores.structure_id, order, points, tuple(trail), used_secondary,
                          means, split)


# ---------------------------------------------------------------------------
# file interfaces
# ---------------------------------------------------------------------------

SCORE_COLUMNS = ("structure_id", "flavor", "split", "metric", "case_id", "value")


def parse_flavor_scores(text: str, source: str = "<scores>") -> dict[int, FlavorScoreSet]:
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in SCORE_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ParseError(f"{source}: missing column(s) {', '.join(missing)}")
    rows: dict = {}
    for line, row in enumerate(reader, start=2):
        try:
            sid = int(row["structure_id"])
            flavor = canonical_flavor(row["flavor"])
            split = row["split"].strip().lower()
            metric = row["metric"].strip().lower()
            value = float(row["value"])
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{source}:{line}: {exc}") from None
        if split not in ("id", "ood"):
            raise ParseError(f"{source}:{line}: field 'split' must be id or ood, got {split!r}")
        if metric not in ("dice", "hd95"):
            raise ParseError(f"{source}:{line}: field 'metric' must be dice or hd95, got {metric!r}")
        rows.setdefault(sid, {}).setdefault(flavor, {}).setdefault(f"{metric}_{split}", []).append(
            (row["case_id"], value))
    out = {}
    for sid in sorted(rows):
        flavors = {}
        for flavor, lists in rows[sid].items():
            try:
                flavors[flavor] = FlavorSamples(**{k: tuple(v for _, v in sorted(vals))
                                                   for k, vals in lists.items()})
            except ValueError as exc:
                raise ParseError(f"{source}: structure {sid}, flavor {flavor}: {exc}") from None
        out[sid] = FlavorScoreSet(sid, flavors)
    return out


def load_flavor_scores(path) -> dict[int, FlavorScoreSet]:
    return parse_flavor_scores(Path(path).read_text("utf-8"), str(path))


def _clean(obj):
    # JSON has no inf/nan
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def rankings_to_json(outcomes, config: dict | None = None) -> str:
    from . import __version__
    doc = {"tool": "labelcurate", "version": __version__, "config": config or {},
           "rankings": [o.to_dict() for o in sorted(outcomes, key=lambda o: o.structure_id)]}
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def read_rankings(path) -> dict[int, RankingOutcome]:
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
        return {int(d["structure_id"]): RankingOutcome.from_dict(d) for d in doc["rankings"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc!r}") from None

"""
Priority-ordered merging of per-structure pseudo-labels into one label volume.

Within each anatomical group the least reliable structures (lowest mean Dice
of their selected flavor) are painted first so that more reliable ones
overwrite them. Manual annotations, when present, are painted last.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import StructureCatalog, default_catalog
from .errors import DegenerateOccurrence, IncompletePlan, MissingSource, ParseError
from .rank import PREFERENCE, RankingOutcome
from .volgrid import LabelGrid, check_same_geometry

__all__ = [
    "AssemblyPlan", "Layer", "SamplingWeights", "assemble", "build_plan", "compute_gt_fractions",
    "sampling_weights",
]

MANUAL_GT = "ManualGT"
SOURCES = ("GT", "Pseudo", "Shape", MANUAL_GT)


@dataclass(frozen=True)
class Layer:
    structure_id: int
    source: str
    mean_dice: float | None = None
    gt_fraction: float | None = None

    def to_dict(self):
        return {"structure_id": self.structure_id, "source": self.source,
                "mean_dice": self.mean_dice, "gt_fraction": self.gt_fraction}


@dataclass(frozen=True)
class AssemblyPlan:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        seen, manual_started = set(), False
        for layer in self.layers:
            if layer.source not in SOURCES:
                raise ValueError(f"unknown layer source {layer.source!r}")
            if layer.source == MANUAL_GT:
                manual_started = True
                continue
            if manual_started:
                raise ValueError("manual annotation layers must come after all pseudo-label layers")
            if layer.structure_id in seen:
                raise ValueError(f"structure {layer.structure_id} appears twice")
            seen.add(layer.structure_id)

    @property
    def structure_ids(self) -> list[int]:
        return [l.structure_id for l in self.layers if l.source != MANUAL_GT]

    def flavor_of(self, structure_id: int) -> str:
        for l in self.layers:
            if l.structure_id == structure_id and l.source != MANUAL_GT:
                return l.source
        raise KeyError(structure_id)

    def with_manual_gt(self, structure_ids) -> "AssemblyPlan":
        """Append manual-annotation layers for the given structures (only those in the plan)."""
        base = [l for l in self.layers if l.source != MANUAL_GT]
        planned = set(self.structure_ids)
        manual = [Layer(sid, MANUAL_GT) for sid in sorted(set(structure_ids)) if sid in planned]
        return AssemblyPlan(tuple(base + manual))

    def to_dict(self):
        return {"layers": [l.to_dict() for l in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "AssemblyPlan":
        try:
            return cls(tuple(Layer(int(l["structure_id"]), l["source"], l.get("mean_dice"),
                                   l.get("gt_fraction")) for l in d["layers"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"assembly plan: {exc}") from None

    @classmethod
    def load(cls, path) -> "AssemblyPlan":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


def _block_flavors(rankings, catalog, structures) -> dict[int, str]:
    """Serial structures share one flavor: the highest summed points over the block."""
    chosen = {}
    blocks: dict[str, list[int]] = {}
    for sid in structures:
        block = catalog[sid].block
        if block:
            blocks.setdefault(block, []).append(sid)
        else:
            chosen[sid] = rankings[sid].winner
    for members in blocks.values():
        totals = Counter()
        for sid in members:
            for f, p in rankings[sid].points.items():
                totals[f] += p
        flavor = min(PREFERENCE, key=lambda f: (-totals[f], PREFERENCE.index(f)))
        for sid in members:
            chosen[sid] = flavor
    return chosen


def build_plan(rankings: dict[int, RankingOutcome], catalog: StructureCatalog | None = None,
               gt_fractions: dict[int, float] | None = None, structures=None) -> AssemblyPlan:
    """
    Layer order: groups 1..9; inside a group ascending mean Dice of the chosen
    flavor, then ascending GT fraction, then structure id.
    """
    catalog = catalog or default_catalog()
    gt_fractions = gt_fractions or {}
    structures = sorted(rankings) if structures is None else sorted(catalog[s].id for s in structures)
    missing = [s for s in structures if s not in rankings]
    if missing:
        names = ", ".join(f"{catalog[s].name} ({s})" for s in missing[:5])
        raise IncompletePlan(f"no ranking for {len(missing)} structure(s): {names}")

    flavors = _block_flavors(rankings, catalog, structures)
    layers = []
    for sid in structures:
        means = rankings[sid].means.get("dice", {})
        if flavors[sid] not in means:
            raise IncompletePlan(f"no mean Dice for {catalog[sid].name} ({sid}) flavor {flavors[sid]}")
        layers.append(Layer(sid, flavors[sid], float(means[flavors[sid]]),
                            float(gt_fractions.get(sid, 0.0))))
    layers.sort(key=lambda l: (catalog[l.structure_id].group, l.mean_dice, l.gt_fraction, l.structure_id))
    return AssemblyPlan(tuple(layers))


def compute_gt_fractions(cases) -> dict[int, float]:
    """
    ``cases`` yields ``(gt_ids, present_ids)`` per training case: the structures
    manually annotated and the structures present at all. The fraction is
    annotated cases over cases containing the structure.
    """
    with_gt, present = Counter(), Counter()
    for gt_ids, present_ids in cases:
        for s in set(present_ids) | set(gt_ids):
            present[s] += 1
        for s in set(gt_ids):
            with_gt[s] += 1
    return {s: with_gt[s] / present[s] for s in sorted(present)}


def assemble(sources: dict[str, LabelGrid], gt: LabelGrid | None, plan: AssemblyPlan) -> LabelGrid:
    """Paint each layer's structure from its source grid over the running result."""
    grids = [g for g in sources.values()] + ([gt] if gt is not None else [])
    if not grids:
        raise MissingSource("no source grids supplied")
    ref = grids[0]
    for g in grids[1:]:
        check_same_geometry(ref, g)
    out = np.zeros(ref.dims, dtype=np.uint16)
    for layer in plan.layers:
        src = gt if layer.source == MANUAL_GT else sources.get(layer.source)
        if src is None:
            raise MissingSource(f"layer {layer.structure_id} needs source {layer.source}, which was not supplied")
        out[src.labels == layer.structure_id] = layer.structure_id
    return ref.with_data(out)


@dataclass(frozen=True)
class SamplingWeights:
    weights: dict

    def __getitem__(self, sid):
        return self.weights[sid]

    def as_array(self, ids) -> np.ndarray:
        return np.array([self.weights[i] for i in ids])


def sampling_weights(catalog) -> SamplingWeights:
    """Inverse-occurrence class weights normalized to sum to one.

    ``catalog`` is a StructureCatalog or a mapping of structure id to occurrence.
    """
    if isinstance(catalog, StructureCatalog):
        occ = {s.id: s.occurrence for s in catalog}
    else:
        occ = dict(catalog)
    zero = [s for s, o in occ.items() if o <= 0]
    if zero:
        raise DegenerateOccurrence(f"structure(s) {', '.join(map(str, sorted(zero)))} never occur")
    inv = {s: 1.0 / o for s, o in occ.items()}
    total = math.fsum(inv.values())
    return SamplingWeights({s: v / total for s, v in inv.items()})

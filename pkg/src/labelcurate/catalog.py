"""Registry of segmentation targets: ids, names, anatomical groups and dataset statistics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ParseError, UnknownStructure

__all__ = ["StructureCatalog", "StructureDef", "default_catalog", "load_catalog"]

CATALOG_COLUMNS = ("id", "name", "group", "occurrence", "median_volume", "aliases")
OPTIONAL_COLUMNS = ("side", "block")


@dataclass(frozen=True)
class StructureDef:
    id: int
    name: str
    group: int
    occurrence: int
    median_volume: float
    aliases: tuple[str, ...] = ()
    side: str = ""
    block: str = ""


@dataclass(frozen=True)
class StructureCatalog:
    structures: tuple[StructureDef, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)
    _by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_id, by_name = {}, {}
        for s in self.structures:
            if s.id in by_id:
                raise ParseError(f"duplicate structure id {s.id}")
            by_id[s.id] = s
            for key in (s.name, *s.aliases):
                by_name.setdefault(key.lower(), s)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_by_name", by_name)

    def __len__(self):
        return len(self.structures)

    def __iter__(self):
        return iter(self.structures)

    def __contains__(self, key):
        try:
            self[key]
        except UnknownStructure:
            return False
        return True

    def __getitem__(self, key) -> StructureDef:
        """Look up by integer id, or by name / alias (case-insensitive)."""
        if isinstance(key, str):
            s = self._by_name.get(key.lower())
        else:
            s = self._by_id.get(int(key))
        if s is None:
            raise UnknownStructure(f"structure {key!r} is not in the catalog")
        return s

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.structures]

    def group_members(self, group: int) -> list[StructureDef]:
        return [s for s in self.structures if s.group == group]

    def block_members(self, block: str) -> list[StructureDef]:
        return [s for s in self.structures if s.block == block]

    def subset(self, keys) -> "StructureCatalog":
        return StructureCatalog(tuple(self[k] for k in keys))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CATALOG_COLUMNS + OPTIONAL_COLUMNS)
        for s in self.structures:
            w.writerow([s.id, s.name, s.group, s.occurrence, _fmt_num(s.median_volume),
                        ";".join(s.aliases), s.side, s.block])
        return buf.getvalue()


def _fmt_num(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _parse_rows(text: str, source: str) -> StructureCatalog:
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in CATALOG_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ParseError(f"{source}: missing column(s) {', '.join(missing)}")
    out, seen = [], set()
    for line, row in enumerate(reader, start=2):
        def num(col, cast):
            try:
                return cast(row[col])
            except (TypeError, ValueError):
                raise ParseError(f"{source}:{line}: bad value {row[col]!r} in field '{col}'") from None

        sid = num("id", int)
        if sid in seen:
            raise ParseError(f"{source}:{line}: duplicate structure id {sid}")
        seen.add(sid)
        group = num("group", int)
        if not 1 <= group <= 9:
            raise ParseError(f"{source}:{line}: field 'group' must be in 1..9, got {group}")
        median = num("median_volume", float)
        if median <= 0:
            raise ParseError(f"{source}:{line}: field 'median_volume' must be positive")
        occurrence = num("occurrence", int)
        if occurrence < 0:
            raise ParseError(f"{source}:{line}: field 'occurrence' must be >= 0")
        name = (row["name"] or "").strip()
        if not name:
            raise ParseError(f"{source}:{line}: empty field 'name'")
        aliases = tuple(a for a in (row.get("aliases") or "").split(";") if a)
        out.append(StructureDef(sid, name, group, occurrence, median, aliases,
                                (row.get("side") or "").strip(), (row.get("block") or "").strip()))
    return StructureCatalog(tuple(out))


def load_catalog(path=None) -> StructureCatalog:
    """Read a catalog CSV. Without a path, the bundled 167-structure catalog is returned."""
    if path is None:
        text = resources.files("labelcurate").joinpath("data/catalog.csv").read_text("utf-8")
        return _parse_rows(text, "catalog.csv")
    path = Path(path)
    return _parse_rows(path.read_text("utf-8"), str(path))


_DEFAULT = None


def default_catalog() -> StructureCatalog:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_catalog()
    return _DEFAULT

"""
File formats: a NIfTI-1 subset for volumes, JSON run manifests with dataset
adapters, and CSV / JSON metric reports.

NIfTI notes: only single-file ``.nii`` (optionally gzip-wrapped) volumes with
datatype uint8, int16, uint16 or float32 are read. The qform is preferred
over the sform when both are set. ``scl_slope`` / ``scl_inter`` are applied
when the slope is nonzero and not the identity. The voxel-axis code is the
signed axis permutation nearest to the header rotation.
"""

from __future__ import annotations

import csv
import gzip
import io as _io
import itertools
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import StructureCatalog, load_catalog
from .errors import (
    AdapterError,
    CorruptFile,
    DuplicateCase,
    IoError,
    NotNifti,
    ParseError,
    UnknownStructure,
    UnsupportedDatatype,
)
from .volgrid import LabelGrid, ScalarGrid, axis_directions

__all__ = [
    "BUILTIN_ADAPTERS", "IDENTITY_ADAPTER", "DatasetAdapter", "EvalTarget", "Manifest",
    "ManifestEntry", "file_sha256", "load_adapter", "load_catalog", "load_manifest",
    "read_case_grid", "read_nifti", "read_report", "write_json", "write_nifti", "write_report",
]

# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

HEADER_SIZE = 348
VOX_OFFSET = 352
DATATYPES = {2: np.uint8, 4: np.int16, 512: np.uint16, 16: np.float32}
_CODES = {np.dtype(v): k for k, v in DATATYPES.items()}


def _orientation_from_rotation(rot: np.ndarray) -> str:
    """Closest signed axis permutation to a 3x3 direction matrix (columns = voxel axes)."""
    best = max(itertools.permutations(range(3)),
               key=lambda p: sum(abs(rot[p[j], j]) for j in range(3)))
    letters = ("RL", "AP", "SI")
    return "".join(letters[best[j]][0 if rot[best[j], j] >= 0 else 1] for j in range(3))


def _quat_to_rot(b, c, d, qfac):
    a = math.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    rot[:, 2] *= qfac
    return rot


def _rot_to_quat(rot: np.ndarray):
    """Quaternion (b, c, d) and qfac for a signed-permutation direction matrix."""
    rot = rot.copy()
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot[:, 2] *= -1
    trace = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2
        a = 0.25 * s
        b = (rot[2, 1] - rot[1, 2]) / s
        c = (rot[0, 2] - rot[2, 0]) / s
        d = (rot[1, 0] - rot[0, 1]) / s
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = math.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2
        a = (rot[2, 1] - rot[1, 2]) / s
        b = 0.25 * s
        c = (rot[0, 1] + rot[1, 0]) / s
        d = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] > rot[2, 2]:
        s = math.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2
        a = (rot[0, 2] - rot[2, 0]) / s
        b = (rot[0, 1] + rot[1, 0]) / s
        c = 0.25 * s
        d = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = math.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2
        a = (rot[1, 0] - rot[0, 1]) / s
        b = (rot[0, 2] + rot[2, 0]) / s
        c = (rot[1, 2] + rot[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return (b, c, d), qfac


def _endianness(raw: bytes) -> str:
    if len(raw) < HEADER_SIZE:
        raise NotNifti("file is shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        return "<"
    if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        return ">"
    raise NotNifti("sizeof_hdr is not 348")


def _load_bytes(path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise IoError(f"file not found: {path}") from None
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise CorruptFile(f"{path}: broken gzip stream ({exc})") from None
    return raw


def read_nifti(path, kind: str | None = None):
    """
    Read a NIfTI-1 volume.

    ``kind`` is ``"label"``, ``"scalar"`` or None. With None, unscaled
    uint8 / uint16 volumes become a :class:`LabelGrid` and everything else a
    :class:`ScalarGrid`.
    """
    raw = _load_bytes(path)
    e = _endianness(raw)
    if raw[344:348] not in (b"n+1\x00",):
        raise NotNifti(f"{path}: bad magic {raw[344:348]!r}")

    dim = struct.unpack_from(e + "8h", raw, 40)
    datatype = struct.unpack_from(e + "h", raw, 70)[0]
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(e + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(e + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(e + "2h", raw, 252)
    quat = struct.unpack_from(e + "6f", raw, 256)
    srow = np.array(struct.unpack_from(e + "12f", raw, 280), dtype=float).reshape(3, 4)

    if datatype not in DATATYPES:
        raise UnsupportedDatatype(datatype)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise CorruptFile(f"{path}: invalid dim[0] = {ndim}")
    shape = [max(1, dim[i]) if i <= ndim else 1 for i in range(1, 4)]
    if any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise CorruptFile(f"{path}: only 3D volumes are supported, dim = {dim[:ndim + 1]}")

    dtype = np.dtype(DATATYPES[datatype]).newbyteorder(e)
    count = shape[0] * shape[1] * shape[2]
    if vox_offset < VOX_OFFSET - 4 or len(raw) < vox_offset + count * dtype.itemsize:
        raise CorruptFile(f"{path}: truncated voxel payload")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))

    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    if qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        rot = _quat_to_rot(*quat[:3], qfac)
        origin = tuple(float(v) for v in quat[3:6])
    elif sform_code > 0:
        rot = srow[:, :3] / np.where(np.linalg.norm(srow[:, :3], axis=0) > 0,
                                     np.linalg.norm(srow[:, :3], axis=0), 1.0)
        origin = tuple(float(v) for v in srow[:, 3])
    else:
        rot, origin = np.eye(3), (0.0, 0.0, 0.0)
    orientation = _orientation_from_rotation(rot)

    scaled = slope != 0 and not (slope == 1 and inter == 0)
    if kind is None:
        kind = "label" if datatype in (2, 512) and not scaled else "scalar"
    if kind == "label":
        if scaled:
            raise CorruptFile(f"{path}: label volumes must not carry intensity scaling")
        if data.min(initial=0) < 0:
            raise CorruptFile(f"{path}: negative label values")
        return LabelGrid(data, spacing, orientation, origin)
    if kind != "scalar":
        raise ValueError(f"kind must be 'label', 'scalar' or None, got {kind!r}")
    if scaled:
        data = data.astype(np.float64) * slope + inter
    return ScalarGrid(data, spacing, orientation, origin)


def write_nifti(grid, path) -> None:
    """Write uint16 for label grids, float32 for scalar grids; gzip when the name ends in ``.gz``."""
    if isinstance(grid, LabelGrid):
        data = np.asarray(grid.data, dtype="<u2")
    elif isinstance(grid, ScalarGrid):
        data = np.asarray(grid.data, dtype="<f4")
    else:
        raise TypeError(f"cannot write {type(grid).__name__}")
    datatype = _CODES[np.dtype(data.dtype).newbyteorder("=")]
    bitpix = data.dtype.itemsize * 8

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38:39] = b"r"
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    rot = axis_directions(grid.orientation)
    (b, c, d), qfac = _rot_to_quat(rot)
    struct.pack_into("<8f", hdr, 76, qfac, *grid.spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # mm
    hdr[148:148 + 11] = b"labelcurate"
    struct.pack_into("<2h", hdr, 252, 1, 1)
    struct.pack_into("<6f", hdr, 256, b, c, d, *grid.origin)
    affine = rot * np.asarray(grid.spacing)[None, :]
    for i in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * i, *affine[i], grid.origin[i])
    hdr[344:348] = b"n+1\x00"

    payload = bytes(hdr) + data.tobytes(order="F")
    path = Path(path)
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    path.write_bytes(payload)


# ---------------------------------------------------------------------------
# dataset adapters
# ---------------------------------------------------------------------------

COMPOSITE_ID_BASE = 1000


@dataclass(frozen=True)
class EvalTarget:
    name: str
    id: int
    label_ids: tuple[int, ...]
    components: tuple = ()

    def reference_volume(self, column: str = "median_volume") -> float:
        return float(sum(getattr(s, column) for s in self.components))


@dataclass(frozen=True)
class DatasetAdapter:
    """
    How a dataset's annotation scheme maps onto catalog structures.

    ``merge_map`` entries are ``(source names, target name)``. A target that
    is not a catalog name is a composite whose reference volume is the sum of
    its sources. ``lesion_merge`` maps raw lesion label values to an organ name.
    """

    name: str
    merge_map: tuple[tuple[tuple[str, ...], str], ...] = ()
    exclusion_flags: frozenset = frozenset()
    sparse_slices: bool = False
    lesion_merge: tuple[tuple[int, str], ...] = ()
    structures: tuple[str, ...] = ()

    def validate(self, catalog: StructureCatalog) -> None:
        targets = set()
        for sources, target in self.merge_map:
            if not sources:
                raise AdapterError(f"adapter {self.name}: merge into {target!r} has no sources")
            for s in sources:
                if s not in catalog:
                    raise AdapterError(f"adapter {self.name}: unknown label {s!r}")
            targets.add(target.lower())
        for value, organ in self.lesion_merge:
            if organ not in catalog:
                raise AdapterError(f"adapter {self.name}: unknown lesion target {organ!r}")
        for s in self.structures:
            if s.lower() not in targets and s not in catalog:
                raise AdapterError(f"adapter {self.name}: unknown structure {s!r}")

    def apply_lesion_merge(self, labels: np.ndarray, catalog: StructureCatalog) -> np.ndarray:
        labels = np.array(labels, copy=True)
        for value, organ in self.lesion_merge:
            labels[labels == value] = catalog[organ].id
        return labels

    def _merge_targets(self, catalog):
        out = []
        for i, (sources, target) in enumerate(self.merge_map):
            src = tuple(catalog[s] for s in sources)
            if target in catalog:
                tdef = catalog[target]
                ids = tuple(sorted({tdef.id, *(s.id for s in src)}))
                out.append(EvalTarget(tdef.name, tdef.id, ids, (tdef,)))
            else:
                out.append(EvalTarget(target, COMPOSITE_ID_BASE + i,
                                      tuple(sorted(s.id for s in src)), src))
        return out

    def targets(self, catalog: StructureCatalog, present_ids=()) -> list[EvalTarget]:
        """Structures to evaluate for a case whose GT or prediction contains ``present_ids``."""
        merged = self._merge_targets(catalog)
        consumed = {i for t in merged for i in t.label_ids}
        if self.structures:
            by_name = {t.name.lower(): t for t in merged}
            out = []
            for s in self.structures:
                if s.lower() in by_name:
                    out.append(by_name[s.lower()])
                else:
                    d = catalog[s]
                    out.append(EvalTarget(d.name, d.id, (d.id,), (d,)))
        else:
            present = set(int(i) for i in present_ids)
            out = [t for t in merged if present & set(t.label_ids)]
            for i in sorted(present - consumed):
                try:
                    d = catalog[i]
                except UnknownStructure:
                    continue
                out.append(EvalTarget(d.name, d.id, (d.id,), (d,)))
        return sorted(out, key=lambda t: t.id)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "merge_map": [{"sources": list(s), "target": t} for s, t in self.merge_map],
            "exclusion_flags": sorted(self.exclusion_flags),
            "sparse_slices": self.sparse_slices,
            "lesion_merge": [{"label": v, "organ": o} for v, o in self.lesion_merge],
            "structures": list(self.structures),
        }

    @classmethod
    def from_dict(cls, d: dict, where: str = "adapter") -> "DatasetAdapter":
        try:
            return cls(
                name=str(d["name"]),
                merge_map=tuple((tuple(m["sources"]), str(m["target"])) for m in d.get("merge_map", ())),
                exclusion_flags=frozenset(d.get("exclusion_flags", ())),
                sparse_slices=bool(d.get("sparse_slices", False)),
                lesion_merge=tuple((int(m["label"]), str(m["organ"])) for m in d.get("lesion_merge", ())),
                structures=tuple(d.get("structures", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: malformed adapter ({exc!r})") from None


IDENTITY_ADAPTER = DatasetAdapter("identity")

BUILTIN_ADAPTERS = {
    a.name: a
    for a in (
        IDENTITY_ADAPTER,
        DatasetAdapter("kidneys", merge_map=((("kidney_l", "kidney_r"), "kidneys"),)),
        DatasetAdapter("lungs", merge_map=((
            ("lung_upper_lobe_l", "lung_lower_lobe_l", "lung_upper_lobe_r",
             "lung_middle_lobe_r", "lung_lower_lobe_r"), "lungs"),)),
        DatasetAdapter("sparse_slices", sparse_slices=True),
        DatasetAdapter("transitional_vertebrae", exclusion_flags=frozenset({"L6", "T13"})),
    )
}


def load_adapter(spec, known: dict | None = None) -> DatasetAdapter:
    """Resolve an adapter by name (manifest-declared or built-in) or from a JSON file path."""
    if isinstance(spec, DatasetAdapter):
        return spec
    known = {**BUILTIN_ADAPTERS, **(known or {})}
    if spec in known:
        return known[spec]
    path = Path(str(spec))
    if path.suffix == ".json" and path.exists():
        return DatasetAdapter.from_dict(json.loads(path.read_text("utf-8")), str(path))
    raise AdapterError(f"unknown adapter {spec!r}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image: str | None = None
    gt: str | None = None
    predictions: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    adapter: str = "identity"
    split: str = "train"
    flags: frozenset = frozenset()

    def path_for(self, key: str):
        if key in ("image", "gt"):
            return getattr(self, key)
        return self.predictions.get(key, self.extras.get(key))

    def to_dict(self) -> dict:
        d = {"case_id": self.case_id}
        if self.image is not None:
            d["image"] = self.image
        if self.gt is not None:
            d["gt"] = self.gt
        d["predictions"] = dict(sorted(self.predictions.items()))
        if self.extras:
            d["extras"] = dict(sorted(self.extras.items()))
        d["adapter"] = self.adapter
        d["split"] = self.split
        d["flags"] = sorted(self.flags)
        return d


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()
    adapters: dict = field(default_factory=dict)
    base_dir: str | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.case_id in seen:
                raise DuplicateCase(f"duplicate case_id {e.case_id!r}")
            seen.add(e.case_id)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def get(self, case_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise KeyError(case_id)

    def adapter(self, name: str) -> DatasetAdapter:
        return load_adapter(name, self.adapters)

    def resolve(self, rel):
        if rel is None:
            return None
        p = Path(rel)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def to_dict(self) -> dict:
        d = {"version": 1, "entries": [e.to_dict() for e in self.entries]}
        if self.adapters:
            d["adapters"] = {k: v.to_dict() for k, v in sorted(self.adapters.items())}
        return d

    def write(self, path) -> None:
        write_json(self.to_dict(), path)


def _req(d, key, where, types):
    if key not in d:
        raise ParseError(f"{where}: missing field '{key}'")
    if not isinstance(d[key], types):
        raise ParseError(f"{where}: field '{key}' has type {type(d[key]).__name__}")
    return d[key]


def _opt_path(d, key, where):
    v = d.get(key)
    if v is not None and not isinstance(v, str):
        raise ParseError(f"{where}: field '{key}' must be a path string")
    return v


def _path_map(d, key, where):
    m = d.get(key, {})
    if not isinstance(m, dict) or not all(isinstance(v, str) for v in m.values()):
        raise ParseError(f"{where}: field '{key}' must map names to path strings")
    return dict(m)


def parse_manifest(doc: dict, base_dir=None, source: str = "manifest") -> Manifest:
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be an object")
    adapters = {}
    for name, spec in (doc.get("adapters") or {}).items():
        adapters[name] = DatasetAdapter.from_dict({"name": name, **spec}, f"{source}: adapters.{name}")
    raw_entries = _req(doc, "entries", source, list)
    entries, seen = [], set()
    for i, d in enumerate(raw_entries):
        where = f"{source}: entries[{i}]"
        if not isinstance(d, dict):
            raise ParseError(f"{where}: must be an object")
        case_id = _req(d, "case_id", where, str)
        if case_id in seen:
            raise DuplicateCase(f"{where}: duplicate case_id {case_id!r}")
        seen.add(case_id)
        split = d.get("split", "train")
        if split not in ("train", "test"):
            raise ParseError(f"{where}: field 'split' must be 'train' or 'test', got {split!r}")
        adapter = d.get("adapter", "identity")
        if adapter not in adapters and adapter not in BUILTIN_ADAPTERS:
            raise ParseError(f"{where}: field 'adapter' names unknown adapter {adapter!r}")
        flags = d.get("flags", [])
        if not isinstance(flags, list) or not all(isinstance(f, str) for f in flags):
            raise ParseError(f"{where}: field 'flags' must be a list of strings")
        entries.append(ManifestEntry(
            case_id=case_id,
            image=_opt_path(d, "image", where),
            gt=_opt_path(d, "gt", where),
            predictions=_path_map(d, "predictions", where),
            extras=_path_map(d, "extras", where),
            adapter=adapter,
            split=split,
            flags=frozenset(flags),
        ))
    return Manifest(tuple(entries), adapters, None if base_dir is None else str(base_dir))


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise IoError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return parse_manifest(doc, path.parent, str(path))


def read_case_grid(entry: ManifestEntry, key: str, base_dir=None, kind: str | None = None):
    """Load the volume stored under ``key`` (image, gt, a prediction or an extra) for one case."""
    rel = entry.path_for(key)
    if rel is None:
        raise IoError(f"case {entry.case_id}: no '{key}' volume in manifest")
    p = Path(rel)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    if kind is None:
        kind = "scalar" if key == "image" else "label"
    try:
        return read_nifti(p, kind=kind)
    except IoError as exc:
        exc.args = (f"case {entry.case_id}: {exc}",)
        raise


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("case_id", "structure_id", "structure", "status", "dice", "nsd", "hd", "hd95",
                  "tpr", "error_volume", "flags")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(records, path, format: str = "csv", config: dict | None = None,
                 aggregate: dict | None = None) -> None:
    """Write one row per metric record; the JSON flavour also embeds the run config and tool version."""
    records = list(records)
    if format == "csv":
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in records:
            d = r.to_dict()
            d["flags"] = ";".join(r.flags)
            w.writerow([_cell(d[c]) for c in REPORT_COLUMNS])
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    elif format == "json":
        doc = {"tool": "labelcurate", "version": __version__, "config": config or {},
               "records": [r.to_dict() for r in records]}
        if aggregate is not None:
            doc["aggregate"] = aggregate
        write_json(doc, path)
    else:
        raise ValueError(f"unknown report format {format!r}")


def read_report(path):
    from .metrics import MetricRecord

    path = Path(path)
    text = path.read_text("utf-8")
    if path.suffix == ".json":
        return [MetricRecord.from_dict(d) for d in json.loads(text)["records"]]
    out = []
    for line, row in enumerate(csv.DictReader(_io.StringIO(text)), start=2):
        try:
            d = {c: row[c] for c in REPORT_COLUMNS}
            for c in ("dice", "nsd", "hd", "hd95", "tpr", "error_volume"):
                d[c] = float(d[c]) if d[c] != "" else None
            d["structure_id"] = int(d["structure_id"])
            d["flags"] = tuple(f for f in d["flags"].split(";") if f)
            out.append(MetricRecord(**d))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}:{line}: {exc}") from None
    return out


def file_sha256(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

"""
Command-line front end.

Each subcommand reads a manifest (or a score table), processes cases
independently, and writes into ``--out``: its primary outputs, an updated
``manifest.json`` where volumes changed, and ``run.json`` with the effective
config, tool version and SHA-256 hashes of every input. A failing case is
logged and skipped; the exit code is then 1. Usage errors exit with 2.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import AssemblyPlan, assemble, build_plan, compute_gt_fractions
from .catalog import default_catalog, load_catalog
from .errors import LabelCurateError
from .io import (
    Manifest, ManifestEntry, file_sha256, load_adapter, load_manifest, read_case_grid, write_json,
    write_nifti, write_report,
)
from .metrics import PenaltyPolicy, evaluate_dataset
from .postfix import HeadGateParams, RibJointParams, interpolate_sparse_slices, postprocess_labels
from .qc import MeanShapePrior, QCReport, fit_mean_shape_prior, qc_score, rank_and_exclude, reconstruct
from .rank import load_flavor_scores, rank_flavors, rankings_to_json, read_rankings
from .volgrid import reorient_to_ras, resample_isotropic

log = logging.getLogger("labelcurate")

FLAVOR_KEYS = ("GT", "Pseudo", "Shape")

DEFAULTS = {
    "standardize": {"target_spacing": 1.5},
    "evaluate": {"prediction_key": "final", "missed_fraction": 0.9, "exclude_fraction": 0.1,
                 "nsd_tolerance_mm": 3.0, "n_resamples": 10000},
    "qc": {"fraction": 0.10, "mode": "image", "prediction_key": "Pseudo", "percentile": 0.90},
    "rank": {},
    "assemble": {"manual_gt": True},
    "postfix": {"input_key": "assembled", "tubular_key": "tubular",
                "head": HeadGateParams().to_dict(), "ribs": RibJointParams().to_dict()},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _merge(base: dict, override: dict, where="config") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise UsageError(f"{where}: unknown key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def _config(args, command: str) -> dict:
    cfg = DEFAULTS[command]
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        # either a block per command or a flat block for this command
        block = doc.get(command, doc if not (doc.keys() & DEFAULTS.keys()) else {})
        cfg = _merge(cfg, block)
    return copy.deepcopy(cfg)


def _catalog(args):
    if args.catalog:
        return load_catalog(args.catalog)
    return default_catalog()


def _manifest(args) -> Manifest:
    if not args.manifest:
        raise UsageError("--manifest is required")
    if not Path(args.manifest).exists():
        raise UsageError(f"manifest not found: {args.manifest}")
    return load_manifest(args.manifest)


def _rel(path: Path, out: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), out.resolve())).as_posix()


def _rebase(manifest: Manifest, out: Path) -> list[ManifestEntry]:
    """Entries with every path rewritten relative to ``out``."""
    def fix(p):
        return None if p is None else _rel(manifest.resolve(p), out)

    entries = []
    for e in manifest.entries:
        entries.append(ManifestEntry(
            e.case_id, fix(e.image), fix(e.gt),
            {k: fix(v) for k, v in e.predictions.items()},
            {k: fix(v) for k, v in e.extras.items()},
            e.adapter, e.split, e.flags))
    return entries


def _write_manifest(entries, manifest: Manifest, out: Path):
    Manifest(tuple(sorted(entries, key=lambda e: e.case_id)), manifest.adapters).write(out / "manifest.json")


def _input_hashes(args, manifest: Manifest | None = None, extra: dict | None = None) -> dict:
    h = {}
    for key in ("manifest", "catalog", "config"):
        p = getattr(args, key, None)
        if p:
            h[key] = file_sha256(p)
    for key, p in (extra or {}).items():
        h[key] = file_sha256(p)
    if manifest is not None:
        vols = {}
        for e in manifest.entries:
            paths = {"image": e.image, "gt": e.gt, **e.predictions, **e.extras}
            case = {}
            for k, p in sorted(paths.items()):
                if p is None:
                    continue
                full = manifest.resolve(p)
                case[k] = file_sha256(full) if Path(full).exists() else None
            vols[e.case_id] = case
        h["volumes"] = vols
    return h


def _write_run(out: Path, command: str, args, cfg: dict, inputs: dict, failures: dict, extra=None):
    doc = {"tool": "labelcurate", "version": __version__, "command": command,
           "config": cfg, "seed": args.seed, "inputs": inputs,
           "failed_cases": dict(sorted(failures.items()))}
    if extra:
        doc.update(extra)
    write_json(doc, out / "run.json")


def _map_cases(fn, jobs, workers: int):
    """Run ``fn`` on each job; returns results in job order. Exceptions become ``(None, message)``."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_guard, [(fn, j) for j in jobs]))
    return [_guard((fn, j)) for j in jobs]


def _guard(arg):
    fn, job = arg
    try:
        return fn(*job), None
    except Exception as exc:  # per-case isolation
        return None, f"{type(exc).__name__}: {exc}"


def _collect(entries, results):
    ok, failures = [], {}
    for e, (res, err) in zip(entries, results):
        if err is not None:
            log.error("case %s failed: %s", e.case_id, err)
            failures[e.case_id] = err
        else:
            ok.append(res)
    return ok, failures


# ---------------------------------------------------------------------------
# standardize
# ---------------------------------------------------------------------------

def _standardize_case(entry: ManifestEntry, base_dir, out: str, spacing: float):
    out = Path(out)
    case_dir = out / "volumes" / entry.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    keys = {"image": entry.image, "gt": entry.gt, **entry.predictions, **entry.extras}
    new = {}
    for key, rel in sorted(keys.items()):
        if rel is None:
            continue
        grid = read_case_grid(entry, key, base_dir)
        mode = "trilinear" if key == "image" else "nearest"
        grid = resample_isotropic(reorient_to_ras(grid), spacing, mode)
        target = case_dir / f"{key}.nii.gz"
        write_nifti(grid, target)
        new[key] = _rel(target, out)
    return ManifestEntry(entry.case_id, new.get("image"), new.get("gt"),
                         {k: new[k] for k in entry.predictions}, {k: new[k] for k in entry.extras},
                         entry.adapter, entry.split, entry.flags)


def cmd_standardize(args) -> int:
    cfg = _config(args, "standardize")
    manifest = _manifest(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = sorted(manifest.entries, key=lambda e: e.case_id)
    jobs = [(e, manifest.base_dir, str(out), float(cfg["target_spacing"])) for e in entries]
    ok, failures = _collect(entries, _map_cases(_standardize_case, jobs, args.workers))
    _write_manifest(ok, manifest, out)
    _write_run(out, "standardize", args, cfg, _input_hashes(args, manifest), failures)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    cfg = _config(args, "evaluate")
    manifest = _manifest(args)
    catalog = _catalog(args)
    adapter = load_adapter(args.adapter, manifest.adapters) if args.adapter else None
    policy = PenaltyPolicy(cfg["missed_fraction"], cfg["exclude_fraction"], cfg["nsd_tolerance_mm"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = [e for e in manifest.entries if e.gt and e.path_for(cfg["prediction_key"])]
    sub = Manifest(tuple(entries), manifest.adapters, manifest.base_dir)
    records, aggregate = evaluate_dataset(sub, adapter, policy, catalog, cfg["prediction_key"],
                                          workers=args.workers, seed=args.seed,
                                          n_resamples=int(cfg["n_resamples"]), isolate=True)
    failures = aggregate.pop("failed_cases")
    fmt = args.format or "csv"
    write_report(records, out / f"report.{fmt}", fmt, cfg, aggregate if fmt == "json" else None)
    write_json(aggregate, out / "aggregate.json")
    _write_run(out, "evaluate", args, cfg, _input_hashes(args, manifest), failures,
               {"adapter": args.adapter or "per-entry"})
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# qc
# ---------------------------------------------------------------------------

def _qc_case(entry, base_dir, key, priors, q):
    pseudo = read_case_grid(entry, key, base_dir)
    rows = []
    for sid, prior in sorted(priors.items()):
        mask = pseudo.labels == sid
        rows.append((entry.case_id, sid, qc_score(mask, reconstruct(prior, mask), pseudo.spacing, q)))
    return rows


def _fit_priors(manifest, structures, failures):
    masks = {sid: [] for sid in structures}
    for e in sorted(manifest.entries, key=lambda e: e.case_id):
        if e.split != "train" or not e.gt:
            continue
        try:
            gt = read_case_grid(e, "gt", manifest.base_dir)
        except Exception as exc:
            failures[e.case_id] = f"{type(exc).__name__}: {exc}"
            continue
        for sid in structures:
            m = gt.labels == sid
            if m.any():
                masks[sid].append(m)
    return {sid: fit_mean_shape_prior(ms, sid) for sid, ms in masks.items() if ms}


def cmd_qc(args) -> int:
    cfg = _config(args, "qc")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures: dict = {}
    extra_inputs = {}

    if args.scores:
        # precomputed (case_id, structure_id, score_mm) rows
        extra_inputs["scores"] = args.scores
        report = QCReport.read_csv(args.scores)
        scores = [(e.case_id, e.structure_id, e.score) for e in report.entries]
        manifest = None
    else:
        manifest = _manifest(args)
        catalog = _catalog(args)
        if args.prior:
            priors = {}
            for p in sorted(Path(args.prior).glob("*.npz")):
                prior = MeanShapePrior.load(p)
                priors[prior.structure_id] = prior
                extra_inputs[f"prior:{p.name}"] = p
        else:
            priors = _fit_priors(manifest, [s.id for s in catalog], failures)
            prior_dir = out / "priors"
            prior_dir.mkdir(exist_ok=True)
            for sid, prior in sorted(priors.items()):
                prior.save(prior_dir / f"prior_{sid:03d}.npz")
        entries = [e for e in sorted(manifest.entries, key=lambda e: e.case_id)
                   if e.path_for(cfg["prediction_key"])]
        jobs = [(e, manifest.base_dir, cfg["prediction_key"], priors, cfg["percentile"]) for e in entries]
        ok, fails = _collect(entries, _map_cases(_qc_case, jobs, args.workers))
        failures.update(fails)
        scores = [row for rows in ok for row in rows]

    if not scores:
        raise UsageError("no QC scores to rank")
    report = rank_and_exclude(scores, cfg["fraction"], cfg["mode"])
    report.write_csv(out / "qc.csv")
    if manifest is not None:
        excluded = set(report.excluded_cases()) if cfg["mode"] == "image" else set()
        entries = [ManifestEntry(e.case_id, e.image, e.gt, e.predictions, e.extras, e.adapter, e.split,
                                 e.flags | ({"qc_excluded"} if e.case_id in excluded else set()))
                   for e in _rebase(manifest, out)]
        _write_manifest(entries, manifest, out)
    _write_run(out, "qc", args, cfg, _input_hashes(args, manifest, extra_inputs), failures,
               {"prior": "file" if args.prior else "baseline"})
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# rank
# ---------------------------------------------------------------------------

def cmd_rank(args) -> int:
    cfg = _config(args, "rank")
    if not args.scores:
        raise UsageError("--scores is required")
    scores = load_flavor_scores(args.scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outcomes, failures = [], {}
    for sid, s in scores.items():
        try:
            outcomes.append(rank_flavors(s))
        except LabelCurateError as exc:
            log.error("structure %s: %s", sid, exc)
            failures[str(sid)] = f"{type(exc).__name__}: {exc}"
    (out / "rankings.json").write_text(rankings_to_json(outcomes, cfg), encoding="utf-8")
    _write_run(out, "rank", args, cfg, _input_hashes(args, None, {"scores": args.scores}), failures)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# assemble
# ---------------------------------------------------------------------------

def _present(entry, base_dir):
    gt_ids = set()
    if entry.gt:
        gt_ids = set(read_case_grid(entry, "gt", base_dir).present_labels())
    present = set(gt_ids)
    for k in FLAVOR_KEYS:
        if entry.path_for(k):
            present |= set(read_case_grid(entry, k, base_dir).present_labels())
    return gt_ids, present


def _assemble_case(entry, base_dir, out, plan: AssemblyPlan, manual: bool):
    out = Path(out)
    sources = {k: read_case_grid(entry, k, base_dir) for k in FLAVOR_KEYS if entry.path_for(k)}
    gt = read_case_grid(entry, "gt", base_dir) if entry.gt else None
    case_plan = plan
    if manual and gt is not None and entry.split == "train":
        case_plan = plan.with_manual_gt(gt.present_labels())
    result = assemble(sources, gt, case_plan)
    target = out / "volumes" / entry.case_id / "assembled.nii.gz"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_nifti(result, target)
    return _rel(target, out)


def cmd_assemble(args) -> int:
    cfg = _config(args, "assemble")
    manifest = _manifest(args)
    catalog = _catalog(args)
    if not args.rankings:
        raise UsageError("--rankings is required")
    rankings = read_rankings(args.rankings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    failures = {}
    train = []
    for e in sorted(manifest.entries, key=lambda e: e.case_id):
        if e.split != "train":
            continue
        try:
            train.append(_present(e, manifest.base_dir))
        except Exception as exc:
            failures[e.case_id] = f"{type(exc).__name__}: {exc}"
    structures = [sid for sid in sorted(rankings) if sid in catalog]
    plan = build_plan(rankings, catalog, compute_gt_fractions(train), structures)
    (out / "plan.json").write_text(plan.to_json(), encoding="utf-8")

    entries = sorted(manifest.entries, key=lambda e: e.case_id)
    jobs = [(e, manifest.base_dir, str(out), plan, bool(cfg["manual_gt"])) for e in entries]
    results = _map_cases(_assemble_case, jobs, args.workers)
    new_entries = []
    for e, rebased, (res, err) in zip(entries, sorted(_rebase(manifest, out), key=lambda e: e.case_id), results):
        if err is not None:
            log.error("case %s failed: %s", e.case_id, err)
            failures[e.case_id] = err
            new_entries.append(rebased)
            continue
        preds = dict(rebased.predictions)
        preds["assembled"] = res
        new_entries.append(ManifestEntry(rebased.case_id, rebased.image, rebased.gt, preds, rebased.extras,
                                         rebased.adapter, rebased.split, rebased.flags))
    _write_manifest(new_entries, manifest, out)
    _write_run(out, "assemble", args, cfg,
               _input_hashes(args, manifest, {"rankings": args.rankings}), failures)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# postfix
# ---------------------------------------------------------------------------

def _postfix_case(entry, base_dir, out, cfg, catalog, sparse):
    out = Path(out)
    labels = read_case_grid(entry, cfg["input_key"], base_dir)
    tubular = None
    if entry.path_for(cfg["tubular_key"]):
        tubular = read_case_grid(entry, cfg["tubular_key"], base_dir).labels != 0
    head = HeadGateParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["head"].items()})
    ribs = RibJointParams(**cfg["ribs"])
    refined, info = postprocess_labels(labels, catalog, tubular, head, ribs)
    case_dir = out / "volumes" / entry.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(refined, case_dir / "final.nii.gz")
    paths = {"final": _rel(case_dir / "final.nii.gz", out)}
    if sparse and entry.gt:
        gt = read_case_grid(entry, "gt", base_dir)
        annotated = [int(i) for i in np.flatnonzero(np.any(gt.labels != 0, axis=(0, 1)))]
        if len(annotated) >= 2:
            write_nifti(interpolate_sparse_slices(gt, 2, annotated), case_dir / "gt_dense.nii.gz")
            paths["gt_dense"] = _rel(case_dir / "gt_dense.nii.gz", out)
            info["interpolated_slices"] = len(annotated)
    return paths, info


def cmd_postfix(args) -> int:
    cfg = _config(args, "postfix")
    manifest = _manifest(args)
    catalog = _catalog(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = sorted(manifest.entries, key=lambda e: e.case_id)
    jobs = [(e, manifest.base_dir, str(out), cfg, catalog, manifest.adapter(e.adapter).sparse_slices)
            for e in entries]
    results = _map_cases(_postfix_case, jobs, args.workers)
    failures, logs, new_entries = {}, {}, []
    for e, rebased, (res, err) in zip(entries, sorted(_rebase(manifest, out), key=lambda e: e.case_id), results):
        if err is not None:
            log.error("case %s failed: %s", e.case_id, err)
            failures[e.case_id] = err
            new_entries.append(rebased)
            continue
        paths, info = res
        logs[e.case_id] = info
        preds = {**rebased.predictions, "final": paths["final"]}
        extras = dict(rebased.extras)
        if "gt_dense" in paths:
            extras["gt_dense"] = paths["gt_dense"]
        new_entries.append(ManifestEntry(rebased.case_id, rebased.image, rebased.gt, preds, extras,
                                         rebased.adapter, rebased.split, rebased.flags))
    _write_manifest(new_entries, manifest, out)
    write_json(logs, out / "postfix_log.json")
    _write_run(out, "postfix", args, cfg, _input_hashes(args, manifest), failures)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

def cmd_phantoms(args) -> int:
    from .phantoms import make_corpus

    make_corpus(args.out, n_cases=args.cases, seed=args.seed, predictions_equal_gt=args.equal_gt)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="run manifest (JSON)")
    common.add_argument("--catalog", help="structure catalog CSV (default: bundled)")
    common.add_argument("--workers", type=int, default=1, help="parallel case workers")
    common.add_argument("--seed", type=int, default=0, help="seed for resampling statistics")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="JSON file with parameter overrides")
    common.add_argument("--format", choices=("csv", "json"), help="report format")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="labelcurate", description=__doc__.strip().splitlines()[0])
    p.add_argument("--version", action="version", version=f"labelcurate {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("standardize", parents=[common], help="reorient to RAS and resample to 1.5 mm")
    ev = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    ev.add_argument("--adapter", help="dataset adapter name or JSON file (default: per manifest entry)")
    qc = sub.add_parser("qc", parents=[common], help="rank pseudo-labels by shape plausibility")
    qc.add_argument("--prior", help="directory of saved shape priors (default: fit from training GT)")
    qc.add_argument("--scores", help="precomputed QC scores CSV instead of volumes")
    rk = sub.add_parser("rank", parents=[common], help="pick the best flavor per structure")
    rk.add_argument("--scores", help="flavor score table CSV")
    asm = sub.add_parser("assemble", parents=[common], help="merge pseudo-labels into final label volumes")
    asm.add_argument("--rankings", help="rankings JSON written by 'rank'")
    sub.add_parser("postfix", parents=[common], help="head gating, rib repair, sparse-slice interpolation")
    ph = sub.add_parser("phantoms", parents=[common], help="write the synthetic demo corpus")
    ph.add_argument("--cases", type=int, default=5, choices=range(1, 6), metavar="N")
    ph.add_argument("--equal-gt", action="store_true", help="add a 'final' prediction equal to GT")
    return p


COMMANDS = {
    "standardize": cmd_standardize, "evaluate": cmd_evaluate, "qc": cmd_qc, "rank": cmd_rank,
    "assemble": cmd_assemble, "postfix": cmd_postfix, "phantoms": cmd_phantoms,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"labelcurate {args.command}: {exc}", file=sys.stderr)
        return 2
    except LabelCurateError as exc:
        print(f"labelcurate {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

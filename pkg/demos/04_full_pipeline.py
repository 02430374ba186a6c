"""
The whole curation pipeline on the bundled synthetic corpus, driven
through the command-line entry point:

    standardize -> qc -> rank -> assemble -> postfix -> evaluate

Run: python3 demos/04_full_pipeline.py [output_dir]
"""

import json
import sys
import tempfile
from pathlib import Path

from labelcurate.cli import main
from labelcurate.phantoms import make_corpus

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="labelcurate_demo_"))
corpus, run = root / "corpus", root / "run"
make_corpus(corpus, n_cases=5)
print(f"corpus written to {corpus}")

cat = ["--catalog", str(corpus / "catalog.csv")]
steps = [
    ["standardize", "--manifest", str(corpus / "manifest.json"), "--out", str(run / "std"), *cat],
    ["qc", "--manifest", str(run / "std" / "manifest.json"), "--out", str(run / "qc"), *cat],
    ["rank", "--scores", str(corpus / "scores.csv"), "--out", str(run / "rank")],
    ["assemble", "--manifest", str(run / "qc" / "manifest.json"), "--rankings", str(run / "rank" / "rankings.json"),
     "--out", str(run / "asm"), *cat],
    ["postfix", "--manifest", str(run / "asm" / "manifest.json"), "--out", str(run / "post"), *cat],
    ["evaluate", "--manifest", str(run / "post" / "manifest.json"), "--out", str(run / "eval"), "--format", "json", *cat],
]
for argv in steps:
    rc = main(argv)
    print(f"labelcurate {argv[0]:<11} exit {rc}")
    if rc:
        sys.exit(rc)

print("\nqc scores (highest distance is excluded):")
print((run / "qc" / "qc.csv").read_text())

rankings = json.loads((run / "rank" / "rankings.json").read_text())["rankings"]
print("chosen flavor per structure:")
for r in rankings:
    print(f"  {r['structure_id']:>4}  {' > '.join(r['order'])}{'  (HD95 stage)' if r['used_secondary'] else ''}")

print("\npostfix log:")
for case, entry in sorted(json.loads((run / "post" / "postfix_log.json").read_text()).items()):
    print(f"  {case}: {entry}")

agg = json.loads((run / "eval" / "aggregate.json").read_text())["structures"]
print("\nper-structure Dice of the final labels:")
for row in sorted(agg.values(), key=lambda r: r["structure_id"]):
    d = row["dice"]
    if d is not None:
        print(f"  {row['structure']:<18} mean {d['mean']:.3f}  95% CI [{d['ci95'][0]:.3f}, {d['ci95'][1]:.3f}]"
              f"  (n={row['n']}, penalized {row['n_penalized']}, excluded {row['n_excluded']})")

"""Search on a task whose labels need exactly +-2 frames of context.

Each label is 1 when the +-1 bits in a 5-frame window sum to a positive
value.  Among the candidates TDNN-1-1, TDNN-1-2, TDNN-2-1 and TDNN-2-2 only
TDNN-2-1 sees all five offsets, so a working search should settle on it.
"""
import sys
import tempfile

from stnas.config import planted_context_config
from stnas.pipeline import Workspace, run_pipeline
from stnas.tasks import context_ceiling

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
print("best accuracy seeing offsets -1..1 only:", round(context_ceiling([-1, 0, 1], 2, 24), 4))
print("best accuracy seeing offsets -2, 0, 2:   ", round(context_ceiling([-2, 0, 2], 2, 24), 4))

with tempfile.TemporaryDirectory() as out:
    summary = run_pipeline(planted_context_config(seed), out)
    records = Workspace(out).read_records()
    print(open(f"{out}/architecture.txt").read(), end="")

labels = ["TDNN-1-1", "TDNN-1-2", "TDNN-2-1", "TDNN-2-2"]
print("\nsearch epoch  " + "  ".join(f"{s:>8}" for s in labels))
for r in records:
    if r["stage"] == "search":
        print(f"{r['epoch']:>12}  " + "  ".join(f"{p:8.4f}" for p in r["pi"][0]))
print("\nwarm-up epochs:", sum(r["stage"] == "warmup" for r in records),
      " retrain epochs:", summary["retrain_epochs"])
print("retrained test accuracy:", round(summary["test"]["accuracy"], 4))

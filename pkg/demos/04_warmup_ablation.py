"""Zero warm-up (A) versus converged warm-up (B) before the search.

Both arms use the same seed, so a difference in the retraining curves comes
only from the architecture each search derived.
"""
import sys

from stnas.config import planted_context_config
from stnas.pipeline import ablation_text, warmup_ablation

n = int(sys.argv[1]) if len(sys.argv) > 1 else 5
report = warmup_ablation(planted_context_config(0), seeds=range(n))
print(ablation_text(report), end="")

"""
Comparing the image-stream modes
================================

Random three-subject layouts are generated under each mode and scored by how
well the localized color blobs match their boxes.  Pass the number of cases
on the command line (default 10; the acceptance run uses 50).
"""

import sys

from layoutfuse.ablation import run_ablation
from layoutfuse.diffusion import train_toy

cases = int(sys.argv[1]) if len(sys.argv) > 1 else 10
assets = train_toy(seed=0)
result = run_ablation(assets, cases=cases)

for key, value in result.summary().items():
    print(f"{key:<28} {value:.3f}")

# Most random layouts overlap; the per-case scores show where each mode wins.
for k, layout in enumerate(result.layouts[:5]):
    print(k, [name for name, _, _ in layout], {m: round(result.scores[m][k], 2) for m in result.scores})

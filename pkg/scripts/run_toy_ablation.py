#!/usr/bin/env python3
"""Run the full toy ablation grid (baseline / transform / deep-supervision
variants / post-processing / k-reciprocal / ncut-loss comparator) on
synthetic intertwined spirals and write report.json + table.tsv.

Any extra arguments are forwarded to `sftlab experiment`, e.g.
    python scripts/run_toy_ablation.py --seeds 1,2,3
"""

import sys

from sftlab.cli import main

if __name__ == "__main__":
    extra = sys.argv[1:]
    out = ["--out-dir", "out/ablation"] if "--out-dir" not in extra else []
    sys.exit(main(["experiment", "--mode", "ablation", *out, *extra]))

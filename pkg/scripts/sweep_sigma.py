#!/usr/bin/env python3
"""Temperature sensitivity: train the shared-supervision variant at each
sigma in the sweep and report median retrieval quality per value."""

import sys

from sftlab.cli import main

if __name__ == "__main__":
    extra = sys.argv[1:]
    out = ["--out-dir", "out/sigma_sweep"] if "--out-dir" not in extra else []
    sys.exit(main(["experiment", "--mode", "sigma_sweep", *out, *extra]))

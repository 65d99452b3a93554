#!/usr/bin/env python3
"""Batch-composition sensitivity: vary the number of samples per identity
in each training batch and compare baseline vs transform-trained models."""

import sys

from sftlab.cli import main

if __name__ == "__main__":
    extra = sys.argv[1:]
    out = ["--out-dir", "out/k_sweep"] if "--out-dir" not in extra else []
    sys.exit(main(["experiment", "--mode", "k_sweep", *out, *extra]))

#!/usr/bin/env python3
"""Full desk-preset training run (J=16, 128-wide, 4 layers, 100 epochs).
Expect on the order of an hour on CPU; pass extra CLI flags through, e.g.
`scripts/train_desk.py --epochs 20`."""
import sys

from skelflow.cli import main

if __name__ == "__main__":
    sys.exit(main(["train", "--out-dir", "runs/desk"] + sys.argv[1:]))

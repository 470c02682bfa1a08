#!/usr/bin/env python3
"""Finite-difference audit of the full model gradient at the small
reference size (4 joints, 48 wide, 2 layers, 8 frames)."""
import sys

from skelflow.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck"] + sys.argv[1:]))

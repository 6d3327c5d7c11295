#!/usr/bin/env python3
"""
Main runner for the PointGCN command line.

    python run.py synth --out data/synth.pgc
    python run.py train --train data/train.pgc --test data/test.pgc
"""

import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / "src"))

from pointgcn.cli import main  # noqa: E402


if __name__ == "__main__":
    sys.exit(main())

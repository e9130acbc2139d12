#!/usr/bin/env python3
"""
Variational Imaging Prior - command-line launcher
Run `python run_experiment.py run --config configs/denoise.json` for a full experiment.
"""

import sys

from src.backend.cli import main

if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Latent FxLMS - active noise control simulation

Quick start:
    # Desk-scale acceptance run (builds dataset, models and step sizes if missing)
    python run_lfxlms.py run --config acceptance.json

    # Individual stages
    python run_lfxlms.py gen-dataset --config acceptance.json
    python run_lfxlms.py train --config acceptance.json --variant infovae --mixup on
    python run_lfxlms.py tune-step --config acceptance.json
    python run_lfxlms.py report --config acceptance.json
"""

import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from lfxlms.cli import main


if __name__ == "__main__":
    sys.exit(main())

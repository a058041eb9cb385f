#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Entry Point
Loads .env defaults (GATED_DIT_OUTPUT_DIR, GATED_DIT_LOG_LEVEL) and runs the CLI.

    python3 gated_dit_cli.py train --steps 2000 --output-dir runs/edge_ours
    python3 gated_dit_cli.py compare --variants Ours "w/o gating" --seeds 0 1 2
"""
import sys

from dotenv import load_dotenv

# Load environment variables explicitly
load_dotenv()

from gated_dit.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Desk Reproduction
Runs every experiment in sequence: bench -> overhead -> compare -> ablate.

    python3 -m gated_dit.scripts.run_all --output-dir runs/desk --steps 2000
"""
import argparse
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from gated_dit.cli import main as cli_main


def build_steps(output_dir: str, steps: int, seeds: List[str], jobs: int) -> List[tuple]:
    common = ["--steps", str(steps), "--jobs", str(jobs), "--quiet"]
    return [
        ("Attention scaling bench",
         ["bench", "--sizes", "256", "512", "1024", "--scenes", "2000",
          "--output-dir", os.path.join(output_dir, "bench")]),
        ("Parameter overhead",
         ["overhead", "--output-dir", os.path.join(output_dir, "overhead")]),
        ("Convergence: gate vs no gate",
         ["compare", "--variants", "Ours", "w/o gating", "--seeds", *seeds,
          "--output-dir", os.path.join(output_dir, "compare"), *common]),
        ("Ablation grid",
         ["ablate", "--seeds", *seeds, "--output-dir", os.path.join(output_dir, "ablate"), *common]),
    ]


def main(argv: Optional[List[str]] = None) -> int:
    """Run the full desk reproduction, stopping at the first failed step"""
    load_dotenv()
    parser = argparse.ArgumentParser(description="Run the desk-scale reproduction end to end")
    parser.add_argument("--output-dir", default=os.environ.get("GATED_DIT_OUTPUT_DIR", "runs/desk"))
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seeds", nargs="+", default=["0", "1", "2"])
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)

    plan = build_steps(args.output_dir, args.steps, args.seeds, args.jobs)
    print("=" * 60)
    print("🚀 Gated DiT desk reproduction")
    print("=" * 60)

    for i, (title, command) in enumerate(plan, 1):
        print(f"[ {i}/{len(plan)} ] {title}")
        print("-" * 60)
        code = cli_main(command)
        if code != 0:
            print(f"❌ {title} failed (exit {code})")
            return code
        print()

    print("=" * 60)
    print("✅ All experiments completed")
    print("=" * 60)
    print(f"📁 Results under {args.output_dir}/: bench, overhead, compare, ablate")
    return 0


if __name__ == "__main__":
    sys.exit(main())

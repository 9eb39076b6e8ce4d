#!/usr/bin/env python3
"""
Ground-failure updating - full pipeline
Runs simulate, infer, evaluate and export against one run configuration
"""

import argparse
import os
import subprocess
import sys
import time
from datetime import datetime

STAGES = [
    ("simulate", "Synthetic event from the generative model"),
    ("infer", "Variational EM on the damage proxy map"),
    ("evaluate", "Prior vs posterior metrics"),
    ("export", "Heatmaps and summary statistics"),
]


def run_stage(command, stage_num, description, config, extra_args):
    """Run one CLI command in a subprocess and report its outcome"""
    print(f"\n{'='*50}")
    print(f"Stage {stage_num}: {description}")
    print(f"{'='*50}")

    start_time = time.time()
    result = subprocess.run(
        [sys.executable, "-m", "groundfail_svi", command, "--config", config, *extra_args],
        capture_output=True, text=True, encoding="utf-8",
    )
    duration = time.time() - start_time

    if result.returncode == 0:
        print(f"✅ Stage {stage_num} completed successfully in {duration:.1f}s")
        if result.stderr:
            print(result.stderr)
        return True
    print(f"❌ Stage {stage_num} failed with exit code {result.returncode}")
    print(f"Error: {result.stderr}")
    return False


def main():
    parser = argparse.ArgumentParser(description="Run every pipeline stage in order")
    parser.add_argument("--config", required=True, help="path to the JSON run configuration")
    parser.add_argument("--seed", type=int, help="random seed passed to every stage")
    parser.add_argument("--skip-simulate", action="store_true", help="use an existing dpm raster")
    args = parser.parse_args()

    if not os.path.exists(args.config):
        print(f"⚠️ Configuration not found: {args.config}")
        return 2

    print("GROUND-FAILURE BAYESIAN UPDATING PIPELINE")
    print("=" * 60)
    print(f"Started at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    extra_args = ["--seed", str(args.seed)] if args.seed is not None else []
    stages = [s for s in STAGES if not (args.skip_simulate and s[0] == "simulate")]

    results = []
    total_start = time.time()
    for stage_num, (command, description) in enumerate(stages, start=1):
        success = run_stage(command, stage_num, description, args.config, extra_args)
        results.append((stage_num, description, success))
        if not success:
            break

    total_duration = time.time() - total_start
    print(f"\n{'='*60}")
    print("PIPELINE EXECUTION SUMMARY")
    print(f"{'='*60}")
    for stage_num, description, success in results:
        status = "✅ SUCCESS" if success else "❌ FAILED"
        print(f"Stage {stage_num}: {description:<45} {status}")

    successful = sum(1 for _, _, success in results if success)
    print(f"\nOverall: {successful}/{len(stages)} stages completed")
    print(f"Total execution time: {total_duration:.1f} seconds")
    print(f"Finished at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    return 0 if successful == len(stages) else 1


if __name__ == "__main__":
    sys.exit(main())

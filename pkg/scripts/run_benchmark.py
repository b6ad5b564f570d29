"""Run the seeded synthetic benchmark end to end and print the result tables.

    python3 scripts/run_benchmark.py [--config configs/synth.json] [--out runs/synth]
"""

import argparse
import logging
import time

from dynamite.config import validate_config
from dynamite.pipeline import render_report, run_all


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/synth.json")
    ap.add_argument("--out", default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    config = validate_config(args.config)
    t0 = time.perf_counter()
    run_all(config, args.out, args.threads)
    print(render_report(args.out or config.output_dir))
    print(f"wall clock: {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()

"""Run every stage and analysis into one directory and print the summary.

    python3 scripts/run_pipeline.py --config configs/default.json --out runs/default
"""

import argparse
import json
import logging
import time

from loralens.config import RunConfig
from loralens.pipeline import ANALYSES, run_all


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="RunConfig JSON; defaults when omitted")
    p.add_argument("--out", default="runs/default")
    p.add_argument("--analyses", nargs="*", default=list(ANALYSES), choices=ANALYSES)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    t0 = time.time()
    summary = run_all(cfg, args.out, analyses=tuple(args.analyses))
    print(json.dumps(summary, indent=2))
    print(f"finished in {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()

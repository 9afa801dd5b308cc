"""Regenerate every recipe's CSV from scratch (policy tables are solved on demand).

    python scripts/reproduce_figures.py --out results --horizon 100000
    python scripts/reproduce_figures.py --recipes fig5 fig9_buffer --jobs 2
"""

import argparse
import sys
import time
from pathlib import Path

from aoisched.cli import RECIPES, main


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--recipes", nargs="+", default=list(RECIPES), choices=RECIPES)
    ap.add_argument("--out", default="results")
    ap.add_argument("--artifacts", default="artifacts")
    ap.add_argument("--horizon", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    return ap.parse_args()


def main_script() -> int:
    args = parse_args()
    out = Path(args.out)
    status = 0
    for recipe in args.recipes:
        argv = ["run", "--recipe", recipe, "--out", str(out / f"{recipe}.csv"),
                "--artifacts", args.artifacts, "--seed", str(args.seed), "--jobs", str(args.jobs),
                "--solve-missing"]
        if args.horizon is not None:
            argv += ["--horizon", str(args.horizon)]
        t0 = time.perf_counter()
        code = main(argv)
        print(f"[{recipe}] exit {code} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(main_script())

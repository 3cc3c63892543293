"""Quadruped benchmark (acceptance criteria 2 and 3): full method, S0-only, and the four ablations."""
import argparse
import json
import logging

from lasr.config import ABLATIONS
from lasr.experiments import ARTICULATED_CONFIG, articulated_run, cached


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--variants", nargs="*", default=["s0", *ABLATIONS], choices=["s0", *ABLATIONS])
    p.add_argument("--no-cache", action="store_true", help="recompute instead of reusing cached results")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    rows = {}
    for v in args.variants:
        def run(v=v):
            return articulated_run("full", s0_only=True) if v == "s0" else articulated_run(v)
        rows[v] = run() if args.no_cache else cached(f"quadruped_{v}", ARTICULATED_CONFIG, run)
        print(f"{v:8s} chamfer {rows[v]['chamfer']:.4f}  {rows[v]['seconds']:.0f} s", flush=True)


if __name__ == "__main__":
    main()

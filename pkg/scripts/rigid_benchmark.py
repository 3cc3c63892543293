"""Rigid S0 benchmark (acceptance criterion 1): blob scene, 15 frames, 90 degree orbit."""
import argparse
import json
import logging

from lasr.experiments import rigid_run


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=None, help="write checkpoints and OBJs here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=JSON", help="config overrides, e.g. lr=0.01")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    overrides = {k: json.loads(v) for k, v in (s.split("=", 1) for s in args.set)}
    r = rigid_run(args.out, overrides, seed=args.seed)
    r.pop("digests", None)
    print(json.dumps(r, indent=1, default=float))


if __name__ == "__main__":
    main()

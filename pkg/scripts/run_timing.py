"""Time base, fused RKF, branched RKF and MOFA inference and print the ratios to base.

    python scripts/run_timing.py [--base base.ckpt] [--rkf rkf.ckpt] [--out timing.csv]
"""
import argparse
import sys

from drkf import cli


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--base")
    p.add_argument("--rkf")
    p.add_argument("--out", default="timing.csv")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = p.parse_args()
    argv = ["bench", "--out", args.out, "--quiet"]
    for flag in ("base", "rkf"):
        if getattr(args, flag):
            argv += [f"--{flag}", getattr(args, flag)]
    for item in args.set:
        argv += ["--set", item]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())

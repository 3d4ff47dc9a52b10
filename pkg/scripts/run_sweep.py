"""Rotation sweep (mma@5px every few degrees) for one or more checkpoints, written side by side.

    python scripts/run_sweep.py --data runs/ablation/data --out sweep.csv base=base.ckpt drkf=drkf.ckpt
"""
import argparse
import csv
import sys
import tempfile
from pathlib import Path

from drkf import cli


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--step", type=float, default=15.0, help="angle step in degrees")
    p.add_argument("models", nargs="+", metavar="NAME=CKPT")
    args = p.parse_args()
    columns, angles = {}, None
    with tempfile.TemporaryDirectory() as tmp:
        for spec in args.models:
            name, _, ckpt = spec.partition("=")
            dst = Path(tmp) / f"{name}.csv"
            code = cli.main(["eval", "--ckpt", ckpt, "--data", args.data, "--mode", "sweep", "--out", str(dst),
                             "--set", f"eval.sweep_step_deg={args.step}", "--quiet"])
            if code:
                return code
            with open(dst, newline="") as f:
                rows = list(csv.DictReader(f))
            angles = [r["angle_deg"] for r in rows]
            columns[name] = [r["mma5"] for r in rows]
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["angle_deg", *columns])
        for i, a in enumerate(angles):
            w.writerow([a, *(c[i] for c in columns.values())])
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Generate the synthetic corpus, run the five-variant ablation and print the mma@5px table.

    python scripts/run_ablation.py --work runs/ablation [--seed 0] [--set section.key=value ...]
"""
import argparse
import sys
from pathlib import Path

from drkf import cli


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="runs/ablation", help="working directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = p.parse_args()
    work = Path(args.work)
    common = ["--seed", str(args.seed), "--deterministic", "--quiet"]
    for item in args.set:
        common += ["--set", item]
    data, out = work / "data", work / "run"
    if not (data / "train.manifest").exists():
        code = cli.main(["gen-data", "--out", str(data), *common])
        if code:
            return code
    code = cli.main(["ablation", "--data", str(data), "--out", str(out), *common])
    if code:
        return code
    res = cli.read_ablation_csv(out / "ablation.csv")
    print(f"{'variant':8s} {'upright':>8s} {'rotated':>8s}   (mma@5px)")
    for v in cli.ABLATION_VARIANTS:
        print(f"{v:8s} {res[v, 'upright']['mma_5px']:8.3f} {res[v, 'rotated']['mma_5px']:8.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Write the minimum-crop curves of every scheduler to a CSV for plotting.

    python scripts/schedules.py --steps 1000 --out out/schedules.csv
"""
from __future__ import annotations

import argparse
from pathlib import Path

from ddistill.augment import CurriculumConfig, write_schedule_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--milestones", type=float, nargs="+", default=[0.2, 0.6, 1.0])
    ap.add_argument("--every", type=int, default=10)
    ap.add_argument("--out", default="out/schedules.csv")
    args = ap.parse_args()
    curves = {
        f"{kind}@{m:g}": CurriculumConfig(scheduler=kind, milestone=m, total_steps=args.steps)
        for kind in ("step", "linear", "cosine", "reverse_step")
        for m in args.milestones
    }
    curves["constant"] = CurriculumConfig(scheduler="constant", total_steps=args.steps)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_schedule_csv(args.out, curves, every=args.every)
    print(f"wrote {len(curves)} curves to {args.out}")


if __name__ == "__main__":
    main()

"""Ablation table on a 200-image synthetic set (160 train / 40 val).

Rows toggle Mosaic+Mixup, the lane decoder and the lane loss; every row
trains from the same seed. Speed is forward-only fps at 256x160.

    python3 scripts/ablation.py --out runs/ablation --steps 160
    python3 scripts/ablation.py --full-model --steps 600   # default widths, slower
"""

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from panoptic_drive.experiments import ablation_table, run_ablation

# Same reduced widths as the test suite.
SMALL = dict(
    stem_channels=16,
    stage_channels=(32, 64, 128, 256),
    blocks_per_stage=1,
    neck_channels=64,
    head_channels=16,
)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--data", default=None, help="dataset root (default: <out>/data, generated if missing)")
    p.add_argument("--steps", type=int, default=160)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--full-model", action="store_true", help="use the default model widths")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    spe = 160 // args.batch_size
    epochs = max(-(-args.steps // spe), 3)
    base = {
        **({} if args.full_model else SMALL),
        "total_epochs": epochs,
        "warmup_epochs": 1,
        "batch_size": args.batch_size,
        "max_steps": args.steps,
        "eval_every": 10_000,
        "close_mosaic_epochs": max(epochs // 4, 1),
        "alpha3": 1.0,
    }
    rows = run_ablation(args.data or out / "data", out / "runs", base)
    table = ablation_table(rows)
    print(table)
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps([asdict(r) for r in rows], indent=2))


if __name__ == "__main__":
    main()

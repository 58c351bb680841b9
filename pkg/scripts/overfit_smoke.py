"""Overfit a 16-image synthetic set and report loss drop plus train-split metrics.

    python3 scripts/overfit_smoke.py --out runs/overfit --steps 300
"""

import argparse
import logging
import sys

from panoptic_drive.experiments import overfit_smoke


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--alpha3", type=float, default=1.0, help="box loss weight")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    r = overfit_smoke(args.out, steps=args.steps, num_images=args.images, alpha3=args.alpha3)
    print(r.dumps())
    ok = r.loss_drop >= 0.70 and r.map50 >= 0.90 and r.drivable_miou >= 0.90 and r.lane_iou >= 0.30
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

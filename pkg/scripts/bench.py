"""Parameter count and forward fps for the default model at several input sizes.

    python3 scripts/bench.py --sizes 640x384 320x192 --iterations 50
"""

import argparse

import torch

from panoptic_drive.config import ModelConfig
from panoptic_drive.inference import benchmark
from panoptic_drive.model import PanopticNet
from panoptic_drive.training import load_model


def size(text):
    w, h = (int(v) for v in text.lower().split("x"))
    return w, h


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--weights", help="checkpoint; a fresh default model otherwise")
    p.add_argument("--sizes", type=size, nargs="+", default=[(640, 384), (320, 192)])
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    args = p.parse_args()

    if args.weights:
        model, _ = load_model(args.weights)
    else:
        torch.manual_seed(0)
        model = PanopticNet(ModelConfig())
    for s in args.sizes:
        print(benchmark(model, s, args.iterations, args.warmup).text())
        print()


if __name__ == "__main__":
    main()

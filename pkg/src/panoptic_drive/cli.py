"""Command-line entry point: train / eval / infer / bench / prep-lanes / gen-synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
from PIL import Image

from .config import ConfigError, RunConfig, load_config, save_config

log = logging.getLogger("panoptic_drive")


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panoptic-drive", description=__doc__)
    p.add_argument("--workdir", default=".", help="root for every relative path (default: cwd)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a dataset root")
    t.add_argument("--data", required=True, help="dataset root")
    t.add_argument("--name", default="run", help="run directory name under runs/")
    t.add_argument("--config", help="flat YAML run config; flags override it")
    t.add_argument("--val-split", default=None, help="split evaluated during training (default: train)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--epochs", dest="total_epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", dest="initial_lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--train-size", dest="train_size", type=_size)
    t.add_argument("--eval-size", dest="eval_size", type=_size)
    t.add_argument("--no-mosaic", dest="use_mosaic", action="store_const", const=False)
    t.add_argument("--no-mixup", dest="use_mixup", action="store_const", const=False)
    t.add_argument("--lane-decoder", dest="lane_decoder_kind", choices=["transposed_conv", "nearest_upsample"])
    t.add_argument("--lane-loss", dest="lane_loss_kind", choices=["focal_plus_dice", "focal"])
    t.add_argument("--restart", dest="restart_kind", choices=["warmup", "periodic"])

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "test"])
    e.add_argument("--eval-size", type=_size)
    e.add_argument("--out", help="write the JSON report here")

    i = sub.add_parser("infer", help="run one image and write results + overlay")
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--conf", type=float, default=0.25)
    i.add_argument("--iou", type=float, default=0.45)
    i.add_argument("--eval-size", type=_size)

    b = sub.add_parser("bench", help="parameter count and forward-pass FPS")
    b.add_argument("--weights", help="checkpoint (default: freshly initialized model from --config)")
    b.add_argument("--config")
    b.add_argument("--size", type=_size, default=(640, 384))
    b.add_argument("--iterations", type=int, default=50)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--out", help="write the text report here")

    pl = sub.add_parser("prep-lanes", help="rasterize cached lane masks from two-line annotations")
    pl.add_argument("--root", required=True)
    pl.add_argument("--split", required=True, choices=["train", "val", "test"])
    pl.add_argument("--width", type=int, default=None, help="mask width px (default 8 train / 2 val, test)")

    g = sub.add_parser("gen-synth", help="write a synthetic dataset")
    g.add_argument("--root", required=True)
    g.add_argument("--num-train", type=int, default=16)
    g.add_argument("--num-val", type=int, default=0)
    g.add_argument("--num-test", type=int, default=0)
    g.add_argument("--size", type=_size, default=(256, 160))
    g.add_argument("--seed", type=int, default=0)
    return p


TRAIN_KEYS = (
    "total_epochs", "batch_size", "initial_lr", "seed", "max_steps", "eval_every", "train_size",
    "eval_size", "use_mosaic", "use_mixup", "lane_decoder_kind", "lane_loss_kind", "restart_kind",
)


def _cmd_train(args, root: Path) -> int:
    from .data import load_manifest
    from .training import fit

    cfg = load_config(root / args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in TRAIN_KEYS if getattr(args, k) is not None}
    cfg = cfg.merged(overrides)
    run_dir = root / "runs" / args.name
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    train = load_manifest(root / args.data, "train")
    val = load_manifest(root / args.data, args.val_split) if args.val_split else None
    result = fit(cfg, train, run_dir, val_manifest=val, resume=root / args.resume if args.resume else None)
    if result.reports:
        print(result.reports[-1][1].table())
    print(f"checkpoints in {run_dir}")
    return 0


def _cmd_eval(args, root: Path) -> int:
    from .data import load_manifest
    from .training import evaluate, load_model

    model, cfg = load_model(root / args.weights)
    manifest = load_manifest(root / args.data, args.split)
    report = evaluate(model, manifest, args.eval_size or cfg.train.eval_size, cfg.train.conf_threshold, cfg.train.nms_iou)
    print(report.table())
    if args.out:
        out = root / args.out
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.dumps())
    return 0


def _cmd_infer(args, root: Path) -> int:
    from .inference import read_image, render_overlay, run_inference
    from .training import load_model

    model, cfg = load_model(root / args.weights)
    image_path = root / args.image
    image = read_image(image_path)
    result = run_inference(model, image, args.eval_size or cfg.train.eval_size, args.conf, args.iou)
    out = root / args.out
    out.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    (out / f"{stem}.json").write_text(json.dumps(result.to_json(), indent=2))
    with open(out / f"{stem}.detections.jsonl", "w") as fh:
        for det in result.detections:
            fh.write(json.dumps(det.to_json()) + "\n")
    Image.fromarray(result.drivable_mask * 255).save(out / f"{stem}.drivable.png")
    Image.fromarray(result.lane_mask * 255).save(out / f"{stem}.lane.png")
    Image.fromarray(render_overlay(image, result)).save(out / f"{stem}.overlay.png")
    print(f"{len(result.detections)} detections; outputs in {out}")
    return 0


def _cmd_bench(args, root: Path) -> int:
    from .inference import benchmark
    from .model import PanopticNet
    from .training import load_model

    if args.weights:
        model, _ = load_model(root / args.weights)
    else:
        cfg = load_config(root / args.config) if args.config else RunConfig()
        torch.manual_seed(0)
        model = PanopticNet(cfg.model)
    report = benchmark(model, args.size, args.iterations, args.warmup)
    print(report.text())
    if args.out:
        (root / args.out).write_text(report.text() + "\n")
    return 0


def _cmd_prep_lanes(args, root: Path) -> int:
    from .data import load_manifest, prep_lanes

    manifest = load_manifest(root / args.root, args.split, args.width)
    n = prep_lanes(manifest, manifest.lane_mask_width)
    print(f"rasterized {n} lane masks at {manifest.lane_mask_width} px")
    return 0


def _cmd_gen_synth(args, root: Path) -> int:
    from .data import SynthConfig, synth_generate

    cfg = SynthConfig(num_train=args.num_train, num_val=args.num_val, num_test=args.num_test, image_size=args.size)
    manifests = synth_generate(cfg, root / args.root, seed=args.seed)
    for split, m in manifests.items():
        print(f"{split}: {len(m)} images")
    return 0


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "bench": _cmd_bench,
    "prep-lanes": _cmd_prep_lanes,
    "gen-synth": _cmd_gen_synth,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, Path(args.workdir))
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())

"""On-disk dataset layout, manifests and sample loading.

Layout under ``root``::

    images/<split>/<id>.png
    labels/<split>/<id>.json            {"objects": [{"class": int, "box": [x1, y1, x2, y2]}]}
    labels/<split>/<id>.drivable.png    0 background, 255 drivable
    labels/<split>/<id>.lanes.json      [{"left": [[x, y], ...], "right": [[x, y], ...]}]
    labels/<split>/<id>.lane<w>px.png   cached lane mask rasterized at width w
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .lanes import TEST_LANE_WIDTH, TRAIN_LANE_WIDTH, LaneAnnotation, lane_mask
from .synth import SynthConfig, generate_scene
from .transforms import Sample

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LANE_WIDTH_BY_SPLIT = {"train": TRAIN_LANE_WIDTH, "val": TEST_LANE_WIDTH, "test": TEST_LANE_WIDTH}


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image: Path
    label: Path
    drivable: Path
    lanes: Path


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    lane_mask_width: int = TRAIN_LANE_WIDTH
    errors: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, idx) -> "DatasetManifest":
        return DatasetManifest(self.root, self.split, [self.entries[i] for i in idx], self.lane_mask_width)

    def ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]


def _entry(root: Path, split: str, sid: str) -> ManifestEntry:
    lab = root / "labels" / split
    return ManifestEntry(
        sid,
        root / "images" / split / f"{sid}.png",
        lab / f"{sid}.json",
        lab / f"{sid}.drivable.png",
        lab / f"{sid}.lanes.json",
    )


def lane_cache_path(entry: ManifestEntry, width: int) -> Path:
    return entry.label.with_name(f"{entry.sample_id}.lane{width}px.png")


def load_manifest(root: str | Path, split: str, lane_mask_width: int | None = None) -> DatasetManifest:
    """Index ``root`` for ``split``; malformed samples are recorded in ``errors`` and skipped."""
    root = Path(root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    width = lane_mask_width if lane_mask_width is not None else LANE_WIDTH_BY_SPLIT[split]
    manifest = DatasetManifest(root, split, lane_mask_width=width)
    img_dir = root / "images" / split
    images = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    if not images:
        log.warning("no images found under %s", img_dir)
        return manifest
    for img in images:
        entry = _entry(root, split, img.stem)
        try:
            for p in (entry.label, entry.drivable, entry.lanes):
                if not p.exists():
                    raise DatasetError(f"missing {p.name}")
            _parse_objects(entry.label)
            _parse_lanes(entry.lanes)
        except (DatasetError, ValueError, KeyError, TypeError) as exc:
            manifest.errors.append((str(entry.label), str(exc)))
            log.warning("skipping %s: %s", entry.sample_id, exc)
            continue
        manifest.entries.append(entry)
    return manifest


def _parse_objects(path: Path) -> np.ndarray:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path.name}: malformed JSON ({exc})") from exc
    rows = []
    for obj in data["objects"]:
        x1, y1, x2, y2 = (float(v) for v in obj["box"])
        rows.append((int(obj["class"]), x1, y1, x2, y2))
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def _parse_lanes(path: Path) -> list[LaneAnnotation]:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path.name}: malformed JSON ({exc})") from exc
    return [LaneAnnotation.from_json(d) for d in data]


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB") if im.mode not in ("L", "1") else im)


def write_mask_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def build_lane_mask(entry: ManifestEntry, width: int, shape: tuple[int, int], cache: bool = True) -> np.ndarray:
    cached = lane_cache_path(entry, width)
    if cached.exists():
        return (read_png(cached) > 127).astype(np.uint8)
    mask = lane_mask(_parse_lanes(entry.lanes), width, shape)
    if cache:
        write_mask_png(mask, cached)
    return mask


def load_sample(entry: ManifestEntry, lane_width: int, cache: bool = True) -> Sample:
    image = read_png(entry.image).astype(np.float32) / 255.0
    h, w = image.shape[:2]
    drivable = (read_png(entry.drivable) > 127).astype(np.uint8)
    lane = build_lane_mask(entry, lane_width, (h, w), cache)
    return Sample(image, _parse_objects(entry.label), drivable, lane, meta={"source": entry.sample_id})


def prep_lanes(manifest: DatasetManifest, width: int) -> int:
    """(Re)rasterize cached lane masks for every entry at ``width`` px."""
    for entry in manifest.entries:
        cached = lane_cache_path(entry, width)
        if cached.exists():
            cached.unlink()
        with Image.open(entry.image) as im:
            w, h = im.size
        build_lane_mask(entry, width, (h, w), cache=True)
    return len(manifest.entries)


def write_scene(root: Path, split: str, sid: str, scene) -> ManifestEntry:
    entry = _entry(root, split, sid)
    entry.image.parent.mkdir(parents=True, exist_ok=True)
    entry.label.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(scene.image).save(entry.image)
    objects = [{"class": int(c), "box": [int(x1), int(y1), int(x2), int(y2)]} for c, x1, y1, x2, y2 in scene.boxes]
    entry.label.write_text(json.dumps({"objects": objects}))
    write_mask_png(scene.drivable, entry.drivable)
    entry.lanes.write_text(json.dumps([ann.to_json() for ann in scene.lanes]))
    return entry


def synth_generate(cfg: SynthConfig, root: str | Path, seed: int = 0) -> dict[str, DatasetManifest]:
    """Write a synthetic dataset under ``root`` and return the manifests of non-empty splits.

    Each scene draws from its own generator seeded by (seed, split, index), so
    output is identical across runs and independent of split sizes.
    """
    root = Path(root)
    counts = {"train": cfg.num_train, "val": cfg.num_val, "test": cfg.num_test}
    out = {}
    for si, split in enumerate(SPLITS):
        if counts[split] <= 0:
            continue
        for i in range(counts[split]):
            rng = np.random.default_rng([seed, si, i])
            write_scene(root, split, f"{i:05d}", generate_scene(cfg, rng))
        out[split] = load_manifest(root, split)
    return out


class SampleCache:
    """Loads each manifest entry once and hands out the decoded samples."""

    def __init__(self, manifest: DatasetManifest, lane_width: int | None = None):
        self.manifest = manifest
        self.lane_width = lane_width if lane_width is not None else manifest.lane_mask_width
        self._samples: dict[int, Sample] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, i: int) -> Sample:
        if i not in self._samples:
            self._samples[i] = load_sample(self.manifest.entries[i], self.lane_width)
        return self._samples[i]

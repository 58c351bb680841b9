import json
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from panoptic_drive.cli import cli_main
from panoptic_drive.config import load_config, save_config
from panoptic_drive.data import load_manifest
from panoptic_drive.data.dataset import lane_cache_path, read_png
from panoptic_drive.inference import (
    DRIVABLE_ALPHA,
    DRIVABLE_RGB,
    PerceptionResult,
    benchmark,
    read_image,
    render_overlay,
    run_inference,
)
from panoptic_drive.model import Detection, PanopticNet
from panoptic_drive.model.network import param_count
from panoptic_drive.training import save_checkpoint

from conftest import small_model_config, small_run_config


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return PanopticNet(small_model_config()).eval()


@pytest.fixture(scope="module")
def weights(tmp_path_factory, model):
    path = tmp_path_factory.mktemp("w") / "w.pt"
    save_checkpoint(path, model, None, small_run_config(), 0, 0)
    return path


def test_blank_image_gives_well_formed_result(model):
    image = np.full((150, 230, 3), 0.5, np.float32)
    res = run_inference(model, image, (256, 160))
    assert res.drivable_mask.shape == res.lane_mask.shape == (150, 230)
    assert set(np.unique(res.drivable_mask)) <= {0, 1}
    assert set(np.unique(res.lane_mask)) <= {0, 1}
    assert all(v >= 0 for v in res.timing.values())
    assert set(res.timing) == {"preprocess", "forward", "postprocess"}
    for d in res.detections:
        assert 0 <= d.box[0] <= d.box[2] <= 230 and 0 <= d.box[1] <= d.box[3] <= 150
    json.dumps(res.to_json())


def test_inference_is_deterministic(model):
    image = np.random.default_rng(0).random((160, 256, 3), dtype=np.float32)
    a = run_inference(model, image, (256, 160), conf_threshold=0.0)
    b = run_inference(model, image, (256, 160), conf_threshold=0.0)
    assert a.to_json(include_timing=False) == b.to_json(include_timing=False)
    assert np.array_equal(a.lane_mask, b.lane_mask)


def test_unreadable_image_raises(tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(OSError):
        read_image(bad)


def _empty(h, w, drivable=0):
    return PerceptionResult([], np.full((h, w), drivable, np.uint8), np.zeros((h, w), np.uint8))


def test_overlay_of_empty_result_is_identity():
    img = np.random.default_rng(0).integers(0, 256, (40, 60, 3), dtype=np.uint8)
    assert np.array_equal(render_overlay(img, _empty(40, 60)), img)


def test_overlay_full_drivable_tints_every_pixel():
    img = np.zeros((20, 30, 3), np.uint8)
    out = render_overlay(img, _empty(20, 30, drivable=1))
    expected = np.round(DRIVABLE_ALPHA * np.array(DRIVABLE_RGB)).astype(np.uint8)
    assert (out == expected).all()


def test_overlay_box_edges_at_exact_coordinates():
    img = np.zeros((60, 80, 3), np.uint8)
    res = PerceptionResult([Detection(1, 0.9, (20.0, 25.0, 50.0, 45.0))], np.zeros((60, 80), np.uint8), np.zeros((60, 80), np.uint8))
    out = render_overlay(img, res)
    for x, y in [(20, 25), (50, 45), (35, 25), (35, 45), (20, 35), (50, 35)]:
        assert out[y, x].any(), (x, y)
    assert not out[35, 35].any()  # interior untouched
    assert not out[35, 19].any() and not out[35, 51].any()


def test_overlay_lane_pixels_are_red():
    img = np.zeros((10, 10, 3), np.uint8)
    lane = np.zeros((10, 10), np.uint8)
    lane[4, :] = 1
    out = render_overlay(img, PerceptionResult([], np.zeros_like(lane), lane))
    assert (out[4] == (255, 0, 0)).all()


def independent_param_count(module):
    """Closed-form weight count from each layer's hyper-parameters."""
    total = 0
    for m in module.modules():
        if isinstance(m, torch.nn.Conv2d):
            kh, kw = m.kernel_size
            total += m.out_channels * (m.in_channels // m.groups) * kh * kw + (m.out_channels if m.bias is not None else 0)
        elif isinstance(m, torch.nn.ConvTranspose2d):
            kh, kw = m.kernel_size
            total += m.in_channels * (m.out_channels // m.groups) * kh * kw + (m.out_channels if m.bias is not None else 0)
        elif isinstance(m, torch.nn.BatchNorm2d):
            total += 2 * m.num_features
        elif len(list(m.parameters(recurse=False))):
            raise AssertionError(f"unaccounted layer {type(m).__name__}")
    return total


def test_param_count_matches_closed_form_for_default_config():
    from panoptic_drive.config import ModelConfig

    torch.manual_seed(0)
    net = PanopticNet(ModelConfig())
    assert param_count(net) == independent_param_count(net)


def test_benchmark_param_count_is_stable(model):
    a = benchmark(model, (64, 64), iterations=1, warmup=0)
    b = benchmark(model, (64, 64), iterations=1, warmup=0)
    assert a.param_count == b.param_count == independent_param_count(model)
    assert "hardware" in a.text() and "warmup" in a.text()


def test_param_count_identical_across_processes(model):
    code = (
        "import sys, torch; sys.path.insert(0, 'tests');"
        "from conftest import small_model_config;"
        "from panoptic_drive.model import PanopticNet;"
        "from panoptic_drive.model.network import param_count;"
        "print(param_count(PanopticNet(small_model_config())))"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert int(out.stdout) == param_count(model)


def test_halved_input_is_faster(model):
    big = benchmark(model, (512, 320), iterations=20, warmup=2)
    small = benchmark(model, (256, 160), iterations=20, warmup=2)
    assert small.fps > big.fps


def test_benchmark_warmup_flag(model):
    r0 = benchmark(model, (64, 64), iterations=3, warmup=0)
    r5 = benchmark(model, (64, 64), iterations=3)
    assert (r0.warmup, r5.warmup) == (0, 5)
    assert r0.fps > 0 and r5.fps > 0
    with pytest.raises(ValueError):
        benchmark(model, (64, 64), iterations=0)


# --- CLI -------------------------------------------------------------------------------

def _write_image(path, seed=0):
    arr = np.random.default_rng(seed).integers(0, 256, (120, 200, 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)


def test_cli_infer_writes_artifacts(tmp_path, weights):
    _write_image(tmp_path / "x.png")
    argv = ["--workdir", str(tmp_path), "infer", "--weights", str(weights), "--image", "x.png", "--out", "o1", "--conf", "0.0"]
    assert cli_main(argv) == 0
    out = tmp_path / "o1"
    for suffix in ("json", "detections.jsonl", "drivable.png", "lane.png", "overlay.png"):
        assert (out / f"x.{suffix}").exists()
    assert Image.open(out / "x.overlay.png").size == (200, 120)
    assert json.loads((out / "x.json").read_text())["image_size"] == [200, 120]


def test_cli_identical_flags_identical_artifacts(tmp_path, weights):
    _write_image(tmp_path / "x.png")
    for name in ("a", "b"):
        argv = ["--workdir", str(tmp_path), "infer", "--weights", str(weights), "--image", "x.png", "--out", name, "--conf", "0.0"]
        assert cli_main(argv) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        other = tmp_path / "b" / f.name
        if f.suffix == ".json":
            strip = lambda p: {k: v for k, v in json.loads(p.read_text()).items() if k != "timing_ms"}  # noqa: E731
            assert strip(f) == strip(other)
        else:
            assert f.read_bytes() == other.read_bytes(), f.name


def test_cli_usage_errors(capsys):
    assert cli_main(["eval", "--data", "d"]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli_main(["frobnicate"]) == 2
    assert cli_main(["infer", "--weights", "w", "--image", "x", "--out", "o", "--bogus"]) == 2


def test_cli_runtime_error_is_nonzero(tmp_path):
    assert cli_main(["--workdir", str(tmp_path), "eval", "--weights", "missing.pt", "--data", "d"]) == 1


def test_cli_gen_synth_and_prep_lanes(tmp_path):
    assert cli_main(["--workdir", str(tmp_path), "gen-synth", "--root", "d", "--num-train", "2", "--num-test", "2"]) == 0
    assert cli_main(["--workdir", str(tmp_path), "prep-lanes", "--root", "d", "--split", "test", "--width", "2"]) == 0
    m = load_manifest(tmp_path / "d", "test", 2)
    assert m.lane_mask_width == 2
    for e in m.entries:
        thin = read_png(lane_cache_path(e, 2)) > 127
        thick = read_png(lane_cache_path(e, 8)) > 127 if lane_cache_path(e, 8).exists() else None
        assert 0 < thin.sum()
        if thick is not None:
            assert thin.sum() < thick.sum()


def test_cli_bench(tmp_path, weights, capsys):
    argv = ["--workdir", str(tmp_path), "bench", "--weights", str(weights), "--size", "64x64", "--iterations", "2", "--out", "b.txt"]
    assert cli_main(argv) == 0
    assert "Speed(fps)" in (tmp_path / "b.txt").read_text()


def test_cli_train_flags_override_config(tmp_path):
    assert cli_main(["--workdir", str(tmp_path), "gen-synth", "--root", "d", "--num-train", "4"]) == 0
    save_config(small_run_config(total_epochs=9, batch_size=2, warmup_epochs=1), tmp_path / "c.yaml")
    argv = ["--workdir", str(tmp_path), "train", "--data", "d", "--config", "c.yaml", "--epochs", "4", "--max-steps", "1", "--name", "r"]
    assert cli_main(argv) == 0
    cfg = load_config(tmp_path / "runs" / "r" / "config.yaml")
    assert cfg.train.total_epochs == 4
    assert cfg.train.batch_size == 2
    assert (tmp_path / "runs" / "r" / "last.pt").exists()


def test_cli_eval(tmp_path, weights, synth_root):
    root, _ = synth_root
    argv = ["--workdir", str(tmp_path), "eval", "--weights", str(weights), "--data", str(root), "--eval-size", "256x160", "--out", "r.json"]
    assert cli_main(argv) == 0
    assert json.loads((tmp_path / "r.json").read_text())["num_images"] == 4


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "panoptic_drive", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-synth" in out.stdout

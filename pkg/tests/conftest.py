from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

from panoptic_drive.config import ModelConfig, RunConfig
from panoptic_drive.data import SynthConfig, synth_generate

settings.register_profile("default", deadline=None)
settings.load_profile("default")

SMALL_MODEL = dict(
    stem_channels=16,
    stage_channels=(32, 64, 128, 256),
    blocks_per_stage=1,
    neck_channels=64,
    head_channels=16,
    input_size=(256, 160),
)


def small_model_config(**kw) -> ModelConfig:
    return ModelConfig(**{**SMALL_MODEL, **kw})


def small_run_config(**overrides) -> RunConfig:
    flat = {**SMALL_MODEL, "train_size": (256, 160), "eval_size": (256, 160), **overrides}
    return RunConfig().merged(flat)


def numeric_grad(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad.detach()


def grad_rel_err(f, x: torch.Tensor, h: float = 1e-6) -> float:
    a = analytic_grad(f, x)
    n = numeric_grad(f, x, h)
    return float((a - n).norm() / max(n.norm().item(), 1e-12))


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """16 train, 4 val and 4 test synthetic images at 256x160."""
    root = tmp_path_factory.mktemp("synth")
    manifests = synth_generate(SynthConfig(num_train=16, num_val=4, num_test=4), root, seed=0)
    return root, manifests


@pytest.fixture
def rng():
    return np.random.default_rng(0)

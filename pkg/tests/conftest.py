import numpy as np
import pytest
import torch

from csmae.backbone import CsmaeModel, ModelConfig
from csmae.config import build_config
from csmae.datasets import compute_band_stats, generate_synthetic, normalize

ACCEPTANCE_LINES: list[str] = []

TINY_MODEL = [
    "model.vit_variant=custom",
    "model.dim=16",
    "model.depth=2",
    "model.heads=2",
    "model.cross_depth=1",
    "model.decoder_dim=16",
    "model.decoder_depth=1",
    "model.decoder_heads=2",
    "model.patch_size=4",
    "model.image_side=12",
]

# the desk-scale end-to-end model
DESK_MODEL = [
    "model.variant=SESD",
    "model.vit_variant=custom",
    "model.dim=64",
    "model.depth=4",
    "model.heads=4",
    "model.cross_depth=2",
    "model.decoder_dim=64",
    "model.decoder_depth=2",
    "model.decoder_heads=4",
    "model.patch_size=8",
    "model.image_side=32",
]


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        variant="SESD",
        vit_variant="custom",
        dim=16,
        depth=2,
        heads=2,
        cross_depth=1,
        decoder_dim=16,
        decoder_depth=1,
        decoder_heads=2,
        patch_size=4,
        image_side=12,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float64, **kw) -> CsmaeModel:
    torch.manual_seed(seed)
    return CsmaeModel(tiny_model_config(**kw)).to(dtype)


def tiny_train_config(*overrides):
    return build_config(
        None,
        [
            *TINY_MODEL,
            "model.variant=SESD",
            "optimizer.epochs=5",
            "optimizer.batch_size=4",
            "optimizer.warmup_epochs=1",
            "optimizer.base_lr=1e-3",
            "losses.mde=true",
            *overrides,
        ],
    )


def normalized_synthetic(n, side, n_classes=6, seed=0, n_train=None):
    pairs = generate_synthetic(n, side, n_classes, seed=seed)
    train = pairs[: n_train or n]
    s1 = compute_band_stats([p.img1 for p in train])
    s2 = compute_band_stats([p.img2 for p in train])
    for p in pairs:
        p.img1 = normalize(p.img1, s1)
        p.img2 = normalize(p.img2, s2)
    return pairs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

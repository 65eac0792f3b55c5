import json
import math
import zipfile

import numpy as np
import pytest
import torch

from conftest import DESK_MODEL, normalized_synthetic, tiny_train_config
from csmae.backbone import PARTITIONS, parameter_partition
from csmae.config import build_config
from csmae.errors import ConfigError, DataError, NumericError
from csmae.training import (
    epoch_batches,
    init_state,
    load_checkpoint,
    load_model,
    lr_at_step,
    read_metrics,
    stack_batch,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def pairs16():
    return normalized_synthetic(16, 12, n_classes=4, seed=0)


def test_lr_schedule_examples():
    assert lr_at_step(0, 100, 10, 1e-3) == 0.0
    assert lr_at_step(5, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at_step(10, 100, 10, 1e-3) == pytest.approx(1e-3)
    assert lr_at_step(55, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at_step(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-18)


def test_lr_schedule_monotone_after_warmup():
    lrs = [lr_at_step(s, 50, 5, 1.0) for s in range(51)]
    assert all(a <= b for a, b in zip(lrs[:5], lrs[1:6]))
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
    assert min(lrs) >= 0


def test_zero_lr_leaves_parameters(pairs16):
    cfg = tiny_train_config("optimizer.weight_decay=0.05")
    state = init_state(cfg)
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    p1, p2 = stack_batch(pairs16[:4], 4)
    train_step(p1, p2, state, cfg, lr=0.0)
    assert state.step == 1
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_two_runs_same_seed_identical(pairs16):
    cfg = tiny_train_config()
    seqs = []
    for _ in range(2):
        state = init_state(cfg)
        p1, p2 = stack_batch(pairs16[:4], 4)
        seqs.append([train_step(p1, p2, state, cfg, 1e-3).values() for _ in range(2)])
    assert seqs[0] == seqs[1]


def test_epoch_batches_seeded_and_complete():
    a = epoch_batches(16, 4, seed=0, epoch=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, epoch_batches(16, 4, 0, 3)))
    assert sorted(np.concatenate(a).tolist()) == list(range(16))
    assert not np.array_equal(np.concatenate(a), np.concatenate(epoch_batches(16, 4, 0, 4)))


def test_epoch_batches_merges_singleton_tail():
    sizes = [len(b) for b in epoch_batches(9, 4, 0, 0, min_batch=2)]
    assert sizes == [4, 5]
    assert [len(b) for b in epoch_batches(9, 4, 0, 0)] == [4, 4, 1]


def test_train_bookkeeping(tmp_path, pairs16):
    cfg = tiny_train_config("optimizer.epochs=5", "optimizer.batch_size=4")
    ckpt, metrics = train(cfg, tmp_path, pairs=pairs16)
    rows = read_metrics(metrics)
    assert len(rows) == 5 * math.ceil(16 / 4)
    assert [r["step"] for r in rows] == list(range(20))
    assert metrics.read_text().splitlines()[0] == "step,umr1,umr2,cmr1,cmr2,mde,mim,total,lr"
    _, meta, params, _ = load_checkpoint(ckpt)
    assert meta["step"] == rows[-1]["step"] + 1
    assert meta["epoch"] == 5 and meta["seed"] == cfg.run.seed
    assert meta["history"][-1]["total"] == pytest.approx(rows[-1]["total"], rel=1e-9)
    assert "sensor.S1.0.attn.qkv.weight" in meta["parameters"]
    assert meta["parameters"]["sensor.S1.0.attn.qkv.weight"] == [48, 16]


def test_disabled_terms_are_empty_fields(tmp_path, pairs16):
    cfg = tiny_train_config("losses.mde=false", "losses.mim=false", "optimizer.epochs=2")
    _, metrics = train(cfg, tmp_path, pairs=pairs16)
    row = metrics.read_text().splitlines()[1].split(",")
    assert row[5] == "" and row[6] == ""
    assert read_metrics(metrics)[0]["mim"] is None


def test_checkpoint_cadence_and_reload(tmp_path, pairs16):
    cfg = tiny_train_config("optimizer.epochs=4", "run.checkpoint_every=2")
    ckpt, _ = train(cfg, tmp_path, pairs=pairs16)
    assert (tmp_path / "checkpoint_e0002.bin").exists()
    assert not (tmp_path / "checkpoint_e0004.bin").exists()
    with zipfile.ZipFile(ckpt) as zf:
        assert sorted(zf.namelist()) == ["config.ini", "meta.json", "optimizer.pt", "params.pt"]
        assert json.loads(zf.read("meta.json"))["epoch"] == 4
    model, saved, _ = load_model(ckpt)
    assert saved == cfg
    img = torch.as_tensor(pairs16[0].img2)
    assert torch.isfinite(model.extract_feature(img, "S2")).all()


def test_resume_matches_uninterrupted(tmp_path, pairs16):
    cfg = tiny_train_config("optimizer.epochs=6", "run.checkpoint_every=3")
    full, _ = train(cfg, tmp_path / "full", pairs=pairs16)
    part, _ = train(cfg, tmp_path / "part", pairs=pairs16, stop_after_epochs=3)
    assert load_checkpoint(part)[1]["epoch"] == 3
    resumed, metrics = train(cfg, tmp_path / "resumed", pairs=pairs16, resume=part)
    a = load_checkpoint(full)[1]["history"]
    b = load_checkpoint(resumed)[1]["history"]
    assert len(a) == len(b) == 24
    for ra, rb in zip(a, b):
        for key in ("umr_1", "umr_2", "cmr_1", "cmr_2", "mde", "mim", "total"):
            assert rb[key] == pytest.approx(ra[key], rel=1e-6)
    assert len(read_metrics(metrics)) == 24


def test_resume_config_mismatch(tmp_path, pairs16):
    cfg = tiny_train_config("optimizer.epochs=4")
    part, _ = train(cfg, tmp_path / "a", pairs=pairs16, stop_after_epochs=1)
    other = tiny_train_config("optimizer.epochs=4", "optimizer.base_lr=5e-4")
    with pytest.raises(ConfigError):
        train(other, tmp_path / "b", pairs=pairs16, resume=part)
    # checkpoint cadence alone may change
    ok = tiny_train_config("optimizer.epochs=4", "run.checkpoint_every=1")
    train(ok, tmp_path / "c", pairs=pairs16, resume=part)


def test_non_finite_loss_names_term(tmp_path, pairs16):
    bad = [p for p in pairs16]
    bad[0] = type(bad[0])(bad[0].id, bad[0].img1.copy(), bad[0].img2, bad[0].labels)
    bad[0].img1[:] = np.nan
    cfg = tiny_train_config("losses.cmr=false", "losses.mde=false", "losses.mim=false", "optimizer.batch_size=16")
    with pytest.raises(NumericError, match="umr_1"):
        train(cfg, tmp_path, pairs=bad)


def test_empty_training_set(tmp_path):
    with pytest.raises(DataError):
        train(tiny_train_config(), tmp_path, pairs=[])


def test_every_partition_receives_gradient(pairs16):
    cfg = tiny_train_config("losses.mde=true", "losses.mim=true")
    state = init_state(cfg)
    seen, touched = set(), set()
    for step in range(50):
        idx = epoch_batches(16, 4, 0, step // 4)[step % 4]
        p1, p2 = stack_batch([pairs16[i] for i in idx], 4)
        train_step(p1, p2, state, cfg, 1e-3)
        for name, p in state.model.named_parameters():
            if p.grad is not None and bool((p.grad != 0).any()):
                seen.add(parameter_partition(name))
                touched.add(name)
    assert seen == set(PARTITIONS)
    assert touched == {name for name, _ in state.model.named_parameters()}


def test_smoothed_reconstruction_decreases(tmp_path):
    pairs = normalized_synthetic(16, 32, seed=0)
    cfg = build_config(
        None,
        [*DESK_MODEL, "optimizer.base_lr=1e-3", "optimizer.epochs=50", "optimizer.batch_size=4",
         "optimizer.warmup_epochs=5"],
    )
    _, metrics = train(cfg, tmp_path, pairs=pairs)
    rows = read_metrics(metrics)
    assert len(rows) == 200
    recon = [r["umr_1"] + r["umr_2"] + r["cmr_1"] + r["cmr_2"] for r in rows]
    assert np.mean(recon[-20:]) < recon[0]

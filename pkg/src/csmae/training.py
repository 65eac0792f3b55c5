"""Optimization loop, checkpoints and metrics."""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import CsmaeModel
from .config import TrainConfig, config_from_ini, config_to_ini
from .datasets import MultiModalPair, load_manifest, load_pairs
from .errors import ConfigError, DataError
from .masking import make_mask_plan, patchify, plans_to_masks
from .objectives import TERMS, LossBreakdown, LossFlags, loss_total

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "umr1", "umr2", "cmr1", "cmr2", "mde", "mim", "total", "lr")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


def lr_at_step(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine annealing to 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress))))


@dataclass
class TrainState:
    model: CsmaeModel
    optimizer: torch.optim.Optimizer
    mask_rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def build_model(cfg: TrainConfig) -> CsmaeModel:
    torch.manual_seed(cfg.run.seed)
    return CsmaeModel(cfg.model).to(DTYPES[cfg.run.dtype])


def build_optimizer(model: CsmaeModel, cfg: TrainConfig) -> torch.optim.AdamW:
    # decay matrices only; biases, norms and tokens stay undecayed
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    o = cfg.optimizer
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": o.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=o.base_lr,
        betas=(o.beta1, o.beta2),
    )


def init_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg)
    return TrainState(
        model=model,
        optimizer=build_optimizer(model, cfg),
        mask_rng=np.random.default_rng([cfg.run.seed, 1]),
    )


def stack_batch(pairs: list[MultiModalPair], patch_size: int, dtype=torch.float32):
    x1 = torch.as_tensor(np.stack([p.img1 for p in pairs]), dtype=dtype)
    x2 = torch.as_tensor(np.stack([p.img2 for p in pairs]), dtype=dtype)
    return patchify(x1, patch_size).patches, patchify(x2, patch_size).patches


def compute_losses(state: TrainState, patches1, patches2, cfg: TrainConfig) -> LossBreakdown:
    """Draw fresh mask plans for every pair and evaluate the configured objective."""
    n = patches1.shape[1]
    plans = [
        make_mask_plan(n, cfg.masking.ratio, cfg.masking.mode, state.mask_rng)
        for _ in range(patches1.shape[0])
    ]
    mask1, mask2 = plans_to_masks(plans)
    L = cfg.losses
    return loss_total(
        state.model,
        patches1,
        patches2,
        mask1,
        mask2,
        flags=LossFlags(L.umr, L.cmr, L.mde, L.mim),
        tau=L.tau,
        denominator_mode=L.denominator_mode,
        weights={
            "umr_1": L.weight_umr,
            "umr_2": L.weight_umr,
            "cmr_1": L.weight_cmr,
            "cmr_2": L.weight_cmr,
            "mde": L.weight_mde,
            "mim": L.weight_mim,
        },
    )


def train_step(
    patches1: torch.Tensor,
    patches2: torch.Tensor,
    state: TrainState,
    cfg: TrainConfig,
    lr: float,
) -> LossBreakdown:
    """One AdamW update at learning rate ``lr``; increments ``state.step``."""
    state.model.train()
    losses = compute_losses(state, patches1, patches2, cfg)
    losses.check_finite()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    if cfg.optimizer.clip_grad > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.optimizer.clip_grad)
    state.optimizer.step()
    row = {"step": state.step, **losses.values(), "lr": lr}
    state.history.append(row)
    state.step += 1
    return losses


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int, min_batch: int = 1) -> list[np.ndarray]:
    """Seeded per-epoch shuffle cut into contiguous batches.

    A trailing batch smaller than ``min_batch`` is merged into the previous one.
    """
    perm = np.random.default_rng([seed, 2, epoch]).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_batch:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


# -- metrics file --------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else f"{v:.10g}"


def metrics_row(row: dict) -> str:
    keys = ("step", *TERMS, "total", "lr")
    return ",".join(str(row["step"]) if k == "step" else _fmt(row.get(k)) for k in keys)


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {"step": int(vals[0])}
        for k, v in zip((*TERMS, "total", "lr"), vals[1:]):
            row[k] = float(v) if v else None
        out.append(row)
    return out


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> Path:
    """Zip archive: ``config.ini``, ``meta.json``, ``params.pt`` and ``optimizer.pt``.

    Parameter names are the model's ``state_dict`` keys, e.g.
    ``sensor.S1.3.attn.qkv.weight``; ``meta.json`` lists each with its shape.
    """
    path = Path(path)
    params = {k: v.detach().clone() for k, v in state.model.state_dict().items()}
    meta = {
        "step": state.step,
        "epoch": state.epoch,
        "seed": cfg.run.seed,
        "mask_rng": state.mask_rng.bit_generator.state,
        "parameters": {k: list(v.shape) for k, v in params.items()},
        "history": state.history,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.ini", config_to_ini(cfg))
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for name, obj in (("params.pt", params), ("optimizer.pt", state.optimizer.state_dict())):
            buf = io.BytesIO()
            torch.save(obj, buf)
            zf.writestr(name, buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[TrainConfig, dict, dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        cfg = config_from_ini(zf.read("config.ini").decode())
        meta = json.loads(zf.read("meta.json"))
        params = torch.load(io.BytesIO(zf.read("params.pt")), weights_only=True)
        opt = torch.load(io.BytesIO(zf.read("optimizer.pt")), weights_only=True)
    return cfg, meta, params, opt


def load_model(path) -> tuple[CsmaeModel, TrainConfig, dict]:
    cfg, meta, params, _ = load_checkpoint(path)
    model = CsmaeModel(cfg.model).to(DTYPES[cfg.run.dtype])
    model.load_state_dict(params)
    model.eval()
    return model, cfg, meta


def restore_state(path, cfg: TrainConfig) -> TrainState:
    saved_cfg, meta, params, opt = load_checkpoint(path)
    if _resume_key(saved_cfg) != _resume_key(cfg):
        raise ConfigError(f"checkpoint {path} was written with a different configuration")
    state = init_state(cfg)
    state.model.load_state_dict(params)
    state.optimizer.load_state_dict(opt)
    state.mask_rng.bit_generator.state = meta["mask_rng"]
    state.step, state.epoch, state.history = meta["step"], meta["epoch"], meta["history"]
    return state


def _resume_key(cfg: TrainConfig) -> str:
    # checkpoint cadence may change between runs without affecting the trajectory
    text = config_to_ini(cfg)
    return "\n".join(line for line in text.splitlines() if not line.startswith("checkpoint_every"))


# -- loop ----------------------------------------------------------------------


def load_training_pairs(cfg: TrainConfig) -> list[MultiModalPair]:
    if not cfg.data.manifest:
        raise DataError("data.manifest is not set")
    manifest = load_manifest(cfg.data.manifest)
    return load_pairs(manifest, split=cfg.data.train_split)


def train(
    cfg: TrainConfig,
    out_dir,
    pairs: list[MultiModalPair] | None = None,
    resume=None,
    stop_after_epochs: int | None = None,
) -> tuple[Path, Path]:
    """Run the full schedule; returns ``(checkpoint path, metrics path)``.

    ``stop_after_epochs`` ends the run early (after writing a checkpoint) while
    keeping the schedule of the full run; used to produce resumable partial runs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        pairs = load_training_pairs(cfg)
    if not pairs:
        raise DataError("training set is empty")
    dtype = DTYPES[cfg.run.dtype]
    p1, p2 = stack_batch(pairs, cfg.model.patch_size, dtype)
    n = len(pairs)
    o = cfg.optimizer
    min_batch = 2 if cfg.losses.mim else 1
    steps_per_epoch = len(epoch_batches(n, o.batch_size, cfg.run.seed, 0, min_batch))
    total_steps = o.epochs * steps_per_epoch
    warmup_steps = o.warmup_epochs * steps_per_epoch

    state = restore_state(resume, cfg) if resume else init_state(cfg)
    metrics_path = out_dir / "metrics.txt"
    rows = [r for r in state.history if r["step"] < state.step]
    ckpt_path = out_dir / "checkpoint.bin"
    last_epoch = o.epochs if stop_after_epochs is None else min(o.epochs, state.epoch + stop_after_epochs)

    with open(metrics_path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            fh.write(metrics_row(r) + "\n")
        while state.epoch < last_epoch:
            for idx in epoch_batches(n, o.batch_size, cfg.run.seed, state.epoch, min_batch):
                lr = lr_at_step(state.step, total_steps, warmup_steps, o.base_lr)
                train_step(p1[idx], p2[idx], state, cfg, lr)
                fh.write(metrics_row(state.history[-1]) + "\n")
            state.epoch += 1
            fh.flush()
            log.info("epoch %d/%d total=%.4f", state.epoch, o.epochs, state.history[-1]["total"])
            every = cfg.run.checkpoint_every
            if every and state.epoch % every == 0 and state.epoch < o.epochs:
                save_checkpoint(out_dir / f"checkpoint_e{state.epoch:04d}.bin", state, cfg)
    save_checkpoint(ckpt_path, state, cfg)
    return ckpt_path, metrics_path

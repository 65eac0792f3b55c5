"""Patch grids and paired mask plans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DegenerateRatioError, GeometryError, InfeasibleMaskError, ShapeError

MODES = ("identical", "random", "disjoint")


@dataclass
class PatchGrid:
    """Row-major sequence of flattened ``K x K x C`` patches (channel-last)."""

    patches: torch.Tensor  # (..., N, K*K*C)
    grid_side: int
    patch_size: int
    channels: int

    @property
    def num_patches(self) -> int:
        return self.grid_side**2


def patchify(image, patch_size: int) -> PatchGrid:
    """Split an ``H x W x C`` image (or a batch ``B x H x W x C``) into patches.

    Patch ``n`` covers rows ``(n // g) * K ...`` and columns ``(n % g) * K ...``
    where ``g = H / K``.
    """
    x = torch.as_tensor(image)
    if x.dim() not in (3, 4):
        raise GeometryError(f"expected HxWxC or BxHxWxC image, got shape {tuple(x.shape)}")
    h, w, c = x.shape[-3:]
    if h != w:
        raise GeometryError(f"image must be square, got {h}x{w}")
    if patch_size < 1 or h % patch_size:
        raise GeometryError(f"patch size {patch_size} does not divide image side {h}")
    if c < 1:
        raise GeometryError("image needs at least one channel")
    g = h // patch_size
    lead = x.shape[:-3]
    x = x.reshape(*lead, g, patch_size, g, patch_size, c)
    x = x.transpose(-4, -3)  # (..., g, g, K, K, C)
    patches = x.reshape(*lead, g * g, patch_size * patch_size * c)
    return PatchGrid(patches=patches, grid_side=g, patch_size=patch_size, channels=c)


def unpatchify(grid: PatchGrid) -> torch.Tensor:
    p = grid.patches
    k, g = grid.patch_size, grid.grid_side
    if p.shape[-1] % (k * k):
        raise ShapeError(f"patch length {p.shape[-1]} not divisible by K^2={k * k}")
    c = p.shape[-1] // (k * k)
    if p.shape[-2] != g * g:
        raise ShapeError(f"expected {g * g} patches, got {p.shape[-2]}")
    lead = p.shape[:-2]
    x = p.reshape(*lead, g, g, k, k, c).transpose(-4, -3)
    return x.reshape(*lead, g * k, g * k, c)


@dataclass(frozen=True)
class MaskPlan:
    m1: tuple[int, ...]
    m2: tuple[int, ...]
    ratio: float
    mode: str
    num_patches: int

    def to_record(self) -> str:
        """Serialize as ``mode ratio N | m1-csv | m2-csv``."""
        return (
            f"{self.mode} {self.ratio!r} {self.num_patches} | "
            f"{','.join(map(str, self.m1))} | {','.join(map(str, self.m2))}"
        )

    @classmethod
    def from_record(cls, line: str) -> "MaskPlan":
        head, a, b = (part.strip() for part in line.split("|"))
        mode, ratio, n = head.split()
        plan = cls(
            m1=tuple(int(v) for v in a.split(",") if v),
            m2=tuple(int(v) for v in b.split(",") if v),
            ratio=float(ratio),
            mode=mode,
            num_patches=int(n),
        )
        validate_plan(plan)
        return plan


def masked_count(num_patches: int, ratio: float) -> int:
    """Number of masked patches; Python's ``round`` is ties-to-even."""
    if not 0.0 < ratio < 1.0:
        raise DegenerateRatioError(f"masking ratio must lie in (0, 1), got {ratio}")
    m = round(ratio * num_patches)
    if m == 0 or m == num_patches:
        raise DegenerateRatioError(
            f"ratio {ratio} over {num_patches} patches masks {m}; need 0 < masked < N"
        )
    return m


def make_mask_plan(num_patches: int, ratio: float, mode: str, rng: np.random.Generator) -> MaskPlan:
    if mode not in MODES:
        raise ConfigError(f"unknown masking mode {mode!r}; expected one of {MODES}")
    m = masked_count(num_patches, ratio)
    if mode == "disjoint" and 2 * m > num_patches:
        raise InfeasibleMaskError(
            f"disjoint masking needs 2*{m} <= {num_patches} (ratio {ratio} too high)"
        )
    m1 = rng.choice(num_patches, size=m, replace=False)
    if mode == "identical":
        m2 = m1
    elif mode == "random":
        m2 = rng.choice(num_patches, size=m, replace=False)
    else:
        complement = np.setdiff1d(np.arange(num_patches), m1)
        m2 = rng.choice(complement, size=m, replace=False)
    return MaskPlan(
        m1=tuple(sorted(int(i) for i in m1)),
        m2=tuple(sorted(int(i) for i in m2)),
        ratio=ratio,
        mode=mode,
        num_patches=num_patches,
    )


def validate_plan(plan: MaskPlan) -> None:
    m = masked_count(plan.num_patches, plan.ratio)
    for name, idx in (("m1", plan.m1), ("m2", plan.m2)):
        if len(idx) != m:
            raise ValueError(f"{name} has {len(idx)} indices, expected {m}")
        if len(set(idx)) != m:
            raise ValueError(f"{name} has duplicate indices")
        if any(i < 0 or i >= plan.num_patches for i in idx):
            raise ValueError(f"{name} has out-of-range indices")
    if plan.mode == "identical" and plan.m1 != plan.m2:
        raise ValueError("identical plan with m1 != m2")
    if plan.mode == "disjoint" and set(plan.m1) & set(plan.m2):
        raise ValueError("disjoint plan with overlapping index sets")


def plans_to_masks(plans: list[MaskPlan]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack plans into boolean ``(B, N)`` masks (True = masked) for both modalities."""
    n = plans[0].num_patches
    out1 = torch.zeros(len(plans), n, dtype=torch.bool)
    out2 = torch.zeros(len(plans), n, dtype=torch.bool)
    for b, plan in enumerate(plans):
        out1[b, list(plan.m1)] = True
        out2[b, list(plan.m2)] = True
    return out1, out2

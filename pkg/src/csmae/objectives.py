"""Reconstruction and latent-similarity losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .backbone import CsmaeModel
from .errors import NumericError, ShapeError

TERMS = ("umr_1", "umr_2", "cmr_1", "cmr_2", "mde", "mim")


def loss_masked_reconstruction(pred: torch.Tensor, target: torch.Tensor, masked) -> torch.Tensor:
    """Per-element MSE averaged over the masked patches only.

    ``pred``/``target`` are ``(N, P)`` or ``(B, N, P)``. ``masked`` is either a
    bool tensor of shape ``(N,)``/``(B, N)`` or a sequence of masked indices.
    With a batch, the per-sample losses are averaged.
    """
    if pred.shape[-1] != target.shape[-1]:
        raise ShapeError(f"patch length mismatch: {pred.shape[-1]} vs {target.shape[-1]}")
    mask = _as_mask(masked, pred.shape[-2], pred.device)
    if pred.dim() == 3 and mask.dim() == 1:
        mask = mask.expand(pred.shape[0], -1)
    counts = mask.sum(dim=-1)
    if bool((counts == 0).any()):
        raise ShapeError("masked index set is empty")
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    per_sample = (per_patch * mask.to(per_patch.dtype)).sum(dim=-1) / counts.to(per_patch.dtype)
    return per_sample.mean()


def _as_mask(masked, n: int, device) -> torch.Tensor:
    if isinstance(masked, torch.Tensor) and masked.dtype == torch.bool:
        return masked
    mask = torch.zeros(n, dtype=torch.bool, device=device)
    mask[torch.as_tensor(list(masked), dtype=torch.long)] = True
    return mask


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``a.b / (|a||b|)`` along the last dim; zero-norm inputs raise :class:`NumericError`."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericError("cosine similarity of a zero-norm vector")
    return (a * b).sum(dim=-1) / (na * nb)


def pairwise_cosine(c1: torch.Tensor, c2: torch.Tensor) -> torch.Tensor:
    """``S[i, q] = cos(c1[i], c2[q])`` for two ``(B, d)`` batches."""
    n1 = torch.linalg.vector_norm(c1, dim=-1, keepdim=True)
    n2 = torch.linalg.vector_norm(c2, dim=-1, keepdim=True)
    if bool((n1 == 0).any()) or bool((n2 == 0).any()):
        raise NumericError("cosine similarity of a zero-norm vector")
    return (c1 / n1) @ (c2 / n2).T


def loss_mde(c1: torch.Tensor, c2: torch.Tensor) -> torch.Tensor:
    """``-mean_i log(1 + exp(S(c1_i, c2_i)))``; paired samples only, no negatives."""
    if c1.shape[0] != c2.shape[0]:
        raise ShapeError(f"batch size mismatch: {c1.shape[0]} vs {c2.shape[0]}")
    if c1.shape[0] < 1:
        raise ShapeError("empty batch")
    return -torch.nn.functional.softplus(cosine_similarity(c1, c2)).mean()


def loss_mim(
    c1: torch.Tensor,
    c2: torch.Tensor,
    tau: float = 0.5,
    denominator_mode: str = "as-written",
) -> torch.Tensor:
    """Symmetric temperature-scaled cross entropy over in-batch cross-modal pairs.

    ``as-written`` sums the denominator over ``q != i`` only; ``include-positive``
    adds the ``q == i`` term (standard NT-Xent).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if c1.shape[0] != c2.shape[0]:
        raise ShapeError(f"batch size mismatch: {c1.shape[0]} vs {c2.shape[0]}")
    b = c1.shape[0]
    if denominator_mode == "as-written":
        if b < 2:
            raise ShapeError("as-written MIM needs a batch of at least 2")
    elif denominator_mode != "include-positive":
        raise ValueError(f"unknown denominator_mode {denominator_mode!r}")
    if b < 1:
        raise ShapeError("empty batch")
    logits = pairwise_cosine(c1, c2) / tau  # [i, q] = S(c_i^1, c_q^2) / tau
    pos = logits.diagonal()
    if denominator_mode == "as-written":
        eye = torch.eye(b, dtype=torch.bool, device=logits.device)
        denom_logits = logits.masked_fill(eye, float("-inf"))
    else:
        denom_logits = logits
    l12 = torch.logsumexp(denom_logits, dim=1) - pos
    l21 = torch.logsumexp(denom_logits, dim=0) - pos
    return (l12.sum() + l21.sum()) / (2 * b)


@dataclass
class LossFlags:
    umr: bool = True
    cmr: bool = True
    mde: bool = False
    mim: bool = False

    def __post_init__(self) -> None:
        if not (self.umr or self.cmr or self.mde or self.mim):
            raise ValueError("at least one loss term must be enabled")


@dataclass
class LossBreakdown:
    """Per-term loss values; disabled terms are ``None``, not zero."""

    terms: dict[str, torch.Tensor | None]
    weights: dict[str, float] = field(default_factory=lambda: dict.fromkeys(TERMS, 1.0))

    @property
    def total(self) -> torch.Tensor:
        parts = [self.weights.get(k, 1.0) * v for k, v in self.terms.items() if v is not None]
        return torch.stack(parts).sum()

    def __getattr__(self, name):
        terms = self.__dict__.get("terms", {})
        if name in TERMS:
            return terms.get(name)
        raise AttributeError(name)

    def values(self) -> dict[str, float | None]:
        out = {k: (None if self.terms.get(k) is None else float(self.terms[k].detach())) for k in TERMS}
        out["total"] = float(self.total.detach())
        return out

    def check_finite(self) -> None:
        for k, v in self.terms.items():
            if v is not None and not bool(torch.isfinite(v).all()):
                raise NumericError(f"non-finite loss in term {k}: {float(v.detach())}")


def loss_total(
    model: CsmaeModel,
    patches1: torch.Tensor,
    patches2: torch.Tensor,
    mask1: torch.Tensor,
    mask2: torch.Tensor,
    flags: LossFlags | None = None,
    tau: float = 0.5,
    denominator_mode: str = "as-written",
    weights: dict[str, float] | None = None,
) -> LossBreakdown:
    """All enabled objectives for a batch of patchified pairs.

    ``patches{1,2}`` are ``(B, N, P_j)``; ``mask{1,2}`` are ``(B, N)`` bool
    (True = masked). Uni-modal reconstruction of modality ``j`` decodes its
    own latents; cross-modal reconstruction decodes the other modality's
    latents (mask tokens at the *source* plan's positions) and is scored on
    modality ``j``'s masked patches.
    """
    flags = flags or LossFlags()
    z1, cls1 = model.encode_visible(patches1, mask1, "S1")
    z2, cls2 = model.encode_visible(patches2, mask2, "S2")
    terms: dict[str, torch.Tensor | None] = dict.fromkeys(TERMS)
    if flags.umr:
        terms["umr_1"] = loss_masked_reconstruction(model.decode(z1, mask1, "S1", "S1"), patches1, mask1)
        terms["umr_2"] = loss_masked_reconstruction(model.decode(z2, mask2, "S2", "S2"), patches2, mask2)
    if flags.cmr:
        terms["cmr_1"] = loss_masked_reconstruction(model.decode(z2, mask2, "S1", "S2"), patches1, mask1)
        terms["cmr_2"] = loss_masked_reconstruction(model.decode(z1, mask1, "S2", "S1"), patches2, mask2)
    if flags.mde or flags.mim:
        c1 = model.pool(z1, cls1)
        c2 = model.pool(z2, cls2)
        if flags.mde:
            terms["mde"] = loss_mde(c1, c2)
        if flags.mim:
            terms["mim"] = loss_mim(c1, c2, tau, denominator_mode)
    w = dict.fromkeys(TERMS, 1.0)
    if weights:
        w.update(weights)
    return LossBreakdown(terms=terms, weights=w)


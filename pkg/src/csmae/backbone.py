"""Cross-sensor masked autoencoder network.

Layout of the parameter state (stable names, used by checkpoints and by
:func:`parameter_partition`)::

    patch_embed.{S1,S2}          per-modality affine patch projection
    cls_token.{shared|S1,S2}     only when pooling == "CLS"
    sensor.{shared|S1,S2}.N      multi-sensor encoder, depth - cross_depth blocks
    cross.N                      cross-sensor encoder, cross_depth blocks
    enc_norm
    decoder.{shared|S1,S2}       embed projection + blocks + norm
    mask_token[.S1,S2]
    head.{S1,S2}                 pixel projection per modality

Positional tables are fixed sinusoids stored as buffers, not parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .masking import patchify

MODALITIES = ("S1", "S2")
VARIANTS = ("CECD", "CESD", "SECD", "SESD")

# name -> (dim, depth, heads)
# ViT-L24 uses 12 blocks at width 1024; that depth is what matches the
# reference 181 M CECD size (24 blocks would give ~332 M).
VIT_VARIANTS = {
    "ViT-Ti12": (192, 12, 3),
    "ViT-S12": (384, 12, 6),
    "ViT-B12": (768, 12, 12),
    "ViT-L24": (1024, 12, 16),
}


@dataclass
class ModelConfig:
    variant: str = "CECD"
    vit_variant: str = "ViT-B12"
    # encoder geometry; taken from VIT_VARIANTS unless vit_variant == "custom"
    dim: int | None = None
    depth: int | None = None
    heads: int | None = None
    cross_depth: int = 2
    decoder_dim: int = 512
    decoder_depth: int = 8
    decoder_heads: int = 16
    mlp_ratio: float = 4.0
    patch_size: int = 15
    channels: dict[str, int] = field(default_factory=lambda: {"S1": 2, "S2": 10})
    image_side: int = 120
    pooling: str = "GAP"
    per_modality_mask_token: bool = False

    def __post_init__(self) -> None:
        if self.vit_variant != "custom":
            if self.vit_variant not in VIT_VARIANTS:
                raise ConfigError(f"unknown vit_variant {self.vit_variant!r}")
            self.dim, self.depth, self.heads = VIT_VARIANTS[self.vit_variant]
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if None in (self.dim, self.depth, self.heads):
            raise ConfigError("custom vit_variant needs dim, depth and heads")
        if not 0 < self.cross_depth <= self.depth:
            raise ConfigError(f"cross_depth must satisfy 0 < {self.cross_depth} <= depth {self.depth}")
        if self.dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ConfigError("embedding dims must be divisible by head counts")
        if self.dim % 2 or self.decoder_dim % 2:
            raise ConfigError("sinusoidal positional encoding needs even dims")
        if self.pooling not in ("GAP", "CLS"):
            raise ConfigError(f"pooling must be GAP or CLS, got {self.pooling!r}")
        if self.image_side % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_side {self.image_side}")
        if set(self.channels) != set(MODALITIES):
            raise ConfigError(f"channels must name exactly {MODALITIES}")

    @property
    def sensor_depth(self) -> int:
        return self.depth - self.cross_depth

    @property
    def specific_encoder(self) -> bool:
        return self.variant[0] == "S"

    @property
    def specific_decoder(self) -> bool:
        return self.variant[2] == "S"

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    def patch_dim(self, modality: str) -> int:
        return self.patch_size**2 * self.channels[modality]

    def to_dict(self) -> dict:
        return asdict(self)

    def with_updates(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def positional_encoding(num_positions: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoid table: ``PE[n, 2i] = sin(n / 10000^(2i/d))``, ``PE[n, 2i+1] = cos(...)``."""
    if dim % 2:
        raise ConfigError(f"positional encoding dim must be even, got {dim}")
    pos = torch.arange(num_positions, dtype=torch.float64)[:, None]
    freq = 10000.0 ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.empty(num_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(dtype)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    """Pre-norm transformer layer: ``x + MHSA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class Decoder(nn.Module):
    def __init__(self, enc_dim: int, dim: int, depth: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.embed = nn.Linear(enc_dim, dim)
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)


class CsmaeModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        d, dd = cfg.dim, cfg.decoder_dim
        n = cfg.num_patches
        enc_paths = MODALITIES if cfg.specific_encoder else ("shared",)
        dec_paths = MODALITIES if cfg.specific_decoder else ("shared",)

        self.patch_embed = nn.ModuleDict({m: nn.Linear(cfg.patch_dim(m), d) for m in MODALITIES})
        self.register_buffer("pos_embed", positional_encoding(n, d), persistent=False)
        self.register_buffer("dec_pos_embed", positional_encoding(n, dd), persistent=False)
        if cfg.pooling == "CLS":
            self.cls_token = nn.ParameterDict({p: nn.Parameter(torch.zeros(d)) for p in enc_paths})
        else:
            self.cls_token = None
        self.sensor = nn.ModuleDict(
            {
                p: nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.sensor_depth))
                for p in enc_paths
            }
        )
        self.cross = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.cross_depth))
        self.enc_norm = nn.LayerNorm(d)
        self.decoder = nn.ModuleDict(
            {p: Decoder(d, dd, cfg.decoder_depth, cfg.decoder_heads, cfg.mlp_ratio) for p in dec_paths}
        )
        if cfg.per_modality_mask_token:
            self.mask_token = nn.ParameterDict({m: nn.Parameter(torch.zeros(dd)) for m in MODALITIES})
        else:
            self.mask_token = nn.Parameter(torch.zeros(dd))
        self.head = nn.ModuleDict({m: nn.Linear(dd, cfg.patch_dim(m)) for m in MODALITIES})
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.trunc_normal_(mod.weight, std=0.02)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.LayerNorm):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
        tokens = [self.mask_token] if isinstance(self.mask_token, nn.Parameter) else list(self.mask_token.values())
        if self.cls_token is not None:
            tokens += list(self.cls_token.values())
        for t in tokens:
            nn.init.trunc_normal_(t, std=0.02)

    # -- paths -----------------------------------------------------------
    def _check_modality(self, modality: str) -> None:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")

    def _enc_path(self, modality: str) -> str:
        return modality if self.config.specific_encoder else "shared"

    def _dec_path(self, modality: str) -> str:
        return modality if self.config.specific_decoder else "shared"

    def _mask_token(self, source: str) -> torch.Tensor:
        if isinstance(self.mask_token, nn.Parameter):
            return self.mask_token
        return self.mask_token[source]

    # -- forward pieces --------------------------------------------------
    def embed_patches(self, patches: torch.Tensor, modality: str) -> torch.Tensor:
        """``(B, N, K*K*C) -> (B, N, d)``: modality affine map plus shared sinusoid."""
        self._check_modality(modality)
        expected = self.config.patch_dim(modality)
        if patches.shape[-1] != expected:
            raise ShapeError(
                f"{modality} patches must have length {expected}, got {patches.shape[-1]}"
            )
        n = patches.shape[-2]
        return self.patch_embed[modality](patches) + self.pos_embed[:n].to(patches.dtype)

    def encode(self, tokens: torch.Tensor, modality: str) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Run visible tokens ``(B, U, d)`` through sensor and cross-sensor stacks.

        Returns normalized patch latents ``(B, U, d)`` and the CLS latent
        ``(B, d)`` (``None`` without a CLS token).
        """
        self._check_modality(modality)
        if tokens.shape[-2] == 0:
            raise ShapeError("encode needs at least one visible token")
        path = self._enc_path(modality)
        x = tokens
        if self.cls_token is not None:
            cls = self.cls_token[path].to(x.dtype).expand(x.shape[0], 1, -1)
            x = torch.cat([cls, x], dim=1)
        for blk in self.sensor[path]:
            x = blk(x)
        for blk in self.cross:
            x = blk(x)
        x = self.enc_norm(x)
        if self.cls_token is not None:
            return x[:, 1:], x[:, 0]
        return x, None

    def encode_visible(
        self, patches: torch.Tensor, masked: torch.Tensor, modality: str
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Embed all patches, keep the unmasked ones (ascending position order), encode."""
        tokens = self.embed_patches(patches, modality)
        idx = visible_index(masked)
        visible = torch.gather(tokens, 1, idx[..., None].expand(-1, -1, tokens.shape[-1]))
        return self.encode(visible, modality)

    def decode(
        self,
        latents: torch.Tensor,
        masked: torch.Tensor,
        target: str,
        source: str | None = None,
    ) -> torch.Tensor:
        """Predict all ``N`` patches of ``target`` from source latents.

        ``latents`` are the encoder outputs at the unmasked positions of
        ``masked`` (a ``(B, N)`` bool tensor of the *source* plan); mask tokens
        fill the masked positions.
        """
        self._check_modality(target)
        source = source or target
        self._check_modality(source)
        b, n = masked.shape
        u = latents.shape[1]
        if u + int(masked[0].sum()) != n:
            raise ShapeError(f"{u} latents + {int(masked[0].sum())} masked positions != {n}")
        dec = self.decoder[self._dec_path(target)]
        x = dec.embed(latents)
        full = self._mask_token(source).to(x.dtype).expand(b, n, -1)
        idx = visible_index(masked)
        full = full.scatter(1, idx[..., None].expand(-1, -1, x.shape[-1]), x)
        full = full + self.dec_pos_embed[:n].to(x.dtype)
        for blk in dec.blocks:
            full = blk(full)
        return self.head[target](dec.norm(full))

    def pool(self, latents: torch.Tensor, cls: torch.Tensor | None, pooling: str | None = None) -> torch.Tensor:
        pooling = pooling or self.config.pooling
        if pooling == "GAP":
            return latents.mean(dim=1)
        if pooling == "CLS":
            if cls is None:
                raise ConfigError("CLS pooling requested on a model built without a CLS token")
            return cls
        raise ConfigError(f"unknown pooling {pooling!r}")

    def extract_feature(self, images, modality: str, pooling: str | None = None) -> torch.Tensor:
        """Encode full, unmasked images (``H x W x C`` or batched) into feature vectors."""
        x = torch.as_tensor(images)
        single = x.dim() == 3
        if single:
            x = x[None]
        x = x.to(self.pos_embed.dtype)
        grid = patchify(x, self.config.patch_size)
        tokens = self.embed_patches(grid.patches, modality)
        latents, cls = self.encode(tokens, modality)
        feat = self.pool(latents, cls, pooling)
        return feat[0] if single else feat


def visible_index(masked: torch.Tensor) -> torch.Tensor:
    """Ascending unmasked positions per row; every row must mask the same count."""
    b, n = masked.shape
    keep = ~masked
    counts = keep.sum(dim=1)
    if not bool((counts == counts[0]).all()):
        raise ShapeError("every row of a batch must mask the same number of patches")
    return keep.nonzero()[:, 1].reshape(b, int(counts[0]))


# -- parameter accounting ------------------------------------------------

PARTITIONS = ("patch_embeds", "sensor_path", "cross_path", "decoders", "heads", "tokens_and_norms")


def _block_params(dim: int, mlp_ratio: float) -> int:
    hidden = int(dim * mlp_ratio)
    return 4 * dim + (3 * dim * dim + 3 * dim) + (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Exact trainable-parameter counts per partition, computed from the config alone."""
    d, dd, r = config.dim, config.decoder_dim, config.mlp_ratio
    n_enc = 2 if config.specific_encoder else 1
    n_dec = 2 if config.specific_decoder else 1
    pdims = [config.patch_dim(m) for m in MODALITIES]
    out = {
        "patch_embeds": sum(p * d + d for p in pdims),
        "sensor_path": n_enc * config.sensor_depth * _block_params(d, r),
        "cross_path": config.cross_depth * _block_params(d, r),
        "decoders": n_dec * (d * dd + dd + config.decoder_depth * _block_params(dd, r)),
        "heads": sum(dd * p + p for p in pdims),
        "tokens_and_norms": (
            2 * d
            + n_dec * 2 * dd
            + (2 if config.per_modality_mask_token else 1) * dd
            + (n_enc * d if config.pooling == "CLS" else 0)
        ),
    }
    out["total"] = sum(out.values())
    return out


def parameter_partition(name: str) -> str:
    """Map a parameter name of :class:`CsmaeModel` to its accounting partition."""
    root = name.split(".")[0]
    if root == "patch_embed":
        return "patch_embeds"
    if root == "sensor":
        return "sensor_path"
    if root == "cross":
        return "cross_path"
    if root == "decoder":
        return "tokens_and_norms" if ".norm." in name else "decoders"
    if root == "head":
        return "heads"
    if root in ("enc_norm", "mask_token", "cls_token"):
        return "tokens_and_norms"
    raise KeyError(name)


def measured_parameters(model: nn.Module) -> dict[str, int]:
    """Per-partition counts taken from an instantiated model."""
    out = dict.fromkeys(PARTITIONS, 0)
    for name, p in model.named_parameters():
        out[parameter_partition(name)] += p.numel()
    out["total"] = sum(out.values())
    return out


def format_breakdown(counts: dict[str, int]) -> str:
    lines = [f"{k:<18}{v:>14,d}  ({v / 1e6:.2f} M)" for k, v in counts.items()]
    return "\n".join(lines)


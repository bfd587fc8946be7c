"""Toy transformer noise predictor with interceptable self-attention sites.

Three pre-norm blocks labelled encoder, middle and decoder stand in for the
places of a U-Net. Every block runs self-attention, cross-attention to the
prompt embedding, then a feed-forward layer. Self-attention K/V can be
replaced per site through an override, which is how content-preserving
attention is injected.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

import torch
from torch import nn

from .numerics import DimensionError, scaled_dot_attention


class BlockPlace(str, enum.Enum):
    ENCODER = "encoder"
    MIDDLE = "middle"
    DECODER = "decoder"


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    channels: int = 3
    patch: int = 2
    d_model: int = 64
    heads: int = 4
    d_head: int = 16
    d_text: int = 32
    time_embed_dim: int = 64
    ffn_mult: int = 4
    max_prompt: int = 8
    vocab: int = 14
    blocks: tuple[BlockPlace, ...] = (BlockPlace.ENCODER, BlockPlace.MIDDLE, BlockPlace.DECODER)

    def __post_init__(self) -> None:
        if self.d_model != self.heads * self.d_head:
            raise ValueError("d_model must equal heads * d_head")
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if sorted(self.blocks) != sorted(BlockPlace):
            raise ValueError("need exactly one block per place")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_json(self) -> dict:
        d = asdict(self)
        d["blocks"] = [b.value for b in self.blocks]
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "DenoiserConfig":
        d = dict(d)
        d["blocks"] = tuple(BlockPlace(b) for b in d["blocks"])
        return cls(**d)


SiteId = str
KV = tuple[torch.Tensor, torch.Tensor]
# A hook receives (site, native K, native V) and returns the K/V to attend with.
KVHook = Callable[[SiteId, torch.Tensor, torch.Tensor], KV]
AttnOverride = Union[Mapping[SiteId, KV], KVHook]


def site_id(place: BlockPlace, layer: int = 0) -> SiteId:
    return f"{place.value}.{layer}"


def attention_sites(cfg: DenoiserConfig) -> list[tuple[SiteId, BlockPlace]]:
    return [(site_id(p), p) for p in cfg.blocks]


def patchify(img: torch.Tensor, patch: int = 2) -> torch.Tensor:
    """``[..., H, W, C]`` image to ``[..., (H/p)*(W/p), p*p*C]`` tokens, row-major."""
    if img.dim() < 3:
        raise DimensionError(f"expected [..., H, W, C], got {tuple(img.shape)}")
    *lead, h, w, c = img.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    x = img.reshape(*lead, h // patch, patch, w // patch, patch, c)
    x = x.transpose(-4, -3)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: torch.Tensor, patch: int = 2, channels: int = 3) -> torch.Tensor:
    *lead, n, dim = tokens.shape
    g = math.isqrt(n)
    if g * g != n or dim != patch * patch * channels:
        raise DimensionError(f"cannot unpatchify tokens of shape {tuple(tokens.shape)}")
    x = tokens.reshape(*lead, g, g, patch, patch, channels)
    x = x.transpose(-4, -3)
    return x.reshape(*lead, g * patch, g * patch, channels)


def grid_positions(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2D sin/cos position code: half the channels encode the row, half the column."""
    rows = torch.arange(grid).repeat_interleave(grid)
    cols = torch.arange(grid).repeat(grid)
    return torch.cat([sinusoid(rows, dim // 2), sinusoid(cols, dim // 2)], dim=-1)


def sinusoid(t: torch.Tensor | int, dim: int) -> torch.Tensor:
    """Sin/cos features: ``[sin(t w_i) ..., cos(t w_i) ...]`` with ``w_i = 10000^(-i/half)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1)
    ang = t * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1).to(torch.get_default_dtype())


class SelfAttention(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.q = nn.Linear(cfg.d_model, cfg.d_model)
        self.k = nn.Linear(cfg.d_model, cfg.d_model)
        self.v = nn.Linear(cfg.d_model, cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.cfg.heads, self.cfg.d_head).transpose(-3, -2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        *lead, h, n, d = x.shape
        return x.transpose(-3, -2).reshape(*lead, n, h * d)

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return self.out(self._merge(scaled_dot_attention(self._split(q), self._split(k), self._split(v))))


class CrossAttention(SelfAttention):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__(cfg)
        self.k = nn.Linear(cfg.d_text, cfg.d_model)
        self.v = nn.Linear(cfg.d_text, cfg.d_model)


class Block(nn.Module):
    """Pre-norm block with adaLN-Zero time conditioning.

    The time embedding sets a scale, shift and residual gate per sublayer.
    All three start at zero, so a fresh block is the identity map.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.attn = SelfAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.cross = CrossAttention(cfg)
        self.norm3 = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ffn_mult * cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.ffn_mult * cfg.d_model, cfg.d_model),
        )
        self.modulation = nn.Linear(cfg.d_model, 9 * cfg.d_model)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, h, c, temb, site, override, record):
        s1, b1, g1, s2, b2, g2, s3, b3, g3 = self.modulation(temb).chunk(9, dim=-1)
        x = self.norm1(h) * (1 + s1) + b1
        q, k, v = self.attn.q(x), self.attn.k(x), self.attn.v(x)
        record[site] = (k, v)
        if override is not None:
            k, v = _apply_override(override, site, k, v)
        h = h + g1 * self.attn.attend(q, k, v)
        x = self.norm2(h) * (1 + s2) + b2
        h = h + g2 * self.cross.attend(self.cross.q(x), self.cross.k(c), self.cross.v(c))
        return h + g3 * self.ffn(self.norm3(h) * (1 + s3) + b3)


def _apply_override(override: AttnOverride, site: SiteId, k: torch.Tensor, v: torch.Tensor) -> KV:
    if callable(override):
        new = override(site, k, v)
        if new is None:
            return k, v
    else:
        new = override.get(site)
        if new is None:
            return k, v
    nk, nv = new
    if nk.shape[-2:] != k.shape[-2:] or nv.shape[-2:] != v.shape[-2:]:
        raise DimensionError(
            f"override at {site}: got K{tuple(nk.shape)} V{tuple(nv.shape)}, "
            f"native K{tuple(k.shape)} V{tuple(v.shape)}"
        )
    return nk, nv


class Denoiser(nn.Module):
    """``eps_theta(z_t, t, c)`` on 16x16x3 images in [-1, 1].

    The output is ``sqrt(1 - alpha_bar_t) * z_t + sqrt(alpha_bar_t) * net``,
    so ``net`` predicts the unit-scale velocity. At high noise the true
    epsilon is almost ``z_t`` itself and ``net`` is close to minus the clean
    image, which is where the prompt decides the layout.
    """

    def __init__(self, cfg: DenoiserConfig | None = None, alpha_bar: Sequence[float] | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        if alpha_bar is None:
            from .scheduler import make_schedule

            alpha_bar = make_schedule().alpha_bar
        ab = torch.as_tensor(np.asarray(alpha_bar, dtype=np.float64))
        self.T_train = len(ab) - 1
        self.register_buffer("skip_scale", (1.0 - ab).sqrt().to(torch.get_default_dtype()), persistent=False)
        self.register_buffer("net_scale", ab.sqrt().to(torch.get_default_dtype()), persistent=False)
        self.patch_in = nn.Linear(cfg.patch_dim, cfg.d_model)
        self.register_buffer("pos", grid_positions(cfg.grid, cfg.d_model), persistent=False)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.d_model),
        )
        self.blocks = nn.ModuleDict({p.value: Block(cfg) for p in cfg.blocks})
        self.token_table = nn.Parameter(torch.randn(cfg.vocab, cfg.d_text))
        self.prompt_pool = nn.Linear(cfg.d_text, cfg.d_model)
        self.norm_out = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.out_modulation = nn.Linear(cfg.d_model, 2 * cfg.d_model)
        self.patch_out = nn.Linear(cfg.d_model, cfg.patch_dim)
        for layer in (self.out_modulation, self.patch_out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def time_embed(self, t: torch.Tensor | int) -> torch.Tensor:
        tt = torch.as_tensor(t)
        if bool(((tt < 1) | (tt > self.T_train)).any()):
            raise ValueError(f"time step {t} outside [1, {self.T_train}]")
        return self.time_mlp(sinusoid(tt, self.cfg.time_embed_dim))

    def forward(
        self,
        zt: torch.Tensor,
        t: torch.Tensor | int,
        c: torch.Tensor,
        override: AttnOverride | None = None,
    ) -> tuple[torch.Tensor, dict[SiteId, KV]]:
        """Predict noise; also return the natively computed self-attention K/V per site.

        ``zt`` is ``[H, W, C]`` or ``[B, H, W, C]``; ``c`` is ``[n_tok, d_text]``
        or ``[B, n_tok, d_text]``; ``t`` is an int or a ``[B]`` tensor.
        """
        cfg = self.cfg
        if zt.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(f"bad image shape {tuple(zt.shape)}")
        if c.shape[-1] != cfg.d_text or c.shape[-2] > cfg.max_prompt:
            raise DimensionError(f"bad prompt embedding shape {tuple(c.shape)}")
        batched = zt.dim() == 4
        # the mean prompt row joins the time embedding, so the prompt also drives modulation
        temb = torch.nn.functional.silu(self.time_embed(t) + self.prompt_pool(c.mean(dim=-2)))
        if batched:
            temb = temb.expand(zt.shape[0], -1).unsqueeze(1)
        h = self.patch_in(patchify(zt, cfg.patch)) + self.pos
        record: dict[SiteId, KV] = {}
        skip = None
        for place in cfg.blocks:
            if place is BlockPlace.DECODER and skip is not None:
                h = h + skip
            h = self.blocks[place.value](h, c, temb, site_id(place), override, record)
            if place is BlockPlace.ENCODER:
                skip = h
        scale, shift = self.out_modulation(temb).chunk(2, dim=-1)
        out = unpatchify(self.patch_out(self.norm_out(h) * (1 + scale) + shift), cfg.patch, cfg.channels)
        tt = torch.as_tensor(t)
        skip, gain = self.skip_scale[tt], self.net_scale[tt]
        if batched:
            skip, gain = skip.reshape(-1, 1, 1, 1), gain.reshape(-1, 1, 1, 1)
        return skip * zt + gain * out, record

    def sites(self) -> list[tuple[SiteId, BlockPlace]]:
        return attention_sites(self.cfg)

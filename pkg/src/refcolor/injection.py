"""Reference injection: mask-gated background injection, style modulation, split cross-attention."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Thresholds:
    ts_s: float = 0.5
    ts_r: float = 0.5

    def __post_init__(self):
        for name in ("ts_s", "ts_r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class InjectionBundle:
    """Everything the denoiser consumes besides ``(z_t, t, sketch)``.

    A bundle with every optional field left as ``None`` is the vanilla mode.
    """

    z_bg: list[torch.Tensor] | None = None
    z_style: torch.Tensor | None = None
    sketch_masks: list[torch.Tensor] | None = None
    ref_mask_token_flags: torch.Tensor | None = None
    thresholds: Thresholds = field(default_factory=Thresholds)
    lora_active: bool = False

    def __post_init__(self):
        if self.z_bg is not None and (self.sketch_masks is None or self.ref_mask_token_flags is None):
            raise ValueError("background path requires sketch_masks and ref_mask_token_flags")

    @property
    def is_vanilla(self) -> bool:
        return (
            self.z_bg is None
            and self.z_style is None
            and self.sketch_masks is None
            and self.ref_mask_token_flags is None
        )

    @property
    def split_active(self) -> bool:
        return self.ref_mask_token_flags is not None


# -- masks ------------------------------------------------------------------


def _as_bchw(mask: torch.Tensor) -> torch.Tensor:
    mask = torch.as_tensor(mask)
    if mask.ndim == 2:
        return mask[None, None]
    if mask.ndim == 3:
        return mask[:, None] if mask.shape[0] != 1 else mask[None]
    if mask.ndim == 4 and mask.shape[1] == 1:
        return mask
    raise ValueError(f"expected a single-channel mask, got shape {tuple(mask.shape)}")


def downsample_mask(mask: torch.Tensor, level_shape: Sequence[int]) -> torch.Tensor:
    """Area-average ``mask`` down to ``level_shape``; returns ``(B, 1, h, w)``."""
    m = _as_bchw(mask).to(torch.float32)
    H, W = m.shape[-2:]
    h, w = level_shape
    if H % h or W % w or H // h != W // w:
        raise ValueError(f"cannot pool {H}x{W} to {h}x{w} with an integer square window")
    k = H // h
    if k == 1:
        return m.clone()
    return F.avg_pool2d(m, kernel_size=k, stride=k)


def mask_pyramid(mask: torch.Tensor, level_shapes: Sequence[Sequence[int]]) -> list[torch.Tensor]:
    return [downsample_mask(mask, s) for s in level_shapes]


def token_flags(ref_mask: torch.Tensor, grid: int, ts_r: float) -> torch.Tensor:
    """Flag each patch token as foreground when its mean mask value exceeds ``ts_r``."""
    m = downsample_mask(ref_mask, (grid, grid))
    return m.flatten(1) > ts_r


# -- attention primitives ------------------------------------------------------


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, key_mask: torch.Tensor | None = None):
    """Multi-head softmax attention. ``key_mask`` is ``(B, n)`` with True for visible keys."""
    B, Lq, inner = q.shape
    n = k.shape[1]
    dh = inner // heads
    q = q.reshape(B, Lq, heads, dh).transpose(1, 2)
    k = k.reshape(B, n, heads, dh).transpose(1, 2)
    v = v.reshape(B, n, heads, dh).transpose(1, 2)
    logits = (q @ k.transpose(-1, -2)) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = logits.softmax(dim=-1)
    return (weights @ v).transpose(1, 2).reshape(B, Lq, inner)


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class LoraAdapter(nn.Module):
    """Low-rank additive delta ``x -> up(down(x)) * alpha / rank``; zero at init."""

    def __init__(self, d_in: int, d_out: int, rank: int = 4, alpha: float = 4.0):
        super().__init__()
        self.rank = rank
        self.scaling = alpha / rank
        self.down = nn.Linear(d_in, rank, bias=False)
        self.up = nn.Linear(rank, d_out, bias=False)
        nn.init.kaiming_uniform_(self.down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.up.weight)

    def forward(self, x):
        return self.up(self.down(x)) * self.scaling


@dataclass
class SplitSpec:
    """Per-call split-attention inputs for one attention layer."""

    query_fg: torch.Tensor  # (B, L) bool
    token_fg: torch.Tensor  # (B, n) bool
    lora: Mapping[str, LoraAdapter] | None = None
    lora_active: bool = True


class CrossAttention(nn.Module):
    """Pre-norm cross-attention from spatial features to reference tokens, with residual."""

    def __init__(self, channels: int, context_dim: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.heads = heads
        self.context_dim = context_dim
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, h: torch.Tensor, tokens: torch.Tensor, split: SplitSpec | None = None):
        if tokens.shape[-1] != self.context_dim:
            raise ValueError(f"token width {tokens.shape[-1]} != {self.context_dim}")
        B, C, H, W = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)
        q, k, v = self.to_q(x), self.to_k(tokens), self.to_v(tokens)
        if split is None:
            out = attend(q, k, v, self.heads)
        else:
            out = _split_attend(self, x, tokens, q, k, v, split)
        out = self.to_out(out).transpose(1, 2).reshape(B, C, H, W)
        return h + out


def _with_fallback(key_fg: torch.Tensor) -> torch.Tensor:
    empty = ~key_fg.any(dim=1, keepdim=True)
    return key_fg | empty


def _split_attend(layer: CrossAttention, x, tokens, q, k, v, split: SplitSpec):
    if split.token_fg.shape != tokens.shape[:2]:
        raise ValueError(f"token flags {tuple(split.token_fg.shape)} do not match tokens {tuple(tokens.shape[:2])}")
    if split.query_fg.shape != x.shape[:2]:
        raise ValueError(f"query mask {tuple(split.query_fg.shape)} does not match queries {tuple(x.shape[:2])}")
    fg_keys = _with_fallback(split.token_fg)
    bg_keys = _with_fallback(~split.token_fg)
    out_fg = attend(q, k, v, layer.heads, fg_keys)
    if split.lora is not None and split.lora_active:
        q = q + split.lora["q"](x)
        k = k + split.lora["k"](tokens)
        v = v + split.lora["v"](tokens)
    out_bg = attend(q, k, v, layer.heads, bg_keys)
    return torch.where(split.query_fg[..., None], out_fg, out_bg)


def split_cross_attention(
    layer: CrossAttention,
    queries: torch.Tensor,
    local: torch.Tensor,
    mask: torch.Tensor,
    flags: torch.Tensor,
    thresholds: Thresholds,
    lora: Mapping[str, LoraAdapter] | None = None,
    lora_active: bool = True,
) -> torch.Tensor:
    """Foreground queries see foreground tokens, background queries see background tokens.

    Background queries use the base projections plus the LoRA deltas. An empty
    token partition falls back to the full token set for that query group.
    """
    m = _as_bchw(mask)
    if m.shape[-2:] != queries.shape[-2:]:
        raise ValueError("mask resolution must match the query features")
    query_fg = (m.flatten(1) > thresholds.ts_s)
    if query_fg.shape[0] == 1 and queries.shape[0] > 1:
        query_fg = query_fg.expand(queries.shape[0], -1)
    spec = SplitSpec(query_fg=query_fg, token_fg=flags.to(torch.bool), lora=lora, lora_active=lora_active)
    return layer(queries, local, spec)


# -- background injection --------------------------------------------------------


class BackgroundInjection(nn.Module):
    """Cross-attention block W(z_skip, z_bg): skip positions query background-encoder features."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.GroupNorm(_groups(channels), channels)
        self.norm_kv = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def compose(self, z_skip: torch.Tensor, z_bg: torch.Tensor) -> torch.Tensor:
        if z_skip.shape != z_bg.shape:
            raise ValueError(f"z_skip {tuple(z_skip.shape)} and z_bg {tuple(z_bg.shape)} differ")
        B, C, H, W = z_skip.shape
        xq = self.norm_q(z_skip).flatten(2).transpose(1, 2)
        xkv = self.norm_kv(z_bg).flatten(2).transpose(1, 2)
        out = attend(self.to_q(xq), self.to_k(xkv), self.to_v(xkv), self.heads)
        return z_skip + self.to_out(out).transpose(1, 2).reshape(B, C, H, W)

    def forward(self, z_skip, z_bg, mask, ts_s: float):
        return background_inject(z_skip, z_bg, mask, ts_s, self)


def background_inject(z_skip, z_bg, mask, ts_s: float, block: BackgroundInjection):
    """Keep ``z_skip`` where the sketch mask exceeds ``ts_s``; elsewhere use ``W(z_skip, z_bg)``."""
    if not 0.0 <= ts_s <= 1.0:
        raise ValueError(f"ts_s must lie in [0, 1], got {ts_s}")
    m = _as_bchw(mask)
    if m.shape[-2:] != z_skip.shape[-2:]:
        raise ValueError("mask resolution must match z_skip")
    composed = block.compose(z_skip, z_bg)
    return torch.where(m > ts_s, z_skip, composed)


# -- style modulation ---------------------------------------------------------------


def style_modulate(z: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Adaptive affine modulation ``z * (1 + scale) + shift`` with per-channel scale/shift."""
    if scale.ndim == 2:
        scale = scale[:, :, None, None]
    if shift.ndim == 2:
        shift = shift[:, :, None, None]
    if scale.shape[1] != z.shape[1] or shift.shape[1] != z.shape[1]:
        raise ValueError("scale/shift channels must match z")
    return z * (1 + scale) + shift


def global_average_pool(z_style: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel, shifted by the first pixel so constant maps pool exactly."""
    anchor = z_style[:, :, :1, :1]
    return (anchor + (z_style - anchor).mean(dim=(2, 3), keepdim=True)).flatten(1)


class StyleInjection(nn.Module):
    """Timestep-conditioned projections from pooled style features to (scale, shift)."""

    def __init__(self, style_channels: int, temb_dim: int, channels: int):
        super().__init__()
        self.style_channels = style_channels
        self.to_scale = nn.Linear(style_channels + temb_dim, channels)
        self.to_shift = nn.Linear(style_channels + temb_dim, channels)
        for lin in (self.to_scale, self.to_shift):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def projections(self, pooled: torch.Tensor, temb: torch.Tensor):
        inp = torch.cat([pooled, temb], dim=1)
        return self.to_scale(inp), self.to_shift(inp)

    def forward(self, z, z_style, temb):
        if z_style.shape[1] != self.style_channels:
            raise ValueError(f"style channels {z_style.shape[1]} != {self.style_channels}")
        scale, shift = self.projections(global_average_pool(z_style), temb)
        return style_modulate(z, scale, shift)

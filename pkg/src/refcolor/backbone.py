"""Networks: toy VAE, frozen reference embedder, sketch encoder and the denoising U-Net."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .injection import (
    BackgroundInjection,
    CrossAttention,
    InjectionBundle,
    LoraAdapter,
    SplitSpec,
    StyleInjection,
    _groups,
    attend,
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    vae_factor: int = 4
    latent_channels: int = 4
    vae_channels: tuple = (16, 32, 64)
    unet_channels: tuple = (32, 64, 128)
    attention_levels: tuple = (1, 2)
    embed_dim: int = 64
    n_tokens: int = 16
    embedder_depth: int = 1
    embedder_heads: int = 4
    attention_heads: int = 4
    sketch_channels: int = 16
    lora_rank: int = 4
    lora_alpha: float = 4.0
    embedder_seed: int = 1234
    model_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        ints = ("image_size", "vae_factor", "latent_channels", "embed_dim", "n_tokens",
                "attention_heads", "sketch_channels", "lora_rank")
        for name in ints:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embedder_depth < 0:
            raise ValueError("embedder_depth must be >= 0")
        if any(c <= 0 for c in self.unet_channels + self.vae_channels):
            raise ValueError("channel counts must be positive")
        n_down = int(round(math.log2(self.vae_factor)))
        if 2 ** n_down != self.vae_factor:
            raise ValueError("vae_factor must be a power of two")
        if len(self.vae_channels) != n_down + 1:
            raise ValueError(f"vae_channels needs {n_down + 1} entries for factor {self.vae_factor}")
        if self.image_size % self.vae_factor:
            raise ValueError("image_size must be divisible by vae_factor")
        if self.latent_size % (2 ** (len(self.unet_channels) - 1)):
            raise ValueError("latent size must be divisible by 2**(levels-1)")
        if not set(self.attention_levels) <= set(range(len(self.unet_channels))):
            raise ValueError("attention_levels must be a subset of U-Net levels")
        grid = math.isqrt(self.n_tokens)
        if grid * grid != self.n_tokens or self.image_size % grid:
            raise ValueError("n_tokens must be a square grid dividing image_size")
        if any(c % self.attention_heads for c in self.unet_channels):
            raise ValueError("U-Net channels must be divisible by attention_heads")
        if self.embed_dim % self.embedder_heads:
            raise ValueError("embed_dim must be divisible by embedder_heads")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.vae_factor

    @property
    def token_grid(self) -> int:
        return math.isqrt(self.n_tokens)

    @property
    def temb_dim(self) -> int:
        return 4 * self.unet_channels[0]

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        return [(self.latent_size >> l, self.latent_size >> l) for l in range(len(self.unet_channels))]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding, sin lanes first then cos lanes."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = torch.as_tensor(t, dtype=torch.float32).reshape(-1)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None and temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


# -- VAE ------------------------------------------------------------------------


class ToyVAE(nn.Module):
    """Small convolutional VAE. ``encode`` returns the scaled posterior mean."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.vae_channels
        self.latent_channels = cfg.latent_channels
        self.factor = cfg.vae_factor
        enc = [nn.Conv2d(3, ch[0], 3, padding=1), ResBlock(ch[0], ch[0])]
        for i in range(1, len(ch)):
            enc += [Downsample(ch[i - 1], ch[i]), ResBlock(ch[i], ch[i])]
        self.encoder = nn.ModuleList(enc)
        self.enc_out = nn.Sequential(nn.GroupNorm(_groups(ch[-1]), ch[-1]), nn.SiLU(),
                                     nn.Conv2d(ch[-1], 2 * cfg.latent_channels, 3, padding=1))
        dec = [nn.Conv2d(cfg.latent_channels, ch[-1], 3, padding=1), ResBlock(ch[-1], ch[-1])]
        for i in range(len(ch) - 1, 0, -1):
            dec += [Upsample(ch[i], ch[i - 1]), ResBlock(ch[i - 1], ch[i - 1])]
        self.decoder = nn.ModuleList(dec)
        self.dec_out = nn.Sequential(nn.GroupNorm(_groups(ch[0]), ch[0]), nn.SiLU(),
                                     nn.Conv2d(ch[0], 3, 3, padding=1))
        # multiplies the posterior mean so diffusion latents have roughly unit variance
        self.register_buffer("latent_scale", torch.ones(()))

    def _check(self, x, channels):
        if x.ndim != 4 or x.shape[1] != channels:
            raise ValueError(f"expected (B, {channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ValueError(f"spatial size must be divisible by {self.factor}")

    def posterior(self, x: torch.Tensor):
        self._check(x, 3)
        h = x * 2 - 1
        for layer in self.encoder:
            h = layer(h)
        mean, logvar = self.enc_out(h).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def decode_raw(self, z_unscaled: torch.Tensor) -> torch.Tensor:
        h = z_unscaled
        for layer in self.decoder:
            h = layer(h)
        return (self.dec_out(h) + 1) / 2

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        mean, _ = self.posterior(x)
        return mean * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"expected (B, {self.latent_channels}, h, w), got {tuple(z.shape)}")
        return self.decode_raw(z / self.latent_scale).clamp(0.0, 1.0)


# -- reference embedder --------------------------------------------------------------


@dataclass
class EmbeddingSet:
    cls: torch.Tensor  # (B, 1, d)
    local: torch.Tensor  # (B, n, d), raster order of patches

    @property
    def d(self) -> int:
        return self.local.shape[-1]

    @property
    def n(self) -> int:
        return self.local.shape[-2]

    def null_like(self) -> "EmbeddingSet":
        return EmbeddingSet(torch.zeros_like(self.cls), torch.zeros_like(self.local))

    def select(self, keep: torch.Tensor) -> "EmbeddingSet":
        """Per-sample: keep tokens where ``keep`` is True, zero them elsewhere."""
        k = keep.to(self.local.dtype)[:, None, None]
        return EmbeddingSet(self.cls * k, self.local * k)


class _SelfAttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        x = x + self.proj(attend(q, k, v, self.heads))
        return x + self.mlp(self.norm2(x))


class ReferenceEmbedder(nn.Module):
    """Frozen, seed-initialized ViT-like encoder producing a CLS token and local patch tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.grid = cfg.token_grid
        self.patch = cfg.image_size // cfg.token_grid
        d = cfg.embed_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.embedder_seed)
            self.patch_proj = nn.Linear(3 * self.patch * self.patch, d)
            self.cls_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
            self.pos = nn.Parameter(torch.randn(1, cfg.n_tokens + 1, d) * 0.02)
            self.blocks = nn.ModuleList(_SelfAttentionBlock(d, cfg.embedder_heads) for _ in range(cfg.embedder_depth))
            self.norm = nn.LayerNorm(d)
        self.requires_grad_(False)

    def forward(self, img: torch.Tensor) -> EmbeddingSet:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ValueError(f"reference must be (B, 3, H, W), got {tuple(img.shape)}")
        if img.shape[-2:] != (self.image_size, self.image_size):
            img = F.interpolate(img, size=(self.image_size, self.image_size), mode="bilinear",
                                align_corners=False, antialias=True)
        B = img.shape[0]
        p = self.patch
        patches = (
            (img * 2 - 1)
            .reshape(B, 3, self.grid, p, self.grid, p)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(B, self.grid * self.grid, 3 * p * p)
        )
        x = torch.cat([self.cls_token.expand(B, -1, -1), self.patch_proj(patches)], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return EmbeddingSet(cls=x[:, :1], local=x[:, 1:])


# -- sketch encoder ---------------------------------------------------------------------


class SketchEncoder(nn.Module):
    """Convolutional pyramid; one feature map per U-Net level, added to encoder activations."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.sketch_channels
        stem = [nn.Conv2d(1, c, 3, padding=1), nn.SiLU()]
        for _ in range(int(round(math.log2(cfg.vae_factor)))):
            stem += [nn.Conv2d(c, c, 3, stride=2, padding=1), nn.SiLU()]
        self.stem = nn.Sequential(*stem)
        self.downs = nn.ModuleList()
        self.outs = nn.ModuleList()
        prev = c
        for l, ch in enumerate(cfg.unet_channels):
            stride = 1 if l == 0 else 2
            self.downs.append(nn.Sequential(nn.Conv2d(prev, ch, 3, stride=stride, padding=1), nn.SiLU()))
            self.outs.append(nn.Conv2d(ch, ch, 3, padding=1))
            prev = ch

    def forward(self, sketch: torch.Tensor) -> list[torch.Tensor]:
        if sketch.ndim != 4 or sketch.shape[1] != 1:
            raise ValueError(f"sketch must be (B, 1, H, W), got {tuple(sketch.shape)}")
        h = self.stem(sketch * 2 - 1)
        feats = []
        for down, out in zip(self.downs, self.outs):
            h = down(h)
            feats.append(out(h))
        return feats


# -- U-Net ---------------------------------------------------------------------------------


def _attn_name(where: str, level: int | None = None) -> str:
    return where if level is None else f"{where}{level}"


def attention_layer_names(cfg: ModelConfig) -> list[str]:
    names = [_attn_name("enc", l) for l in cfg.attention_levels]
    names.append("mid")
    names += [_attn_name("dec", l) for l in sorted(cfg.attention_levels, reverse=True)]
    return names


def attention_layer_level(name: str, cfg: ModelConfig) -> int:
    return len(cfg.unet_channels) - 1 if name == "mid" else int(name[3:])


@dataclass
class Injectors:
    """Modules owned by the injection groups, handed to the U-Net per call."""

    bg: nn.ModuleList | None = None
    style: nn.ModuleList | None = None
    lora: nn.ModuleDict | None = None


class UNetEncoder(nn.Module):
    """conv_in + per-level (downsample, residual block, optional cross-attention)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.unet_channels
        self.attention_levels = tuple(cfg.attention_levels)
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)
        self.downs = nn.ModuleList()
        self.res = nn.ModuleList()
        self.attn = nn.ModuleDict()
        for l, c in enumerate(ch):
            self.downs.append(nn.Identity() if l == 0 else Downsample(ch[l - 1], c))
            self.res.append(ResBlock(c, c, cfg.temb_dim))
            if l in self.attention_levels:
                self.attn[str(l)] = CrossAttention(c, cfg.embed_dim, cfg.attention_heads)

    def forward(self, z, temb, tokens, sketch_feats=None, splits: Mapping[str, SplitSpec] | None = None):
        h = self.conv_in(z)
        skips = []
        for l in range(len(self.res)):
            h = self.downs[l](h)
            if sketch_feats is not None:
                h = h + sketch_feats[l]
            h = self.res[l](h, temb)
            if str(l) in self.attn:
                h = self.attn[str(l)](h, tokens, (splits or {}).get(_attn_name("enc", l)))
            skips.append(h)
        return skips


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.unet_channels
        self.cfg = cfg
        self.temb_dim = cfg.temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(ch[0], cfg.temb_dim), nn.SiLU(), nn.Linear(cfg.temb_dim, cfg.temb_dim))
        self.encoder = UNetEncoder(cfg)
        self.mid_res1 = ResBlock(ch[-1], ch[-1], cfg.temb_dim)
        self.mid_attn = CrossAttention(ch[-1], cfg.embed_dim, cfg.attention_heads)
        self.mid_res2 = ResBlock(ch[-1], ch[-1], cfg.temb_dim)
        self.dec_res = nn.ModuleList(ResBlock(2 * c, c, cfg.temb_dim) for c in ch)
        self.dec_attn = nn.ModuleDict(
            {str(l): CrossAttention(ch[l], cfg.embed_dim, cfg.attention_heads) for l in cfg.attention_levels}
        )
        self.ups = nn.ModuleList(nn.Identity() if l == 0 else Upsample(ch[l], ch[l - 1]) for l in range(len(ch)))
        self.out = nn.Sequential(nn.GroupNorm(_groups(ch[0]), ch[0]), nn.SiLU(),
                                 nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1))
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    def time_embedding(self, t) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.cfg.unet_channels[0]))

    def _splits(self, bundle: InjectionBundle | None, injectors: Injectors | None, batch: int):
        if bundle is None or not bundle.split_active:
            return None
        if bundle.sketch_masks is None:
            raise ValueError("split attention requested without a sketch mask pyramid")
        flags = bundle.ref_mask_token_flags.to(torch.bool)
        if flags.shape[0] == 1 and batch > 1:
            flags = flags.expand(batch, -1)
        splits = {}
        for name in attention_layer_names(self.cfg):
            level = attention_layer_level(name, self.cfg)
            m = bundle.sketch_masks[level]
            q_fg = m.flatten(1) > bundle.thresholds.ts_s
            if q_fg.shape[0] == 1 and batch > 1:
                q_fg = q_fg.expand(batch, -1)
            lora = injectors.lora[name] if injectors is not None and injectors.lora is not None else None
            splits[name] = SplitSpec(q_fg, flags, lora, bundle.lora_active)
        return splits

    def forward(self, z_t, t, sketch_feats, tokens, bundle: InjectionBundle | None = None,
                injectors: Injectors | None = None):
        if tokens.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"token width {tokens.shape[-1]} != {self.cfg.embed_dim}")
        B = z_t.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and B > 1:
            t = t.expand(B)
        temb = self.time_embedding(t)
        splits = self._splits(bundle, injectors, B)
        skips = self.encoder(z_t, temb, tokens, sketch_feats, splits)
        h = self.mid_res1(skips[-1], temb)
        h = self.mid_attn(h, tokens, (splits or {}).get("mid"))
        h = self.mid_res2(h, temb)

        use_bg = bundle is not None and bundle.z_bg is not None
        use_style = bundle is not None and bundle.z_style is not None
        if (use_bg and (injectors is None or injectors.bg is None)) or (
            use_style and (injectors is None or injectors.style is None)
        ):
            raise ValueError("bundle requests injection modules that were not supplied")
        for l in reversed(range(len(skips))):
            skip = skips[l]
            if use_bg:
                skip = injectors.bg[l](skip, bundle.z_bg[l], bundle.sketch_masks[l], bundle.thresholds.ts_s)
            h = self.dec_res[l](torch.cat([h, skip], dim=1), temb)
            if use_style:
                h = injectors.style[l](h, bundle.z_style, temb)
            if str(l) in self.dec_attn:
                h = self.dec_attn[str(l)](h, tokens, (splits or {}).get(_attn_name("dec", l)))
            h = self.ups[l](h)
        return self.out(h)


def build_injectors(cfg: ModelConfig) -> tuple[nn.ModuleList, nn.ModuleList, nn.ModuleDict]:
    ch = cfg.unet_channels
    bg = nn.ModuleList(BackgroundInjection(c, cfg.attention_heads) for c in ch)
    style = nn.ModuleList(StyleInjection(ch[-1], cfg.temb_dim, c) for c in ch)
    lora = nn.ModuleDict()
    for name in attention_layer_names(cfg):
        c = ch[attention_layer_level(name, cfg)]
        lora[name] = nn.ModuleDict({
            "q": LoraAdapter(c, c, cfg.lora_rank, cfg.lora_alpha),
            "k": LoraAdapter(cfg.embed_dim, c, cfg.lora_rank, cfg.lora_alpha),
            "v": LoraAdapter(cfg.embed_dim, c, cfg.lora_rank, cfg.lora_alpha),
        })
    return bg, style, lora

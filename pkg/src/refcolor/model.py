"""The full colorization model, organised into named parameter groups."""

from __future__ import annotations

import copy
import hashlib

import torch
import torch.nn as nn

from .backbone import (
    EmbeddingSet,
    Injectors,
    ModelConfig,
    ReferenceEmbedder,
    SketchEncoder,
    ToyVAE,
    UNet,
    UNetEncoder,
    build_injectors,
)
from .core_math import NoiseSchedule, prior_noise_estimate
from .injection import InjectionBundle

GROUP_NAMES = (
    "vae",
    "embedder",
    "sketch_encoder",
    "unet",
    "bg_encoder",
    "bg_injection",
    "style_encoder",
    "style_injection",
    "lora_split_attn",
)


class ColorizationModel(nn.Module):
    """Every network of the pipeline; each attribute named in ``GROUP_NAMES`` is a parameter group."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.model_seed)
            self.vae = ToyVAE(cfg)
            self.sketch_encoder = SketchEncoder(cfg)
            self.unet = UNet(cfg)
            self.bg_injection, self.style_injection, self.lora_split_attn = build_injectors(cfg)
        self.embedder = ReferenceEmbedder(cfg)
        self.bg_encoder = copy.deepcopy(self.unet.encoder)
        self.style_encoder = copy.deepcopy(self.unet.encoder)

    # -- groups ------------------------------------------------------------

    def group(self, name: str) -> nn.Module:
        if name not in GROUP_NAMES:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def group_state(self, name: str) -> dict[str, torch.Tensor]:
        return {f"{name}.{k}": v for k, v in self.group(name).state_dict().items()}

    def group_checksum(self, name: str) -> str:
        h = hashlib.sha256()
        for key, tensor in sorted(self.group(name).state_dict().items()):
            h.update(key.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def checksums(self) -> dict[str, str]:
        return {name: self.group_checksum(name) for name in GROUP_NAMES}

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(GROUP_NAMES)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        for name in GROUP_NAMES:
            self.group(name).requires_grad_(name in groups and name != "embedder")

    def init_from_unet_encoder(self, name: str) -> None:
        """Copy the U-Net encoder weights into ``bg_encoder`` or ``style_encoder``."""
        if name not in ("bg_encoder", "style_encoder"):
            raise KeyError(name)
        target: UNetEncoder = self.group(name)
        target.load_state_dict(self.unet.encoder.state_dict())

    @property
    def injectors(self) -> Injectors:
        return Injectors(self.bg_injection, self.style_injection, self.lora_split_attn)

    # -- forward pieces ------------------------------------------------------

    def embed_reference(self, img: torch.Tensor) -> EmbeddingSet:
        return self.embedder(img)

    def sketch_encode(self, sketch: torch.Tensor) -> list[torch.Tensor]:
        return self.sketch_encoder(sketch)

    def _zero_temb(self, batch: int, like: torch.Tensor) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.temb_dim, dtype=like.dtype)

    def encode_background(self, z_ref_bg: torch.Tensor, emb: EmbeddingSet) -> list[torch.Tensor]:
        """Per-level background features from the bleached-reference latent."""
        self._check_latent(z_ref_bg)
        return self.bg_encoder(z_ref_bg, self._zero_temb(z_ref_bg.shape[0], z_ref_bg), emb.local)

    def encode_style(self, z_ref: torch.Tensor, emb: EmbeddingSet) -> torch.Tensor:
        """Deepest-level style feature map from the full reference latent."""
        self._check_latent(z_ref)
        return self.style_encoder(z_ref, self._zero_temb(z_ref.shape[0], z_ref), emb.local)[-1]

    def _check_latent(self, z):
        cfg = self.cfg
        div = 2 ** (len(cfg.unet_channels) - 1)
        if z.ndim != 4 or z.shape[1] != cfg.latent_channels or z.shape[2] % div or z.shape[3] % div:
            raise ValueError(
                f"latent must be (B, {cfg.latent_channels}, h, w) with h, w divisible by {div}, got {tuple(z.shape)}"
            )

    def denoise(self, z_t, t, sketch_feats, tokens: torch.Tensor, bundle: InjectionBundle | None = None):
        if bundle is not None and bundle.is_vanilla and not bundle.lora_active:
            bundle = None
        return self.unet(z_t, t, sketch_feats, tokens, bundle, self.injectors if bundle is not None else None)

    def predict_noise(self, z_t, t, sketch_feats, tokens: torch.Tensor, bundle: InjectionBundle | None,
                      sched: NoiseSchedule) -> torch.Tensor:
        """Noise estimate: the U-Net output on top of the Gaussian-prior estimate."""
        return self.denoise(z_t, t, sketch_feats, tokens, bundle) + prior_noise_estimate(z_t, t, sched)
